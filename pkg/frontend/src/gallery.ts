// Gallery: slide cards with diagnosis, per-class confidence, status polling
// and id search.

import { ApiError, ReviewApi } from './api.js';
import { buildSlideCard, filterCards, type SlideCard } from './format.js';
import type { SlideEntry } from './types.js';

export interface GalleryOptions {
  pollMs?: number;
  onOpenSlide?: (id: string) => void;
  onAuthRequired?: () => void;
}

export class Gallery {
  private entries: SlideEntry[] = [];
  private query = '';
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private root: HTMLElement,
    private api: ReviewApi,
    private options: GalleryOptions = {},
  ) {}

  async start(): Promise<void> {
    this.renderShell();
    await this.refresh();
    if (this.options.pollMs) {
      this.timer = setInterval(() => void this.refresh(), this.options.pollMs);
    }
  }

  stop(): void {
    if (this.timer) clearInterval(this.timer);
    this.timer = null;
  }

  async refresh(): Promise<void> {
    try {
      this.entries = await this.api.listSlides();
      this.setBanner(null);
    } catch (err) {
      if (err instanceof ApiError && err.status === 401) {
        this.options.onAuthRequired?.();
        return;
      }
      this.setBanner('service unreachable, retrying…');
      return;
    }
    this.renderCards();
  }

  private renderShell(): void {
    this.root.innerHTML = `
      <div class="toolbar">
        <input type="search" class="slide-search" placeholder="search slide id" />
        <label class="upload-button">upload slides
          <input type="file" class="upload-input" multiple accept=".png,.tif,.tiff" hidden />
        </label>
        <a class="csv-link" href="${this.api.exportCsvUrl()}" download="results.csv">download csv</a>
      </div>
      <div class="banner" hidden></div>
      <div class="cards"></div>`;
    const search = this.root.querySelector<HTMLInputElement>('.slide-search')!;
    search.addEventListener('input', () => {
      this.query = search.value;
      this.renderCards();
    });
    const upload = this.root.querySelector<HTMLInputElement>('.upload-input')!;
    upload.addEventListener('change', () => {
      const files = Array.from(upload.files ?? []);
      if (files.length) {
        void this.api.submitFiles(files).then(() => this.refresh());
      }
      upload.value = '';
    });
  }

  private setBanner(text: string | null): void {
    const banner = this.root.querySelector<HTMLElement>('.banner');
    if (!banner) return;
    banner.hidden = text === null;
    banner.textContent = text ?? '';
  }

  private renderCards(): void {
    const host = this.root.querySelector<HTMLElement>('.cards');
    if (!host) return;
    const cards = filterCards(this.entries.map(buildSlideCard), this.query);
    host.innerHTML = '';
    if (!cards.length) {
      host.innerHTML = '<p class="empty">no slides yet</p>';
      return;
    }
    for (const card of cards) host.appendChild(this.cardElement(card));
  }

  private cardElement(card: SlideCard): HTMLElement {
    const el = document.createElement('div');
    el.className = `card state-${card.state}`;
    el.dataset.slideId = card.id;
    const confRows = card.confidences
      .map(
        (c) => `
        <div class="confidence-row">
          <span class="confidence-label">${c.label}</span>
          <span class="confidence-bar"><span style="width:${(c.value * 100).toFixed(1)}%"></span></span>
          <span class="confidence-percent">${c.percent}</span>
        </div>`,
      )
      .join('');
    const body =
      card.state === 'done'
        ? `<div class="predicted badge-${card.predicted}">${card.predicted}</div>${confRows}`
        : card.state === 'failed'
          ? `<div class="failed">failed: ${card.error ?? 'unknown error'}</div>`
          : `<div class="spinner" title="${card.state}"></div><div>${card.state}…</div>`;
    el.innerHTML = `
      ${card.state === 'done' ? `<img class="thumb" alt="slide ${card.shortId}" src="${this.api.heatmapUrl(card.id, 'argmax', 0)}" />` : ''}
      <div class="card-id" title="${card.id}">${card.shortId}</div>
      ${body}`;
    el.addEventListener('click', () => this.options.onOpenSlide?.(card.id));
    return el;
  }
}
