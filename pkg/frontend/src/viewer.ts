// Slide view: pannable/zoomable thumbnail with the heatmap stacked on top.
// Both images live in one transformed element, so the overlay stays
// registered with the tissue at any zoom. The opacity slider and class
// selector re-request the heatmap from the service.

import { ReviewApi } from './api.js';
import type { HeatmapClass } from './types.js';

const HEATMAP_CLASSES: HeatmapClass[] = ['argmax', 'NNeo', 'LG', 'HG'];

export class SlideViewer {
  private scale = 1;
  private tx = 0;
  private ty = 0;
  private overlayClass: HeatmapClass = 'argmax';
  private opacity = 0.5;
  private dragging: { x: number; y: number } | null = null;

  constructor(
    private root: HTMLElement,
    private api: ReviewApi,
    private slideId: string,
  ) {}

  render(): void {
    const classButtons = HEATMAP_CLASSES.map(
      (c) =>
        `<button class="class-option${c === this.overlayClass ? ' active' : ''}" data-class="${c}">${c}</button>`,
    ).join('');
    this.root.innerHTML = `
      <div class="viewer-controls">
        <span class="control-group">${classButtons}</span>
        <label class="opacity-control">overlay
          <input type="range" class="opacity-slider" min="0" max="100" value="${this.opacity * 100}" />
          <span class="opacity-value">${Math.round(this.opacity * 100)}%</span>
        </label>
        <button class="zoom-reset">reset view</button>
      </div>
      <div class="viewport">
        <div class="stage">
          <img class="base-layer" alt="slide" draggable="false"
               src="${this.api.heatmapUrl(this.slideId, 'argmax', 0)}" />
          <img class="heat-layer" alt="heatmap overlay" draggable="false"
               src="${this.api.heatmapUrl(this.slideId, this.overlayClass, this.opacity)}" />
        </div>
      </div>`;
    this.bind();
    this.applyTransform();
  }

  setOpacity(opacity: number): void {
    this.opacity = Math.min(1, Math.max(0, opacity));
    const heat = this.root.querySelector<HTMLImageElement>('.heat-layer');
    if (heat) heat.src = this.api.heatmapUrl(this.slideId, this.overlayClass, this.opacity);
    const label = this.root.querySelector<HTMLElement>('.opacity-value');
    if (label) label.textContent = `${Math.round(this.opacity * 100)}%`;
  }

  setOverlayClass(cls: HeatmapClass): void {
    this.overlayClass = cls;
    for (const button of this.root.querySelectorAll<HTMLButtonElement>('.class-option')) {
      button.classList.toggle('active', button.dataset.class === cls);
    }
    const heat = this.root.querySelector<HTMLImageElement>('.heat-layer');
    if (heat) heat.src = this.api.heatmapUrl(this.slideId, this.overlayClass, this.opacity);
  }

  private bind(): void {
    const slider = this.root.querySelector<HTMLInputElement>('.opacity-slider')!;
    slider.addEventListener('input', () => this.setOpacity(Number(slider.value) / 100));

    for (const button of this.root.querySelectorAll<HTMLButtonElement>('.class-option')) {
      button.addEventListener('click', () =>
        this.setOverlayClass(button.dataset.class as HeatmapClass),
      );
    }

    this.root.querySelector<HTMLButtonElement>('.zoom-reset')!.addEventListener('click', () => {
      this.scale = 1;
      this.tx = this.ty = 0;
      this.applyTransform();
    });

    const viewport = this.root.querySelector<HTMLElement>('.viewport')!;
    viewport.addEventListener('wheel', (ev) => {
      ev.preventDefault();
      const factor = ev.deltaY < 0 ? 1.15 : 1 / 1.15;
      this.scale = Math.min(40, Math.max(0.2, this.scale * factor));
      this.applyTransform();
    });
    viewport.addEventListener('pointerdown', (ev) => {
      this.dragging = { x: ev.clientX - this.tx, y: ev.clientY - this.ty };
    });
    viewport.addEventListener('pointermove', (ev) => {
      if (!this.dragging) return;
      this.tx = ev.clientX - this.dragging.x;
      this.ty = ev.clientY - this.dragging.y;
      this.applyTransform();
    });
    for (const ev of ['pointerup', 'pointerleave']) {
      viewport.addEventListener(ev, () => {
        this.dragging = null;
      });
    }
  }

  private applyTransform(): void {
    const stage = this.root.querySelector<HTMLElement>('.stage');
    if (stage) {
      stage.style.transform = `translate(${this.tx}px, ${this.ty}px) scale(${this.scale})`;
      stage.style.transformOrigin = '0 0';
    }
  }
}
