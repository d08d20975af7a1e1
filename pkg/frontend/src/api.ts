// Thin typed wrapper over the review-service HTTP API.

import type { FeedbackBody, FeedbackRecord, HeatmapClass, SlideEntry } from './types.js';

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class ReviewApi {
  constructor(private base = '', private token: string | null = null) {}

  setToken(token: string | null): void {
    this.token = token;
  }

  private headers(): Record<string, string> {
    return this.token ? { Authorization: `Bearer ${this.token}` } : {};
  }

  private withToken(url: string): string {
    if (!this.token) return url;
    return url + (url.includes('?') ? '&' : '?') + `token=${encodeURIComponent(this.token)}`;
  }

  private async request<T>(path: string, init: RequestInit = {}): Promise<T> {
    const resp = await fetch(this.base + path, {
      ...init,
      headers: { ...this.headers(), ...(init.headers ?? {}) },
    });
    if (!resp.ok) {
      let message = resp.statusText;
      try {
        const body = await resp.json();
        message = body.message ?? body.detail ?? message;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(resp.status, message);
    }
    return resp.json() as Promise<T>;
  }

  listSlides(): Promise<SlideEntry[]> {
    return this.request('/api/slides');
  }

  getSlide(id: string): Promise<SlideEntry> {
    return this.request(`/api/slides/${encodeURIComponent(id)}`);
  }

  submitFiles(files: File[]): Promise<SlideEntry[]> {
    const form = new FormData();
    for (const file of files) form.append('files', file);
    return this.request('/api/slides', { method: 'POST', body: form });
  }

  heatmapUrl(id: string, cls: HeatmapClass, opacity: number): string {
    const clamped = Math.min(1, Math.max(0, opacity));
    return this.withToken(
      `${this.base}/api/slides/${encodeURIComponent(id)}/heatmap` +
        `?class=${encodeURIComponent(cls)}&opacity=${clamped}`,
    );
  }

  postFeedback(id: string, body: FeedbackBody): Promise<FeedbackRecord> {
    return this.request(`/api/slides/${encodeURIComponent(id)}/feedback`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    });
  }

  feedbackHistory(id: string): Promise<FeedbackRecord[]> {
    return this.request(`/api/slides/${encodeURIComponent(id)}/feedback`);
  }

  // direct link; the browser downloads the service export untouched
  exportCsvUrl(): string {
    return this.withToken(`${this.base}/api/export.csv`);
  }
}
