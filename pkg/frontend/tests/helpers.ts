import { vi } from 'vitest';
import type { SlideEntry } from '../src/types.js';

export const DONE_SLIDE: SlideEntry = {
  slide_id: 'a1b2c3d4e5f60718',
  state: 'done',
  error: null,
  predicted: 'HG',
  confidence: [0.05, 0.112, 0.838],
  model_version: 'v1',
  timestamp: '2024-01-01T00:00:00Z',
};

export const SECOND_SLIDE: SlideEntry = {
  slide_id: 'ffee001122334455',
  state: 'done',
  error: null,
  predicted: 'NNeo',
  confidence: [1 / 3, 1 / 3, 1 / 3],
  model_version: 'v1',
  timestamp: '2024-01-01T00:01:00Z',
};

export const QUEUED_SLIDE: SlideEntry = {
  slide_id: '9999aaaa0000bbbb',
  state: 'queued',
  error: null,
};

export interface RecordedRequest {
  url: string;
  method: string;
  body: unknown;
}

/** Installs a fetch stub serving canned review-service endpoints. */
export function mockService(options: {
  slides?: SlideEntry[];
  feedback?: unknown[];
  csv?: string;
  status?: number;
  failNetwork?: boolean;
}): RecordedRequest[] {
  const requests: RecordedRequest[] = [];
  const slides = options.slides ?? [];
  const feedback = options.feedback ?? [];

  vi.stubGlobal(
    'fetch',
    vi.fn(async (input: RequestInfo | URL, init?: RequestInit) => {
      const url = String(input);
      const method = init?.method ?? 'GET';
      let body: unknown = null;
      if (typeof init?.body === 'string') body = JSON.parse(init.body);
      requests.push({ url, method, body });

      if (options.failNetwork) throw new TypeError('network down');
      if (options.status && options.status !== 200) {
        return new Response(JSON.stringify({ message: 'denied' }), {
          status: options.status,
          headers: { 'Content-Type': 'application/json' },
        });
      }

      const json = (payload: unknown) =>
        new Response(JSON.stringify(payload), {
          status: 200,
          headers: { 'Content-Type': 'application/json' },
        });

      if (url.endsWith('/api/export.csv')) {
        return new Response(options.csv ?? '', {
          status: 200,
          headers: { 'Content-Type': 'text/csv' },
        });
      }
      if (/\/api\/slides\/[^/]+\/feedback$/.test(url)) {
        if (method === 'POST') {
          const record = { id: feedback.length + 1, ...(body as object), created_at: 'now' };
          feedback.push(record);
          return json(record);
        }
        return json(feedback);
      }
      if (/\/api\/slides\/[^/]+$/.test(url)) {
        const id = url.split('/').pop();
        const found = slides.find((s) => s.slide_id === id);
        return found
          ? json(found)
          : new Response(JSON.stringify({ code: 'UnknownSlide', message: 'nope' }), {
              status: 404,
            });
      }
      if (url.endsWith('/api/slides')) return json(slides);
      return new Response('not found', { status: 404 });
    }),
  );
  return requests;
}
