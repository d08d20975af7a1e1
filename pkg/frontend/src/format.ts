// View-model helpers. Percentage formatting is the only arithmetic the client
// performs on API numbers.

import type { SlideEntry } from './types.js';
import { CLASS_NAMES } from './types.js';

export interface ConfidenceView {
  label: string;
  value: number;
  percent: string;
}

export interface SlideCard {
  id: string;
  shortId: string;
  state: string;
  predicted: string | null;
  confidences: ConfidenceView[];
  error: string | null;
}

export function formatPercent(p: number): string {
  return `${(p * 100).toFixed(1)}%`;
}

export function buildSlideCard(entry: SlideEntry): SlideCard {
  const confidences = (entry.confidence ?? []).map((value, i) => ({
    label: CLASS_NAMES[i] ?? `class ${i + 1}`,
    value,
    percent: formatPercent(value),
  }));
  return {
    id: entry.slide_id,
    shortId: entry.slide_id.slice(0, 8),
    state: entry.state,
    predicted: entry.predicted ?? null,
    confidences,
    error: entry.error ?? null,
  };
}

export function filterCards(cards: SlideCard[], query: string): SlideCard[] {
  const needle = query.trim().toLowerCase();
  if (!needle) return cards;
  return cards.filter((c) => c.id.toLowerCase().includes(needle));
}
