// Shapes of the review-service API payloads. The client renders these as-is;
// it never re-derives diagnoses or confidences.

export type ClassName = 'NNeo' | 'LG' | 'HG';
export type HeatmapClass = ClassName | 'argmax';
export type JobState = 'queued' | 'processing' | 'done' | 'failed';
export type Verdict = 'correct' | 'wrong' | 'inconclusive';

export const CLASS_NAMES: ClassName[] = ['NNeo', 'LG', 'HG'];
export const VERDICTS: Verdict[] = ['correct', 'wrong', 'inconclusive'];

export interface SlideEntry {
  slide_id: string;
  state: JobState;
  error: string | null;
  predicted?: ClassName;
  confidence?: number[];
  model_version?: string;
  timestamp?: string | null;
}

export interface FeedbackBody {
  verdict: Verdict;
  comment: string;
  corrected_label?: ClassName;
  author?: string;
}

export interface FeedbackRecord {
  id: number;
  slide_id: string;
  verdict: Verdict;
  comment: string | null;
  corrected_label: ClassName | null;
  author: string | null;
  created_at: string;
}
