// Feedback panel: verdict buttons, optional corrected label (wrong verdicts
// only), comment box, submission history.

import { ReviewApi } from './api.js';
import type { ClassName, FeedbackBody, Verdict } from './types.js';
import { CLASS_NAMES, VERDICTS } from './types.js';

export function buildFeedbackBody(
  verdict: Verdict,
  comment: string,
  correctedLabel: ClassName | '' = '',
): FeedbackBody {
  const body: FeedbackBody = { verdict, comment };
  if (verdict === 'wrong' && correctedLabel) body.corrected_label = correctedLabel;
  return body;
}

export class FeedbackPanel {
  private verdict: Verdict | null = null;

  constructor(
    private root: HTMLElement,
    private api: ReviewApi,
    private slideId: string,
  ) {}

  render(): void {
    const verdictButtons = VERDICTS.map(
      (v) => `<button class="verdict-option" data-verdict="${v}">${v}</button>`,
    ).join('');
    const labelOptions = CLASS_NAMES.map((c) => `<option value="${c}">${c}</option>`).join('');
    this.root.innerHTML = `
      <h3>report this result</h3>
      <div class="verdict-group">${verdictButtons}</div>
      <label class="corrected-label" hidden>corrected label
        <select class="corrected-select"><option value="">choose…</option>${labelOptions}</select>
      </label>
      <textarea class="comment-box" placeholder="leave a comment"></textarea>
      <button class="submit-feedback" disabled>submit</button>
      <div class="toast" hidden></div>
      <ul class="feedback-history"></ul>`;
    this.bind();
    void this.loadHistory();
  }

  private bind(): void {
    for (const button of this.root.querySelectorAll<HTMLButtonElement>('.verdict-option')) {
      button.addEventListener('click', () => {
        this.verdict = button.dataset.verdict as Verdict;
        for (const other of this.root.querySelectorAll<HTMLButtonElement>('.verdict-option')) {
          other.classList.toggle('active', other === button);
        }
        this.root.querySelector<HTMLElement>('.corrected-label')!.hidden =
          this.verdict !== 'wrong';
        this.root.querySelector<HTMLButtonElement>('.submit-feedback')!.disabled = false;
      });
    }
    this.root
      .querySelector<HTMLButtonElement>('.submit-feedback')!
      .addEventListener('click', () => void this.submit());
  }

  private async submit(): Promise<void> {
    if (!this.verdict) return; // button stays disabled until a verdict is chosen
    const comment = this.root.querySelector<HTMLTextAreaElement>('.comment-box')!.value;
    const corrected = this.root.querySelector<HTMLSelectElement>('.corrected-select')!
      .value as ClassName | '';
    const body = buildFeedbackBody(this.verdict, comment, corrected);
    try {
      await this.api.postFeedback(this.slideId, body);
      this.showToast('feedback recorded');
      await this.loadHistory();
    } catch (err) {
      this.showToast(`failed: ${err instanceof Error ? err.message : err}`);
    }
  }

  private showToast(text: string): void {
    const toast = this.root.querySelector<HTMLElement>('.toast')!;
    toast.hidden = false;
    toast.textContent = text;
  }

  private async loadHistory(): Promise<void> {
    const list = this.root.querySelector<HTMLUListElement>('.feedback-history')!;
    try {
      const records = await this.api.feedbackHistory(this.slideId);
      list.innerHTML = records
        .map(
          (r) => `
          <li class="history-row">
            <span class="history-verdict">${r.verdict}</span>
            ${r.corrected_label ? `<span class="history-correction">→ ${r.corrected_label}</span>` : ''}
            <span class="history-comment">${r.comment ?? ''}</span>
            <span class="history-meta">${r.author ?? ''} ${r.created_at}</span>
          </li>`,
        )
        .join('');
    } catch {
      list.innerHTML = '';
    }
  }
}
