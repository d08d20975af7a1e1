// Entry point: hash routing between the gallery and a slide view, plus the
// bearer-token login prompt shown on 401.

import { ReviewApi } from './api.js';
import { FeedbackPanel } from './feedback.js';
import { Gallery } from './gallery.js';
import { SlideViewer } from './viewer.js';

const TOKEN_KEY = 'slidemil-token';
const POLL_MS = 2000;

const api = new ReviewApi('', localStorage.getItem(TOKEN_KEY));
let gallery: Gallery | null = null;

function appRoot(): HTMLElement {
  return document.getElementById('app')!;
}

function showLogin(): void {
  gallery?.stop();
  appRoot().innerHTML = `
    <div class="login">
      <h2>sign in</h2>
      <p>this service requires an access token</p>
      <input type="password" class="token-input" placeholder="bearer token" />
      <button class="token-submit">continue</button>
    </div>`;
  appRoot()
    .querySelector<HTMLButtonElement>('.token-submit')!
    .addEventListener('click', () => {
      const token = appRoot().querySelector<HTMLInputElement>('.token-input')!.value.trim();
      if (!token) return;
      localStorage.setItem(TOKEN_KEY, token);
      api.setToken(token);
      void showGallery();
    });
}

async function showGallery(): Promise<void> {
  gallery?.stop();
  const root = appRoot();
  root.innerHTML = '<div class="gallery"></div>';
  gallery = new Gallery(root.querySelector<HTMLElement>('.gallery')!, api, {
    pollMs: POLL_MS,
    onOpenSlide: (id) => {
      location.hash = `#/slide/${id}`;
    },
    onAuthRequired: showLogin,
  });
  await gallery.start();
}

async function showSlide(id: string): Promise<void> {
  gallery?.stop();
  const root = appRoot();
  let entry;
  try {
    entry = await api.getSlide(id);
  } catch {
    root.innerHTML = `<p class="error">slide ${id} not found</p>`;
    return;
  }
  if (entry.state !== 'done') {
    root.innerHTML = `
      <a href="#/">← back</a>
      <p class="status">slide ${id.slice(0, 8)} is ${entry.state}${entry.error ? `: ${entry.error}` : ''}</p>`;
    return;
  }
  root.innerHTML = `
    <a href="#/">← back</a>
    <div class="slide-page">
      <div class="slide-main">
        <h2>slide ${id.slice(0, 8)} — ${entry.predicted}</h2>
        <div class="slide-viewer"></div>
      </div>
      <aside class="slide-side">
        <div class="feedback-panel"></div>
      </aside>
    </div>`;
  new SlideViewer(root.querySelector<HTMLElement>('.slide-viewer')!, api, id).render();
  new FeedbackPanel(root.querySelector<HTMLElement>('.feedback-panel')!, api, id).render();
}

function route(): void {
  const hash = location.hash;
  const slideMatch = /^#\/slide\/(.+)$/.exec(hash);
  if (slideMatch && slideMatch[1]) {
    void showSlide(decodeURIComponent(slideMatch[1]));
  } else {
    void showGallery();
  }
}

window.addEventListener('hashchange', route);
route();
