"""Review service: slide submission, cached diagnosis, heatmaps, feedback, CSV.

Submissions are content-addressed (sha256 of the uploaded bytes), processed
asynchronously by a bounded worker pool, and cached per (content hash, model
version): re-submitting identical bytes returns the stored diagnosis without
re-scoring. Results and feedback live in an embedded SQLite store, so both
survive restarts; interrupted jobs are re-queued on startup.

HTTP surface:
    POST /api/slides                      multipart batch -> job list
    GET  /api/slides                      all submissions (gallery index)
    GET  /api/slides/{id}                 result or status
    GET  /api/slides/{id}/heatmap         PNG, ?class=NNeo|LG|HG|argmax&opacity=
    POST /api/slides/{id}/feedback        verdict + comment (+ corrected label)
    GET  /api/slides/{id}/feedback        feedback history
    GET  /api/export.csv                  diagnosis + latest verdict per slide
    GET  /api/healthz
"""

import csv
import hashlib
import io
import json
import sqlite3
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import Depends, FastAPI, File, Request, UploadFile
from fastapi.responses import JSONResponse, PlainTextResponse, Response
from PIL import Image

from . import mil
from .errors import SlidemilError, UnsupportedFormat
from .labels import LABEL_COLORS, NAME_TO_LABEL, label_name, parse_label
from .scorer import ScorerModel, load_model
from .slides import open_slide
from .tiling import extract_tile, tile_grid
from .tissue import segment_tissue

VERDICTS = ("correct", "wrong", "inconclusive")
HEATMAP_CLASSES = ("NNeo", "LG", "HG", "argmax")


@dataclass
class ServiceConfig:
    workdir: str
    checkpoint: str = ""
    workers: int = 2
    token_file: str = ""
    tile_size: int = 64
    mask_factor: int = 16
    top_n: int = 5
    batch_infer: int = 256
    frontend_dir: str = ""


_SCHEMA = """
CREATE TABLE IF NOT EXISTS submissions (
    slide_id TEXT PRIMARY KEY,
    filename TEXT NOT NULL,
    path TEXT NOT NULL,
    state TEXT NOT NULL,
    error TEXT,
    submitted_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS results (
    slide_id TEXT NOT NULL,
    model_version TEXT NOT NULL,
    payload TEXT NOT NULL,
    completed_at TEXT NOT NULL,
    PRIMARY KEY (slide_id, model_version)
);
CREATE TABLE IF NOT EXISTS feedback (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    slide_id TEXT NOT NULL,
    verdict TEXT NOT NULL,
    comment TEXT,
    corrected_label TEXT,
    author TEXT,
    created_at TEXT NOT NULL
);
"""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class ReviewStore:
    """SQLite-backed store; one connection guarded by a lock (low write volume)."""

    def __init__(self, db_path):
        self._conn = sqlite3.connect(db_path, check_same_thread=False)
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.executescript(_SCHEMA)
        self._lock = threading.Lock()

    def upsert_submission(self, slide_id, filename, path, state, error=None):
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO submissions (slide_id, filename, path, state, error, submitted_at)"
                " VALUES (?,?,?,?,?,?) ON CONFLICT(slide_id) DO UPDATE SET"
                " state=excluded.state, error=excluded.error",
                (slide_id, filename, str(path), state, error, _now()))

    def set_state(self, slide_id, state, error=None):
        with self._lock, self._conn:
            self._conn.execute("UPDATE submissions SET state=?, error=? WHERE slide_id=?",
                               (state, error, slide_id))

    def submission(self, slide_id):
        with self._lock:
            row = self._conn.execute(
                "SELECT slide_id, filename, path, state, error FROM submissions"
                " WHERE slide_id=?", (slide_id,)).fetchone()
        if row is None:
            return None
        return dict(zip(("slide_id", "filename", "path", "state", "error"), row))

    def submissions(self):
        with self._lock:
            rows = self._conn.execute(
                "SELECT slide_id, filename, path, state, error FROM submissions"
                " ORDER BY submitted_at, slide_id").fetchall()
        return [dict(zip(("slide_id", "filename", "path", "state", "error"), r))
                for r in rows]

    def store_result(self, slide_id, model_version, payload: dict):
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT OR REPLACE INTO results (slide_id, model_version, payload,"
                " completed_at) VALUES (?,?,?,?)",
                (slide_id, model_version, json.dumps(payload, sort_keys=True), _now()))
            self._conn.execute("UPDATE submissions SET state='done', error=NULL"
                               " WHERE slide_id=?", (slide_id,))

    def result(self, slide_id, model_version) -> Optional[dict]:
        with self._lock:
            row = self._conn.execute(
                "SELECT payload FROM results WHERE slide_id=? AND model_version=?",
                (slide_id, model_version)).fetchone()
        return json.loads(row[0]) if row else None

    def add_feedback(self, slide_id, verdict, comment, corrected_label, author):
        created = _now()
        with self._lock, self._conn:
            cur = self._conn.execute(
                "INSERT INTO feedback (slide_id, verdict, comment, corrected_label,"
                " author, created_at) VALUES (?,?,?,?,?,?)",
                (slide_id, verdict, comment, corrected_label, author, created))
            return {"id": cur.lastrowid, "slide_id": slide_id, "verdict": verdict,
                    "comment": comment, "corrected_label": corrected_label,
                    "author": author, "created_at": created}

    def feedback_for(self, slide_id=None):
        query = ("SELECT id, slide_id, verdict, comment, corrected_label, author,"
                 " created_at FROM feedback")
        params = ()
        if slide_id is not None:
            query += " WHERE slide_id=?"
            params = (slide_id,)
        query += " ORDER BY id"
        with self._lock:
            rows = self._conn.execute(query, params).fetchall()
        keys = ("id", "slide_id", "verdict", "comment", "corrected_label", "author",
                "created_at")
        return [dict(zip(keys, r)) for r in rows]

    def close(self):
        with self._lock:
            self._conn.close()


def render_heatmap_image(thumb: np.ndarray, tiles: list, class_selector: str,
                         opacity: float, factor: int) -> np.ndarray:
    """Tint tile footprints on a thumbnail; background pixels stay untouched.

    argmax mode tints every tile with its argmax class color at the given
    opacity; a single-class mode scales the tint by that class's probability,
    so tiles with no evidence stay clean at any opacity.
    """
    opacity = min(1.0, max(0.0, opacity))
    out = thumb.astype(np.float64)
    for tile in tiles:
        x0, y0 = tile["x"] // factor, tile["y"] // factor
        x1, y1 = (tile["x"] + tile["size"]) // factor, (tile["y"] + tile["size"]) // factor
        probs = tile["probs"]
        if class_selector == "argmax":
            cls = int(np.argmax(probs)) + 1
            alpha = opacity
        else:
            cls = NAME_TO_LABEL[class_selector]
            alpha = opacity * probs[cls - 1]
        color = np.array(LABEL_COLORS[cls], dtype=np.float64)
        out[y0:y1, x0:x1] = (1.0 - alpha) * out[y0:y1, x0:x1] + alpha * color
    return np.round(out).clip(0, 255).astype(np.uint8)


class DiagnosisEngine:
    """Runs the pipeline for one uploaded slide and shapes the stored payload."""

    def __init__(self, model: ScorerModel, cfg: ServiceConfig):
        self.model = model
        self.cfg = cfg

    def diagnose(self, path) -> dict:
        slide = open_slide(path)
        mask = segment_tissue(slide, self.cfg.mask_factor)
        tiles = tile_grid(slide, mask, size=self.cfg.tile_size)
        if not tiles.refs:
            raise UnsupportedFormat("no tissue tiles found on the slide")
        result = mil.infer_slide(self.model, tiles.refs,
                                 lambda ref: extract_tile(slide, ref),
                                 top_n=self.cfg.top_n, batch_infer=self.cfg.batch_infer)
        payload = result.to_dict(include_ranking=True)
        payload["timestamp"] = _now()
        return payload


def _load_tokens(token_file) -> dict:
    tokens = {}
    for line in Path(token_file).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        tokens[parts[0]] = parts[1].strip() if len(parts) > 1 else "user"
    return tokens


def create_app(cfg: ServiceConfig, model: ScorerModel = None) -> FastAPI:
    workdir = Path(cfg.workdir)
    uploads = workdir / "uploads"
    uploads.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = load_model(cfg.checkpoint)
    model_version = model.version
    store = ReviewStore(workdir / "review.db")
    engine = DiagnosisEngine(model, cfg)
    pool = ThreadPoolExecutor(max_workers=cfg.workers)
    tokens = _load_tokens(cfg.token_file) if cfg.token_file else None

    app = FastAPI(title="slide review service")
    app.state.store = store
    app.state.model_version = model_version

    def process(slide_id: str, path: str):
        store.set_state(slide_id, "processing")
        try:
            payload = engine.diagnose(path)
            store.store_result(slide_id, model_version, payload)
        except Exception as exc:
            store.set_state(slide_id, "failed", f"{type(exc).__name__}: {exc}")

    def enqueue(slide_id: str, path: str):
        store.set_state(slide_id, "queued")
        pool.submit(process, slide_id, path)

    # resume anything interrupted by a previous shutdown
    for sub in store.submissions():
        if sub["state"] in ("queued", "processing"):
            enqueue(sub["slide_id"], sub["path"])

    class SlidemilAuthError(Exception):
        pass

    def auth(request: Request) -> str:
        if tokens is None:
            return "anonymous"
        header = request.headers.get("authorization", "")
        token = header[7:] if header.lower().startswith("bearer ") else \
            request.query_params.get("token", "")
        user = tokens.get(token)
        if user is None:
            raise SlidemilAuthError()
        return user

    def error(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"code": code, "message": message})

    @app.exception_handler(SlidemilAuthError)
    async def _auth_error(request, exc):
        return error(401, "Unauthorized", "missing or invalid bearer token")

    @app.exception_handler(SlidemilError)
    async def _domain_error(request, exc):
        return error(400, type(exc).__name__, str(exc))

    def status_payload(sub: dict) -> dict:
        return {"slide_id": sub["slide_id"], "state": sub["state"], "error": sub["error"]}

    @app.get("/api/healthz")
    def healthz():
        return {"status": "ok", "model_version": model_version}

    @app.post("/api/slides")
    async def submit(files: list[UploadFile] = File(default=[]), user: str = Depends(auth)):
        jobs = []
        for upload in files:
            data = await upload.read()
            slide_id = hashlib.sha256(data).hexdigest()[:16]
            suffix = Path(upload.filename or "slide.png").suffix or ".png"
            path = uploads / f"{slide_id}{suffix}"
            if not path.exists():
                path.write_bytes(data)
            cached = store.result(slide_id, model_version)
            if cached is not None:
                store.upsert_submission(slide_id, upload.filename, path, "done")
                jobs.append({"slide_id": slide_id, "state": "done", "error": None})
                continue
            existing = store.submission(slide_id)
            if existing and existing["state"] in ("queued", "processing"):
                jobs.append(status_payload(existing))
                continue
            try:
                open_slide(path)
            except SlidemilError as exc:
                store.upsert_submission(slide_id, upload.filename, path, "failed",
                                        f"{type(exc).__name__}: {exc}")
                jobs.append({"slide_id": slide_id, "state": "failed",
                             "error": f"{type(exc).__name__}: {exc}"})
                continue
            store.upsert_submission(slide_id, upload.filename, path, "queued")
            enqueue(slide_id, str(path))
            jobs.append({"slide_id": slide_id, "state": "queued", "error": None})
        return jobs

    @app.get("/api/slides")
    def list_slides(user: str = Depends(auth)):
        out = []
        for sub in store.submissions():
            entry = status_payload(sub)
            if sub["state"] == "done":
                payload = store.result(sub["slide_id"], model_version)
                if payload is not None:
                    entry.update({k: payload[k] for k in
                                  ("predicted", "confidence", "model_version", "timestamp")})
            out.append(entry)
        return out

    @app.get("/api/slides/{slide_id}")
    def get_result(slide_id: str, user: str = Depends(auth)):
        sub = store.submission(slide_id)
        if sub is None:
            return error(404, "UnknownSlide", f"no submission {slide_id}")
        if sub["state"] == "done":
            payload = store.result(slide_id, model_version)
            if payload is not None:
                trimmed = {k: v for k, v in payload.items() if k != "tiles"}
                trimmed["state"] = "done"
                return trimmed
        return status_payload(sub)

    @app.get("/api/slides/{slide_id}/heatmap")
    def heatmap(slide_id: str, request: Request, opacity: float = 0.5,
                user: str = Depends(auth)):
        class_selector = request.query_params.get("class", "argmax")
        if class_selector not in HEATMAP_CLASSES:
            return error(422, "InvalidClass",
                         f"class must be one of {', '.join(HEATMAP_CLASSES)}")
        sub = store.submission(slide_id)
        if sub is None:
            return error(404, "UnknownSlide", f"no submission {slide_id}")
        payload = store.result(slide_id, model_version)
        if sub["state"] != "done" or payload is None:
            return error(409, "ResultNotReady", f"slide {slide_id} is {sub['state']}")
        from .slides import thumbnail as slide_thumbnail
        slide = open_slide(sub["path"])
        thumb = slide_thumbnail(slide, cfg.mask_factor)
        img = render_heatmap_image(thumb, payload["tiles"], class_selector, opacity,
                                   cfg.mask_factor)
        buf = io.BytesIO()
        Image.fromarray(img).save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/api/slides/{slide_id}/feedback")
    async def post_feedback(slide_id: str, request: Request, user: str = Depends(auth)):
        sub = store.submission(slide_id)
        if sub is None:
            return error(404, "UnknownSlide", f"no submission {slide_id}")
        body = await request.json()
        verdict = body.get("verdict")
        if verdict not in VERDICTS:
            return error(422, "InvalidVerdict",
                         f"verdict must be one of {', '.join(VERDICTS)}")
        corrected = body.get("corrected_label") or None
        if corrected is not None:
            if verdict != "wrong":
                return error(422, "InvalidVerdict",
                             "corrected_label is only allowed with verdict=wrong")
            try:
                corrected = label_name(parse_label(corrected))
            except ValueError as exc:
                return error(422, "InvalidVerdict", str(exc))
        author = user if tokens is not None else (body.get("author") or "anonymous")
        return store.add_feedback(slide_id, verdict, body.get("comment", ""),
                                  corrected, author)

    @app.get("/api/slides/{slide_id}/feedback")
    def list_feedback(slide_id: str, user: str = Depends(auth)):
        if store.submission(slide_id) is None:
            return error(404, "UnknownSlide", f"no submission {slide_id}")
        return store.feedback_for(slide_id)

    @app.get("/api/export.csv")
    def export_csv(user: str = Depends(auth)):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["slide_id", "predicted", "p_nneo", "p_lg", "p_hg",
                         "model_version", "verdict", "corrected_label"])
        for sub in store.submissions():
            payload = store.result(sub["slide_id"], model_version)
            if payload is None:
                continue
            fb = store.feedback_for(sub["slide_id"])
            latest = fb[-1] if fb else {}
            writer.writerow([
                sub["slide_id"], payload["predicted"],
                f"{payload['confidence'][0]:.6f}", f"{payload['confidence'][1]:.6f}",
                f"{payload['confidence'][2]:.6f}", payload["model_version"],
                latest.get("verdict", ""), latest.get("corrected_label") or "",
            ])
        return PlainTextResponse(buf.getvalue(), media_type="text/csv")

    if cfg.frontend_dir and Path(cfg.frontend_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=cfg.frontend_dir, html=True), name="ui")

    return app
