"""Severity-ranked multiple-instance learning over slide tile sets.

A slide's diagnosis is the most severe tile under the ordinal class order. Each
tile's ranking key is its expected severity, sum(i * p_i) over the K class
probabilities. Training alternates a severity-analysis pass with a gradient
pass: the first weak epoch ranks every tile (the same pass also fixes the
Top-M sampled set per slide); later epochs rank only within the sampled sets,
and the top 5 tiles per slide are trained against the slide label. At
inference there is no sampling and only the most severe tile decides.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import EmptyInput, EmptySlide, InvalidSimplex
from .labels import N_CLASSES, label_name
from .scorer import ScorerModel, TrainConfig, score_batch, train_step, train_supervised
from .seeding import substream_rng
from .tiling import TileRef

DEFAULT_M = 200
DEFAULT_TOP_N = 5


@dataclass(frozen=True)
class RankEntry:
    ref: TileRef
    expected_severity: float
    probs: tuple


@dataclass
class SeverityRanking:
    """Tiles of one slide ordered by expected severity (desc, ties by index)."""

    slide_id: str
    entries: list
    model_version: str


@dataclass
class SampledSet:
    slide_id: str
    refs: list
    M: int
    source_model_version: str


@dataclass
class DiagnosisResult:
    slide_id: str
    predicted: int
    confidence: tuple
    top_tiles: list
    model_version: str
    timestamp: Optional[str] = None
    ranking: Optional[SeverityRanking] = None

    def to_dict(self, include_ranking: bool = False) -> dict:
        d = {
            "slide_id": self.slide_id,
            "predicted": label_name(self.predicted),
            "confidence": list(self.confidence),
            "top_tiles": [
                {"n": t.index, "x": t.origin_x, "y": t.origin_y, "size": t.size}
                for t in self.top_tiles
            ],
            "model_version": self.model_version,
            "timestamp": self.timestamp,
        }
        if include_ranking and self.ranking is not None:
            d["tiles"] = [
                {"n": e.ref.index, "x": e.ref.origin_x, "y": e.ref.origin_y,
                 "size": e.ref.size, "severity": e.expected_severity,
                 "probs": list(e.probs)}
                for e in self.ranking.entries
            ]
        return d


def validate_probs(p, n_classes: int = N_CLASSES) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (n_classes,):
        raise InvalidSimplex(f"expected {n_classes} probabilities, got shape {arr.shape}")
    if np.any(arr < -1e-9) or np.any(arr > 1 + 1e-9):
        raise InvalidSimplex(f"probabilities outside [0,1]: {arr}")
    if abs(float(arr.sum()) - 1.0) > 1e-6:
        raise InvalidSimplex(f"probabilities sum to {arr.sum()}, not 1")
    return arr


def expected_severity(p, n_classes: int = N_CLASSES) -> float:
    """sum(i * p_i) for i = 1..K; lies in [1, K] for any valid simplex."""
    arr = validate_probs(p, n_classes)
    return float(np.dot(np.arange(1, n_classes + 1), arr))


def build_ranking(slide_id: str, entries, model_version: str) -> SeverityRanking:
    """Order RankEntry items by severity desc, ties by ascending tile index."""
    ordered = sorted(entries, key=lambda e: (-e.expected_severity, e.ref.index))
    return SeverityRanking(slide_id=slide_id, entries=ordered, model_version=model_version)


def rank_tiles(model: ScorerModel, refs, loader: Callable, batch_infer: int = 256) -> SeverityRanking:
    """Score every tile once and order by severity desc, ties by tile index."""
    refs = list(refs)
    if not refs:
        raise EmptySlide("cannot rank an empty tile set")
    entries = []
    for start in range(0, len(refs), batch_infer):
        chunk = refs[start:start + batch_infer]
        probs = score_batch(model, [loader(r) for r in chunk])
        for ref, p in zip(chunk, probs):
            entries.append(RankEntry(ref, expected_severity(p, model.config.n_classes),
                                     tuple(float(x) for x in p)))
    return build_ranking(refs[0].slide_id, entries, model.version)


def sample_topk(ranking: SeverityRanking, M: int = DEFAULT_M) -> SampledSet:
    """Retain the min(M, n_s) most severe tiles; smaller slides stay unsampled."""
    if M != math.inf and M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    k = len(ranking.entries) if M == math.inf else min(int(M), len(ranking.entries))
    return SampledSet(
        slide_id=ranking.slide_id,
        refs=[e.ref for e in ranking.entries[:k]],
        M=-1 if M == math.inf else int(M),
        source_model_version=ranking.model_version,
    )


def reduction_report(tile_counts, M) -> dict:
    """Epoch-cost arithmetic of Top-M sampling over per-slide tile counts."""
    counts = [int(c) for c in tile_counts]
    total_before = sum(counts)
    if M is None or M == math.inf:
        total_after = total_before
    else:
        total_after = sum(min(int(M), c) for c in counts)
    ratio = total_before / total_after if total_after else math.nan
    return {"total_before": total_before, "total_after": total_after, "ratio": ratio}


def aggregate_labels(tile_labels) -> int:
    """Slide label = the most severe tile label under the ordinal order."""
    labels = list(tile_labels)
    if not labels:
        raise EmptyInput("no tile labels to aggregate")
    return max(labels)


def infer_slide(model: ScorerModel, refs, loader: Callable, top_n: int = DEFAULT_TOP_N,
                batch_infer: int = 256) -> DiagnosisResult:
    """Diagnose from the single most severe tile; no sampling at inference."""
    ranking = rank_tiles(model, refs, loader, batch_infer)
    top = ranking.entries[0]
    return DiagnosisResult(
        slide_id=ranking.slide_id,
        predicted=int(np.argmax(top.probs)) + 1,
        confidence=top.probs,
        top_tiles=[e.ref for e in ranking.entries[:top_n]],
        model_version=ranking.model_version,
        ranking=ranking,
    )


def _diagnose_from_ranking(ranking: SeverityRanking) -> int:
    return int(np.argmax(ranking.entries[0].probs)) + 1


def weak_epoch(model: ScorerModel, tile_sets: dict, slide_labels: dict, cfg: TrainConfig,
               loader: Callable, top_n: int = DEFAULT_TOP_N, rng=None, rankings=None):
    """One weakly-supervised epoch over slide-labeled data.

    Per slide: rank its tiles under the current model (unless `rankings` holds
    a precomputed pass), keep the min(top_n, n) most severe, attach the slide
    label to each, then train over a seeded shuffle of all selected tiles.
    Returns (epoch_log, rankings_used).
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    slide_ids = sorted(tile_sets)
    for sid in slide_ids:
        if sid not in slide_labels or slide_labels[sid] is None:
            raise ValueError(f"slide {sid} has no label for weak supervision")
    tiles_scored = 0
    if rankings is None:
        rankings = {}
        for sid in slide_ids:
            rankings[sid] = rank_tiles(model, tile_sets[sid], loader, cfg.batch_infer)
            tiles_scored += len(tile_sets[sid])
    selected = []
    tiles_used = {}
    for sid in slide_ids:
        top = rankings[sid].entries[:min(top_n, len(rankings[sid].entries))]
        tiles_used[sid] = [e.ref.index for e in top]
        selected.extend((e.ref, slide_labels[sid]) for e in top)
    order = rng.permutation(len(selected))
    losses = []
    for start in range(0, len(order), cfg.batch_train):
        batch = [(loader(selected[i][0]), selected[i][1])
                 for i in order[start:start + cfg.batch_train]]
        losses.append(train_step(model, batch, cfg))
    log = {
        "tiles_scored": tiles_scored,
        "tiles_trained": len(selected),
        "mean_loss": float(np.mean(losses)) if losses else None,
        "tiles_used": tiles_used,
    }
    return log, rankings


def _validate_slides(rankings: dict, val_labels: dict, n_classes: int):
    from .metrics import accuracy, qwk

    slide_ids = sorted(val_labels)
    preds = [_diagnose_from_ranking(rankings[sid]) for sid in slide_ids]
    labels = [val_labels[sid] for sid in slide_ids]
    return accuracy(preds, labels), qwk(preds, labels, n_classes)


def _dump_rankings(rankings: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for sid in sorted(rankings):
            r = rankings[sid]
            for e in r.entries:
                fh.write(json.dumps({
                    "slide_id": sid, "n": e.ref.index, "x": e.ref.origin_x,
                    "y": e.ref.origin_y, "size": e.ref.size,
                    "expected_severity": e.expected_severity,
                    "probs": list(e.probs), "model_version": r.model_version,
                }) + "\n")


@dataclass
class MILDataset:
    """Everything the mixed-supervision loop needs, resolved to tile level."""

    train_labels: dict            # slide_id -> class label
    val_labels: dict              # slide_id -> class label
    tile_sets: dict               # slide_id -> list[TileRef], full sets
    annotated_tiles: list         # (TileRef, class label) pairs, train slides only
    loader: Callable              # TileRef -> uint8 RGB array


def run_mixed_supervision(dataset: MILDataset, cfg: TrainConfig, model: ScorerModel,
                          M: int = DEFAULT_M, top_n: int = DEFAULT_TOP_N,
                          sample_validation: bool = True, artifact_dir=None):
    """Full mixed-supervision training: supervised warm-up, then the weak loop.

    Phase A trains on annotated tiles (skipped with a warning flag when there
    are none). Phase B epoch 1 ranks every tile of the train and validation
    slides in one pass that simultaneously fixes the Top-M sampled sets, the
    top-5 training tiles, and the validation metrics of the pre-update model;
    epochs 2+ rank only within the sampled sets. The checkpoint with the best
    validation QWK (accuracy as tie-break) is returned.

    Returns (model with best weights, log dict).
    """
    log = {"phase_a": [], "weak": [], "warnings": []}
    n_classes = model.config.n_classes

    if dataset.annotated_tiles:
        rng = substream_rng(cfg.seed, "phase-a-val-split")
        pairs = [(dataset.loader(ref), label) for ref, label in dataset.annotated_tiles]
        order = rng.permutation(len(pairs))
        n_val = max(1, len(pairs) // 10) if len(pairs) > 1 else 0
        val_pairs = [pairs[i] for i in order[:n_val]]
        train_pairs = [pairs[i] for i in order[n_val:]]
        model, phase_a_log = train_supervised(model, train_pairs, cfg, val=val_pairs)
        log["phase_a"] = phase_a_log
    else:
        log["warnings"].append("no annotated tiles; skipping supervised pre-training")

    if cfg.epochs_weak == 0:
        log["best"] = {"epoch": 0, "model_version": model.version}
        return model, log

    import copy as _copy

    all_labels = {**dataset.train_labels, **dataset.val_labels}
    sampled = {}
    best = None  # ((qwk, acc), epoch, state_dict, version)
    for epoch in range(1, cfg.epochs_weak + 1):
        version_before = model.version
        if epoch == 1:
            rankings = {}
            tiles_scored = 0
            for sid in sorted(dataset.tile_sets):
                rankings[sid] = rank_tiles(model, dataset.tile_sets[sid], dataset.loader,
                                           cfg.batch_infer)
                tiles_scored += len(dataset.tile_sets[sid])
            for sid, ranking in rankings.items():
                sampled[sid] = sample_topk(ranking, M)
        else:
            rankings = {}
            tiles_scored = 0
            for sid in sorted(dataset.tile_sets):
                refs = sampled[sid].refs if (sid in dataset.train_labels or sample_validation) \
                    else dataset.tile_sets[sid]
                rankings[sid] = rank_tiles(model, refs, dataset.loader, cfg.batch_infer)
                tiles_scored += len(refs)

        val_acc, val_qwk = _validate_slides(rankings, dataset.val_labels, n_classes) \
            if dataset.val_labels else (None, None)
        if val_acc is not None:
            key = (val_qwk, val_acc)
            if best is None or key > best[0]:
                best = (key, epoch, _copy.deepcopy(model.module.state_dict()), version_before)

        if artifact_dir is not None:
            _dump_rankings(rankings, Path(artifact_dir) / "rankings" / f"epoch_{epoch}.jsonl")

        train_rankings = {sid: rankings[sid] for sid in dataset.train_labels}
        epoch_rng = substream_rng(cfg.seed, f"weak-shuffle-{epoch}")
        epoch_log, _ = weak_epoch(
            model, {sid: dataset.tile_sets[sid] for sid in dataset.train_labels},
            dataset.train_labels, cfg, dataset.loader, top_n=top_n, rng=epoch_rng,
            rankings=train_rankings)
        epoch_log.update({
            "epoch": epoch,
            "tiles_scored": tiles_scored,
            "val_accuracy": val_acc,
            "val_qwk": val_qwk,
            "model_version_before": version_before,
            "model_version_after": model.version,
        })
        log["weak"].append(epoch_log)

    # the last gradient pass produced a model no epoch has validated yet
    final_rankings = {}
    final_scored = 0
    for sid in sorted(dataset.val_labels):
        refs = sampled[sid].refs if sample_validation else dataset.tile_sets[sid]
        final_rankings[sid] = rank_tiles(model, refs, dataset.loader, cfg.batch_infer)
        final_scored += len(refs)
    if dataset.val_labels:
        val_acc, val_qwk = _validate_slides(final_rankings, dataset.val_labels, n_classes)
        log["final_val"] = {"tiles_scored": final_scored, "val_accuracy": val_acc,
                            "val_qwk": val_qwk, "model_version": model.version}
        key = (val_qwk, val_acc)
        if best is None or key > best[0]:
            best = (key, cfg.epochs_weak + 1, _copy.deepcopy(model.module.state_dict()),
                    model.version)

    if best is not None:
        model.module.load_state_dict(best[2])
        model._invalidate()
        log["best"] = {"epoch": best[1], "val_qwk": best[0][0], "val_accuracy": best[0][1],
                       "model_version": model.version}
    else:
        log["best"] = {"epoch": cfg.epochs_weak, "model_version": model.version}
    return model, log
