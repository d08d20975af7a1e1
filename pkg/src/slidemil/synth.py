"""Seeded synthetic slide corpus with known tile-level ground truth.

Each slide is a white canvas with a grid-aligned rectangular tissue region.
Tissue cells are one tile in size and carry a class-dependent procedural
texture, so the slide's true label is the max of its cell labels and the
tiling stage recovers exactly the tissue cells. Class recipes (base chroma,
nucleus density, blotch frequency) are separable enough for a small classifier
while staying H&E-ish: pink mucosa, progressively darker purple with grade.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import HG, LG, NNEO
from .seeding import substream_rng
from .slides import SlideRecord, save_manifest
from .tiling import save_annotations

# per-class tissue base colors (RGB), background is near-white; saturations sit
# in a tight band (~78-133) so Otsu splits tissue/background, not grade/grade
BASE_COLORS = {
    NNEO: (230, 160, 195),
    LG: (200, 125, 180),
    HG: (150, 72, 138),
}
NUCLEUS_COLORS = {
    NNEO: (205, 150, 185),
    LG: (120, 55, 130),
    HG: (55, 18, 65),
}
NUCLEI_PER_CELL = {NNEO: 6, LG: 22, HG: 55}


@dataclass
class SynthConfig:
    n_slides: int = 60
    tile_size: int = 64
    mask_factor: int = 16
    min_grid: int = 8
    max_grid: int = 10
    min_tissue: int = 4
    max_tissue: int = 8
    annotated_fraction: float = 0.25
    train_fraction: float = 0.66
    val_fraction: float = 0.17
    noise: float = 4.0
    seed: int = 0


def _cell_texture(label: int, size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    base = np.array(BASE_COLORS[label], dtype=np.float64)
    cell = np.tile(base, (size, size, 1))
    # gentle illumination gradient so tiles are not flat color
    yy, xx = np.mgrid[0:size, 0:size]
    phase = rng.uniform(0, 2 * np.pi)
    wave = 6.0 * np.sin(2 * np.pi * (xx + yy) / (2 * size) + phase)
    cell += wave[..., None]
    color = np.array(NUCLEUS_COLORS[label], dtype=np.float64)
    for _ in range(NUCLEI_PER_CELL[label]):
        cx, cy = rng.integers(2, size - 2, size=2)
        r = rng.integers(2, max(3, size // 12))
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        cell[disk] = 0.35 * cell[disk] + 0.65 * color
    cell += rng.normal(0.0, noise, size=cell.shape)
    return np.clip(cell, 0, 255).astype(np.uint8)


def _cell_labels(slide_label: int, shape, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    if slide_label == NNEO:
        return np.full(shape, NNEO, dtype=np.int64)
    if slide_label == LG:
        choices, weights = [NNEO, LG], [0.5, 0.5]
    else:
        choices, weights = [NNEO, LG, HG], [0.4, 0.3, 0.3]
    labels = rng.choice(choices, size=shape, p=weights)
    # the slide label is the max tile label, so the top grade must occur
    if not (labels == slide_label).any():
        labels[rng.integers(rows), rng.integers(cols)] = slide_label
    return labels


def render_slide(slide_label: int, cfg: SynthConfig, rng: np.random.Generator):
    """One synthetic slide: RGB canvas plus {(x, y): label} for tissue cells."""
    size = cfg.tile_size
    grid = int(rng.integers(cfg.min_grid, cfg.max_grid + 1))
    canvas = np.clip(
        rng.normal(250.0, cfg.noise / 2, size=(grid * size, grid * size, 3)),
        242, 255).astype(np.uint8)
    # tissue never fills the whole slide; background must exist for Otsu
    t_rows = int(rng.integers(cfg.min_tissue, min(cfg.max_tissue, grid - 1) + 1))
    t_cols = int(rng.integers(cfg.min_tissue, min(cfg.max_tissue, grid - 1) + 1))
    r0 = int(rng.integers(0, grid - t_rows + 1))
    c0 = int(rng.integers(0, grid - t_cols + 1))
    labels = _cell_labels(slide_label, (t_rows, t_cols), rng)
    cell_map = {}
    for i in range(t_rows):
        for j in range(t_cols):
            y, x = (r0 + i) * size, (c0 + j) * size
            cell_map[(x, y)] = int(labels[i, j])
            canvas[y:y + size, x:x + size] = _cell_texture(int(labels[i, j]), size, rng, cfg.noise)
    return canvas, cell_map


def generate_dataset(out_dir, cfg: SynthConfig = None) -> dict:
    """Write slides, manifest and tile annotations; fully determined by the seed.

    Returns summary info ({"manifest": path, "annotations": path, "slides": n,
    "labels": {id: label}, "cells": {id: cell_map}}).
    """
    cfg = cfg or SynthConfig()
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    rng = substream_rng(cfg.seed, "synth-data")

    n = cfg.n_slides
    slide_labels = [(NNEO, LG, HG)[i % 3] for i in range(n)]
    rng.shuffle(slide_labels)
    n_train = round(n * cfg.train_fraction)
    n_val = round(n * cfg.val_fraction)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    n_annotated = round(n_train * cfg.annotated_fraction)

    records, annotation_rows, cells, labels = [], [], {}, {}
    for i in range(n):
        sid = f"synth-{i:04d}"
        label = int(slide_labels[i])
        canvas, cell_map = render_slide(label, cfg, rng)
        path = out / "slides" / f"{sid}.png"
        Image.fromarray(canvas).save(path)
        annotated = splits[i] == "train" and i < n_annotated
        records.append(SlideRecord(
            id=sid, path=str(path), width_px=canvas.shape[1], height_px=canvas.shape[0],
            slide_label=label, split=splits[i], annotated=annotated,
        ))
        labels[sid] = label
        cells[sid] = cell_map
        if annotated:
            annotation_rows.extend((sid, x, y, l) for (x, y), l in sorted(cell_map.items()))

    manifest_path = out / "manifest.jsonl"
    save_manifest(records, manifest_path, relative_to=out)
    annotations_path = out / "annotations.jsonl"
    save_annotations(annotation_rows, annotations_path)
    (out / "synth_config.json").write_text(json.dumps({
        "n_slides": cfg.n_slides, "tile_size": cfg.tile_size, "mask_factor": cfg.mask_factor,
        "seed": cfg.seed, "annotated_fraction": cfg.annotated_fraction,
    }, indent=2, sort_keys=True))
    return {
        "manifest": str(manifest_path),
        "annotations": str(annotations_path),
        "slides": n,
        "labels": labels,
        "cells": cells,
    }
