"""Tissue/background separation: Otsu's threshold on the HSV saturation channel.

The slide is viewed at a 32x downsample, converted to saturation, and split by
the threshold that maximizes between-class variance. Saturation and the
threshold search both run in exact integer arithmetic so results are
bit-identical across platforms.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateHistogram
from .slides import SlideRecord, thumbnail

DEFAULT_MASK_FACTOR = 32


@dataclass
class TissueMask:
    """Binary tissue map at a fixed downsample factor (True = tissue)."""

    factor: int
    grid: np.ndarray
    width: int
    height: int
    otsu_threshold: int
    degenerate: bool = False


def saturation_channel(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation of an 8-bit RGB block, as integers in 0..255.

    S = 0 where max(R,G,B) = 0, else round(255 * (1 - min/max)) with
    round-half-up.
    """
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected uint8 HxWx3 RGB, got {rgb.dtype} {rgb.shape}")
    mx = rgb.max(axis=2).astype(np.int64)
    mn = rgb.min(axis=2).astype(np.int64)
    sat = np.zeros_like(mx)
    nz = mx > 0
    # round-half-up of 255*(mx-mn)/mx in pure integers
    sat[nz] = (2 * 255 * (mx[nz] - mn[nz]) + mx[nz]) // (2 * mx[nz])
    return sat.astype(np.uint8)


def otsu_threshold(histogram) -> int:
    """Threshold maximizing between-class variance of the split {<=t} vs {>t}.

    Ties break toward the smallest t. Comparisons use exact integer
    cross-multiplication, so the argmax never depends on float rounding.
    """
    hist = [int(c) for c in histogram]
    if len(hist) != 256:
        raise ValueError(f"expected 256 histogram bins, got {len(hist)}")
    if any(c < 0 for c in hist):
        raise ValueError("histogram counts must be non-negative")
    nonzero = [i for i, c in enumerate(hist) if c > 0]
    if len(nonzero) < 2:
        raise DegenerateHistogram("histogram occupies fewer than two intensities")

    total_n = sum(hist)
    total_s = sum(i * c for i, c in enumerate(hist))
    best_t = None
    best_num = best_den = None  # variance as num/den, compared exactly
    n0 = s0 = 0
    for t in range(256):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_s - s0
        d = s0 * n1 - s1 * n0
        num, den = d * d, n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def segment_tissue(slide: SlideRecord, factor: int = DEFAULT_MASK_FACTOR) -> TissueMask:
    """Tissue mask of a slide: saturation strictly above the Otsu threshold.

    A degenerate slide (single saturation value, e.g. uniformly white) yields
    an all-false mask with the degenerate flag set instead of an error.
    """
    thumb = thumbnail(slide, factor)
    sat = saturation_channel(thumb)
    hist = np.bincount(sat.ravel(), minlength=256)
    try:
        t = otsu_threshold(hist)
    except DegenerateHistogram:
        return TissueMask(
            factor=factor,
            grid=np.zeros(sat.shape, dtype=bool),
            width=sat.shape[1],
            height=sat.shape[0],
            otsu_threshold=0,
            degenerate=True,
        )
    return TissueMask(
        factor=factor,
        grid=sat > t,
        width=sat.shape[1],
        height=sat.shape[0],
        otsu_threshold=t,
    )


def save_mask(mask: TissueMask, out_dir, slide_id: str) -> Path:
    """Persist as 1-bit PNG `<slide_id>.mask.png` plus a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png_path = out / f"{slide_id}.mask.png"
    Image.fromarray(mask.grid).convert("1").save(png_path)
    meta = {
        "factor": mask.factor,
        "otsu_threshold": mask.otsu_threshold,
        "width": mask.width,
        "height": mask.height,
        "degenerate": mask.degenerate,
    }
    (out / f"{slide_id}.mask.json").write_text(json.dumps(meta, sort_keys=True))
    return png_path


def load_mask(mask_dir, slide_id: str) -> TissueMask:
    base = Path(mask_dir)
    meta = json.loads((base / f"{slide_id}.mask.json").read_text())
    grid = np.asarray(Image.open(base / f"{slide_id}.mask.png").convert("1"), dtype=bool)
    return TissueMask(
        factor=meta["factor"],
        grid=grid,
        width=meta["width"],
        height=meta["height"],
        otsu_threshold=meta["otsu_threshold"],
        degenerate=meta.get("degenerate", False),
    )
