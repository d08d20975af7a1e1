"""Uniform read access to flat and pyramidal slide images.

Flat slides are single PNG/TIFF files. A pyramid is a directory holding one
image per downsample level plus a ``pyramid.json`` descriptor::

    {"levels": [{"factor": 1, "width": 4096, "height": 4096, "path": "level_1.png"},
                {"factor": 4, "width": 1024, "height": 1024, "path": "level_4.png"}]}

Level factors are powers of two and the factor-1 level is mandatory. All
coordinates in the public API are expressed at level 0. Downsampling is
box-filter averaging with round-half-up integer arithmetic, so identical
requests always return identical bytes.
"""

import json
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorruptFile, OutOfBounds, UnsupportedFormat
from .labels import label_name, parse_label

FLAT_EXTENSIONS = {".png", ".tif", ".tiff"}
PYRAMID_DESCRIPTOR = "pyramid.json"


@dataclass
class SlideRecord:
    """Identity and geometry of one slide; no pixel data."""

    id: str
    path: str
    width_px: int
    height_px: int
    max_magnification: int = 40
    slide_label: Optional[int] = None
    split: str = "train"
    annotated: bool = False


@dataclass
class RegionRequest:
    """A level-0 anchored rectangle read at a power-of-two downsample."""

    origin_x: int
    origin_y: int
    width: int
    height: int
    level_factor: int = 1


@dataclass
class _PyramidLevel:
    factor: int
    width: int
    height: int
    path: str


def _is_pyramid_dir(path: Path) -> bool:
    return path.is_dir() and (path / PYRAMID_DESCRIPTOR).is_file()


def _read_pyramid_levels(path: Path) -> list["_PyramidLevel"]:
    try:
        descriptor = json.loads((path / PYRAMID_DESCRIPTOR).read_text())
        levels = [
            _PyramidLevel(int(l["factor"]), int(l["width"]), int(l["height"]), l["path"])
            for l in descriptor["levels"]
        ]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"bad pyramid descriptor in {path}: {exc}") from exc
    levels.sort(key=lambda l: l.factor)
    if not levels or levels[0].factor != 1:
        raise CorruptFile(f"pyramid {path} is missing the factor-1 level")
    for l in levels:
        if l.factor & (l.factor - 1):
            raise CorruptFile(f"pyramid level factor {l.factor} is not a power of two")
    return levels


def open_slide(path) -> SlideRecord:
    """Open a flat image or pyramid directory and return its metadata.

    Only headers are inspected; pixel data stays on disk until a region
    is actually read.
    """
    p = Path(path)
    if not p.exists():
        raise UnsupportedFormat(f"no such file: {p}")
    if _is_pyramid_dir(p):
        levels = _read_pyramid_levels(p)
        base = levels[0]
        for l in levels:
            img_path = p / l.path
            if not img_path.is_file():
                raise CorruptFile(f"pyramid level file missing: {img_path}")
        return SlideRecord(id=p.name, path=str(p), width_px=base.width, height_px=base.height)
    if p.is_dir():
        raise UnsupportedFormat(f"directory without {PYRAMID_DESCRIPTOR}: {p}")
    if p.suffix.lower() not in FLAT_EXTENSIONS:
        raise UnsupportedFormat(f"unsupported slide format: {p.suffix!r}")
    try:
        with Image.open(p) as img:
            width, height = img.size
            img.verify()
    except UnidentifiedImageError as exc:
        raise CorruptFile(f"cannot decode {p}: {exc}") from exc
    except OSError as exc:
        raise CorruptFile(f"truncated or unreadable file {p}: {exc}") from exc
    return SlideRecord(id=p.stem, path=str(p), width_px=width, height_px=height)


@lru_cache(maxsize=16)
def _load_rgb(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise CorruptFile(f"cannot decode {path}: {exc}") from exc
    arr.setflags(write=False)
    return arr


def _box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Average factor x factor blocks; partial edge blocks average what exists.

    Output dims are ceil(input/factor). Round-half-up integers keep the result
    platform independent.
    """
    if factor == 1:
        return img
    h, w = img.shape[:2]
    row_idx = np.arange(0, h, factor)
    col_idx = np.arange(0, w, factor)
    sums = np.add.reduceat(np.add.reduceat(img.astype(np.int64), row_idx, axis=0), col_idx, axis=1)
    row_counts = np.minimum(row_idx + factor, h) - row_idx
    col_counts = np.minimum(col_idx + factor, w) - col_idx
    counts = np.outer(row_counts, col_counts).astype(np.int64)[..., None]
    return ((2 * sums + counts) // (2 * counts)).astype(np.uint8)


def _best_stored_level(levels: list[_PyramidLevel], req: RegionRequest) -> _PyramidLevel:
    # Largest stored factor that divides the request factor and keeps the
    # origin grid-aligned, so the crop needs no resampling of its own.
    best = levels[0]
    for l in levels:
        if l.factor <= req.level_factor and req.level_factor % l.factor == 0 \
                and req.origin_x % l.factor == 0 and req.origin_y % l.factor == 0:
            if l.factor > best.factor:
                best = l
    return best


def read_region(slide: SlideRecord, req: RegionRequest) -> np.ndarray:
    """Extract an RGB block of exactly req.width x req.height pixels.

    The block covers the level-0 rectangle (origin_x, origin_y,
    width*factor, height*factor), box-averaged down to the request factor.
    """
    f = req.level_factor
    if f < 1 or f & (f - 1):
        raise OutOfBounds(f"level_factor must be a power of two >= 1, got {f}")
    if req.width < 1 or req.height < 1:
        raise OutOfBounds(f"empty region request: {req.width}x{req.height}")
    x0, y0 = req.origin_x, req.origin_y
    x1, y1 = x0 + req.width * f, y0 + req.height * f
    if x0 < 0 or y0 < 0 or x1 > slide.width_px or y1 > slide.height_px:
        raise OutOfBounds(
            f"region ({x0},{y0})..({x1},{y1}) outside slide "
            f"{slide.width_px}x{slide.height_px}"
        )
    p = Path(slide.path)
    if _is_pyramid_dir(p):
        level = _best_stored_level(_read_pyramid_levels(p), req)
        arr = _load_rgb(str(p / level.path))
        g = level.factor
        crop = arr[y0 // g:y1 // g, x0 // g:x1 // g]
        return _box_downsample(crop, f // g)
    arr = _load_rgb(slide.path)
    return _box_downsample(arr[y0:y1, x0:x1], f)


def thumbnail(slide: SlideRecord, factor: int) -> np.ndarray:
    """Whole-slide view at the given downsample factor.

    Dims are ceil(width/factor) x ceil(height/factor); edge blocks that
    overhang the slide average only their covered pixels.
    """
    if factor < 1:
        raise OutOfBounds(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return read_region(slide, RegionRequest(0, 0, slide.width_px, slide.height_px, 1))
    p = Path(slide.path)
    if _is_pyramid_dir(p):
        levels = _read_pyramid_levels(p)
        best = levels[0]
        for l in levels:
            if l.factor <= factor and factor % l.factor == 0 and l.factor > best.factor:
                best = l
        arr = _load_rgb(str(p / best.path))
        return _box_downsample(arr, factor // best.factor)
    return _box_downsample(_load_rgb(slide.path), factor)


def load_manifest(path) -> list[SlideRecord]:
    """Read a line-delimited slide manifest; slide paths resolve relative to it."""
    manifest_path = Path(path)
    base = manifest_path.parent
    records = []
    seen = set()
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            slide_path = Path(row["path"])
            if not slide_path.is_absolute():
                slide_path = base / slide_path
            rec = SlideRecord(
                id=row["id"],
                path=str(slide_path),
                width_px=int(row.get("width_px", 0)),
                height_px=int(row.get("height_px", 0)),
                max_magnification=int(row.get("max_magnification", 40)),
                slide_label=parse_label(row.get("label")),
                split=row.get("split", "train"),
                annotated=bool(row.get("annotated", False)),
            )
            if rec.id in seen:
                raise ValueError(f"duplicate slide id {rec.id!r} at {manifest_path}:{lineno}")
            seen.add(rec.id)
            if rec.width_px < 1 or rec.height_px < 1:
                opened = open_slide(rec.path)
                rec.width_px, rec.height_px = opened.width_px, opened.height_px
            records.append(rec)
    return records


def save_manifest(records: list[SlideRecord], path, relative_to=None) -> None:
    rows = []
    for rec in records:
        slide_path = rec.path
        if relative_to is not None:
            slide_path = os.path.relpath(slide_path, relative_to)
        rows.append(json.dumps({
            "id": rec.id,
            "path": slide_path,
            "width_px": rec.width_px,
            "height_px": rec.height_px,
            "max_magnification": rec.max_magnification,
            "label": label_name(rec.slide_label) if rec.slide_label else "",
            "split": rec.split,
            "annotated": rec.annotated,
        }, sort_keys=True))
    Path(path).write_text("\n".join(rows) + "\n")


def write_pyramid(base_image: np.ndarray, out_dir, factors=(1, 2, 4)) -> Path:
    """Materialize a pyramid directory from a base RGB array (test/debug helper)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    levels = []
    for f in sorted(set(int(x) for x in factors)):
        if f < 1 or f & (f - 1):
            raise ValueError(f"pyramid factor must be a power of two, got {f}")
        lvl = _box_downsample(base_image, f)
        name = f"level_{f}.png"
        Image.fromarray(lvl).save(out / name)
        levels.append({"factor": f, "width": lvl.shape[1], "height": lvl.shape[0], "path": name})
    (out / PYRAMID_DESCRIPTOR).write_text(json.dumps({"levels": levels}, indent=2))
    return out
