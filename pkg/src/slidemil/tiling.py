"""Non-overlapping tile grid over tissue, and native-resolution tile extraction.

The grid is anchored at the slide origin with stride equal to the tile size.
A grid cell becomes a tile only when the fraction of its mask cells that are
tissue reaches the threshold (1.0 by default: tiles never contain background).
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MaskMismatch, OutOfBounds
from .slides import RegionRequest, SlideRecord, read_region
from .tissue import TissueMask

DEFAULT_TILE_SIZE = 512


@dataclass(frozen=True)
class TileRef:
    """One grid tile: slide id, row-major index, level-0 origin and size."""

    slide_id: str
    index: int
    origin_x: int
    origin_y: int
    size: int = DEFAULT_TILE_SIZE


@dataclass
class TileSet:
    slide_id: str
    refs: list

    @property
    def n_s(self) -> int:
        return len(self.refs)


def tile_grid(slide: SlideRecord, mask: TissueMask, size: int = DEFAULT_TILE_SIZE,
              threshold: float = 1.0) -> TileSet:
    """All grid-aligned tiles whose footprint passes the tissue threshold.

    Tiles are indexed row-major from 0 in the order they are kept.
    """
    if size % mask.factor != 0:
        raise MaskMismatch(f"mask factor {mask.factor} does not divide tile size {size}")
    expect_w = -(-slide.width_px // mask.factor)
    expect_h = -(-slide.height_px // mask.factor)
    if (mask.height, mask.width) != mask.grid.shape or (expect_h, expect_w) != mask.grid.shape:
        raise MaskMismatch(
            f"mask {mask.grid.shape} inconsistent with slide "
            f"{slide.width_px}x{slide.height_px} at factor {mask.factor}"
        )
    cells = size // mask.factor
    cols = slide.width_px // size
    rows = slide.height_px // size
    refs = []
    for r in range(rows):
        for c in range(cols):
            window = mask.grid[r * cells:(r + 1) * cells, c * cells:(c + 1) * cells]
            if window.sum() / window.size >= threshold:
                refs.append(TileRef(
                    slide_id=slide.id,
                    index=len(refs),
                    origin_x=c * size,
                    origin_y=r * size,
                    size=size,
                ))
    return TileSet(slide_id=slide.id, refs=refs)


def extract_tile(slide: SlideRecord, ref: TileRef) -> np.ndarray:
    """Exact pixels of one tile at native magnification (no downsampling)."""
    if ref.origin_x + ref.size > slide.width_px or ref.origin_y + ref.size > slide.height_px \
            or ref.origin_x < 0 or ref.origin_y < 0:
        raise OutOfBounds(
            f"tile at ({ref.origin_x},{ref.origin_y}) size {ref.size} outside slide "
            f"{slide.width_px}x{slide.height_px}"
        )
    return read_region(slide, RegionRequest(ref.origin_x, ref.origin_y, ref.size, ref.size, 1))


def save_tile_manifest(tiles: TileSet, path) -> None:
    rows = [
        json.dumps({"slide_id": t.slide_id, "n": t.index, "x": t.origin_x,
                    "y": t.origin_y, "size": t.size})
        for t in tiles.refs
    ]
    Path(path).write_text("\n".join(rows) + ("\n" if rows else ""))


def load_tile_manifest(path) -> TileSet:
    refs = []
    slide_id = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            slide_id = row["slide_id"]
            refs.append(TileRef(row["slide_id"], row["n"], row["x"], row["y"], row["size"]))
    refs.sort(key=lambda t: t.index)
    return TileSet(slide_id=slide_id or "", refs=refs)


def dump_tiles(slide: SlideRecord, tiles: TileSet, out_dir) -> None:
    """Write each tile as `<slide_id>/<n>.png` (debugging aid)."""
    out = Path(out_dir) / tiles.slide_id
    out.mkdir(parents=True, exist_ok=True)
    for ref in tiles.refs:
        Image.fromarray(extract_tile(slide, ref)).save(out / f"{ref.index}.png")


def save_annotations(rows, path) -> None:
    """Tile-level labels for annotated slides: (slide_id, x, y, label) records."""
    from .labels import label_name

    lines = [
        json.dumps({"slide_id": sid, "x": x, "y": y, "label": label_name(label)})
        for sid, x, y, label in rows
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_annotations(path) -> dict:
    """Read tile labels back as {slide_id: {(x, y): label}}."""
    from .labels import parse_label

    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            out.setdefault(row["slide_id"], {})[(row["x"], row["y"])] = parse_label(row["label"])
    return out
