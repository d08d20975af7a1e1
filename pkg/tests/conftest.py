import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

from slidemil.scorer import ScorerConfig, ScorerModel
from slidemil.slides import open_slide


def write_slide(path, arr):
    Image.fromarray(arr).save(path)
    return open_slide(path)


@pytest.fixture
def flat_slide(tmp_path):
    """64x64 deterministic RGB gradient slide on disk."""
    rng = np.random.default_rng(11)
    arr = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    return write_slide(tmp_path / "flat.png", arr), arr


class ColorProbe(nn.Module):
    """Logits proportional to mean channel values: red->class1 ... blue->class3.

    Gives tests exact, content-determined probabilities without training.
    """

    def __init__(self, scale=20.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(float(scale)))

    def forward(self, x):
        return x.mean(dim=(2, 3)) * self.scale


def make_probe_model(input_size=64, scale=20.0) -> ScorerModel:
    return ScorerModel(ScorerConfig(arch="tinyconv", input_size=input_size),
                       ColorProbe(scale))


CLASS_RGB = {1: (255, 0, 0), 2: (0, 255, 0), 3: (0, 0, 255)}


def paint_cells(grid, cell_classes, size=64):
    """White canvas with saturated class-colored cells; grid maps (row, col)->class."""
    canvas = np.full((grid * size, grid * size, 3), 255, dtype=np.uint8)
    for (r, c), cls in cell_classes.items():
        canvas[r * size:(r + 1) * size, c * size:(c + 1) * size] = CLASS_RGB[cls]
    return canvas
