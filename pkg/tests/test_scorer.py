import copy

import numpy as np
import pytest
import torch

from slidemil.errors import (CorruptCheckpoint, EmptyDataset, NonFiniteLoss,
                             ShapeMismatch)
from slidemil.scorer import (ScorerConfig, TrainConfig, batch_loss, load_model,
                             new_model, save_model, score, score_batch, train_step,
                             train_supervised)

SMALL = ScorerConfig(arch="tinyconv", input_size=32, channels=(8, 16, 16))


def class_tile(cls, rng, size=32, noise=12):
    base = {1: (220, 40, 40), 2: (40, 220, 40), 3: (40, 40, 220)}[cls]
    tile = np.full((size, size, 3), base, dtype=np.float64)
    tile += rng.normal(0, noise, size=tile.shape)
    return np.clip(tile, 0, 255).astype(np.uint8)


def labeled_tiles(n_per_class, rng, size=32):
    data = []
    for cls in (1, 2, 3):
        data.extend((class_tile(cls, rng, size), cls) for _ in range(n_per_class))
    return data


def test_score_is_simplex_for_random_tiles():
    model = new_model(SMALL, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        tile = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        p = score(model, tile)
        assert p.shape == (3,)
        assert np.all(p >= 0) and np.all(p <= 1)
        assert abs(p.sum() - 1.0) <= 1e-6


def test_score_deterministic():
    model = new_model(SMALL, seed=2)
    tile = np.random.default_rng(1).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    assert np.array_equal(score(model, tile), score(model, tile))


def test_score_shape_mismatch():
    model = new_model(SMALL, seed=3)
    with pytest.raises(ShapeMismatch):
        score(model, np.zeros((16, 16, 3), dtype=np.uint8))


def test_version_changes_iff_parameters_change():
    model = new_model(SMALL, seed=4)
    v0 = model.version
    assert model.version == v0  # stable across reads
    cfg = TrainConfig(lr=1e-3, epochs_full=1, seed=4, batch_train=8)
    rng = np.random.default_rng(2)
    train_step(model, labeled_tiles(2, rng)[:6], cfg)
    assert model.version != v0


def test_train_supervised_learns_separable_classes():
    rng = np.random.default_rng(3)
    data = labeled_tiles(30, rng)
    cfg = TrainConfig(lr=3e-3, weight_decay=1e-4, batch_train=16, epochs_full=20, seed=7)
    model = new_model(SMALL, seed=7)
    model, log = train_supervised(model, data, cfg)
    final_acc = [e for e in log if e["split"] == "train"][-1]["accuracy"]
    assert final_acc >= 0.99
    # held-out tile of the top class lands on the top class
    hg_tile = class_tile(3, rng)
    assert int(np.argmax(score(model, hg_tile))) + 1 == 3


def test_train_supervised_zero_epochs_is_identity():
    model = new_model(SMALL, seed=8)
    v0 = model.version
    data = labeled_tiles(2, np.random.default_rng(4))
    cfg = TrainConfig(epochs_full=0, seed=8)
    model2, log = train_supervised(model, data, cfg)
    assert log == []
    assert model2.version == v0


def test_train_supervised_empty_dataset():
    model = new_model(SMALL, seed=9)
    with pytest.raises(EmptyDataset):
        train_supervised(model, [], TrainConfig())


def test_train_step_on_confident_correct_batch_barely_moves():
    model = new_model(SMALL, seed=10)
    with torch.no_grad():
        model.module.head.bias[:] = torch.tensor([30.0, 0.0, 0.0])
        model.module.head.weight[:] *= 0.0
    rng = np.random.default_rng(5)
    batch = [(class_tile(1, rng), 1) for _ in range(8)]
    before = copy.deepcopy(model.module.state_dict())
    cfg = TrainConfig(seed=10)  # default lr 6e-6
    loss = train_step(model, batch, cfg)
    assert loss < 1e-3
    max_delta = max(
        float((model.module.state_dict()[k] - before[k]).abs().max()) for k in before)
    assert max_delta <= 2 * cfg.lr


def test_repeated_steps_on_fixed_batch_do_not_increase_loss():
    model = new_model(SMALL, seed=11)
    rng = np.random.default_rng(6)
    batch = labeled_tiles(3, rng)  # 9 tiles, fixed
    cfg = TrainConfig(lr=1e-4, batch_train=16, seed=11)
    losses = [train_step(model, batch, cfg) for _ in range(10)]
    for earlier, later in zip(losses, losses[1:]):
        assert later <= earlier + 1e-6


def test_nan_input_raises_non_finite_loss():
    model = new_model(SMALL, seed=12)
    bad = np.full((32, 32, 3), np.nan, dtype=np.float32)
    with pytest.raises(NonFiniteLoss):
        train_step(model, [(bad, 1)], TrainConfig(seed=12))


def test_checkpoint_round_trip(tmp_path):
    model = new_model(SMALL, seed=13)
    tile = np.random.default_rng(7).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    before = score(model, tile)
    path = tmp_path / "model.pt"
    save_model(model, path)
    loaded = load_model(path)
    assert np.array_equal(score(loaded, tile), before)
    assert loaded.version == model.version


def test_corrupt_checkpoint(tmp_path):
    model = new_model(SMALL, seed=14)
    path = tmp_path / "model.pt"
    save_model(model, path)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CorruptCheckpoint):
        load_model(path)


def test_gradient_check_against_finite_differences():
    torch.manual_seed(0)
    cfg = ScorerConfig(arch="tinyconv", input_size=16, channels=(4, 8, 8))
    model = new_model(cfg, seed=15)
    model.module.double()
    rng = np.random.default_rng(8)
    batch = [(rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8), cls)
             for cls in (1, 2, 3, 2)]

    loss = batch_loss(model, batch)
    model.module.zero_grad()
    loss.backward()
    params = [p for p in model.module.parameters() if p.requires_grad]

    h = 1e-6
    checked = 0
    fails = []
    coord_rng = np.random.default_rng(9)
    while checked < 120:
        p = params[int(coord_rng.integers(len(params)))]
        flat_idx = int(coord_rng.integers(p.numel()))
        analytic = float(p.grad.view(-1)[flat_idx])
        with torch.no_grad():
            original = float(p.view(-1)[flat_idx])
            p.view(-1)[flat_idx] = original + h
            up = float(batch_loss(model, batch))
            p.view(-1)[flat_idx] = original - h
            down = float(batch_loss(model, batch))
            p.view(-1)[flat_idx] = original
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        if abs(analytic - numeric) / scale > 1e-4:
            fails.append((flat_idx, analytic, numeric))
        checked += 1
    assert not fails, f"{len(fails)}/{checked} coordinates disagree: {fails[:5]}"


def test_two_seeded_runs_produce_identical_logs():
    rng = np.random.default_rng(10)
    data = labeled_tiles(6, rng)
    logs = []
    for _ in range(2):
        cfg = TrainConfig(lr=1e-3, batch_train=8, epochs_full=3, seed=21, deterministic=True)
        model = new_model(SMALL, seed=21)
        _, log = train_supervised(model, data, cfg)
        logs.append(log)
    assert logs[0] == logs[1]


def test_score_batch_empty():
    model = new_model(SMALL, seed=22)
    assert score_batch(model, []).shape == (0, 3)
