"""Tile classifier: a pluggable model mapping an RGB tile to K class probabilities.

The reference architecture is a small convolutional net sized for desk-scale
tiles; "resnet34" is available as a config preset for full-scale runs. Training
uses Adam with weight decay and cross-entropy on softmax outputs. Checkpoints
are self-describing: config dict, parameter tensors, and a content hash that
changes iff the parameters change.
"""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
import numpy as np
import torch
import torch.nn as nn

from .errors import CorruptCheckpoint, EmptyDataset, NonFiniteLoss, ShapeMismatch
from .labels import N_CLASSES
from .seeding import substream_rng, substream_seed

CHECKPOINT_FORMAT = "slidemil-scorer-v1"


@dataclass
class TrainConfig:
    lr: float = 6e-6
    weight_decay: float = 3e-4
    batch_train: int = 32
    batch_infer: int = 256
    epochs_full: int = 50
    epochs_weak: int = 50
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.batch_train < 1 or self.batch_infer < 1:
            raise ValueError("batch sizes must be positive")
        if self.epochs_full < 0 or self.epochs_weak < 0:
            raise ValueError("epoch counts must be non-negative")


@dataclass
class ScorerConfig:
    arch: str = "tinyconv"
    input_size: int = 64
    n_classes: int = N_CLASSES
    channels: tuple = (16, 32, 64)


class _TinyConv(nn.Module):
    def __init__(self, cfg: ScorerConfig):
        super().__init__()
        c1, c2, c3 = cfg.channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c2, c3, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(c3, cfg.n_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


def _build_module(cfg: ScorerConfig) -> nn.Module:
    if cfg.arch == "tinyconv":
        return _TinyConv(cfg)
    if cfg.arch == "resnet34":
        import torchvision.models as tvm
        return tvm.resnet34(weights=None, num_classes=cfg.n_classes)
    raise ValueError(f"unknown scorer architecture {cfg.arch!r}")


class ScorerModel:
    """Model wrapper: config + parameters + a content-addressed version hash."""

    def __init__(self, config: ScorerConfig, module: nn.Module):
        self.config = config
        self.module = module
        self._optimizer = None
        self._optimizer_key = None
        self._version = None

    @property
    def version(self) -> str:
        if self._version is None:
            h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
            state = self.module.state_dict()
            for name in sorted(state):
                h.update(name.encode())
                h.update(state[name].detach().cpu().numpy().tobytes())
            self._version = h.hexdigest()[:16]
        return self._version

    def _invalidate(self):
        self._version = None

    def optimizer(self, cfg: TrainConfig) -> torch.optim.Optimizer:
        """Adam with weight decay, persisted across steps so moments accumulate."""
        key = (cfg.lr, cfg.weight_decay)
        if self._optimizer is None or self._optimizer_key != key:
            self._optimizer = torch.optim.Adam(
                self.module.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
            self._optimizer_key = key
        return self._optimizer

    def snapshot(self) -> "ScorerModel":
        """Frozen copy safe to score from while training continues on self."""
        clone = ScorerModel(copy.deepcopy(self.config), copy.deepcopy(self.module))
        clone._version = self._version
        return clone


def enable_determinism(seed: int) -> None:
    """Reproducible mode: seeded, deterministic kernels, single-threaded ops.

    Trades speed for bit-identical runs; skipped when TrainConfig.deterministic
    is off.
    """
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def new_model(config: ScorerConfig = None, seed: int = 0) -> ScorerModel:
    config = config or ScorerConfig()
    torch.manual_seed(substream_seed(seed, "init"))
    module = _build_module(config)
    module.eval()
    return ScorerModel(config, module)


def _to_batch_tensor(tiles, input_size: int, dtype=torch.float32) -> torch.Tensor:
    arrs = []
    for tile in tiles:
        arr = np.asarray(tile)
        if arr.shape != (input_size, input_size, 3):
            raise ShapeMismatch(
                f"tile shape {arr.shape} != ({input_size}, {input_size}, 3)")
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        arrs.append(arr.astype(np.float32, copy=False))
    batch = torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2)
    return batch.to(dtype)


def score_batch(model: ScorerModel, tiles) -> np.ndarray:
    """Probability vectors for a list of tiles, shape (N, K)."""
    if len(tiles) == 0:
        return np.zeros((0, model.config.n_classes))
    dtype = next(model.module.parameters()).dtype
    batch = _to_batch_tensor(tiles, model.config.input_size, dtype)
    model.module.eval()
    with torch.no_grad():
        logits = model.module(batch)
        probs = torch.softmax(logits, dim=1)
    return probs.cpu().numpy().astype(np.float64)


def score(model: ScorerModel, tile) -> np.ndarray:
    """Probability vector of a single tile (valid simplex, deterministic)."""
    return score_batch(model, [tile])[0]


def batch_loss(model: ScorerModel, batch) -> torch.Tensor:
    """Mean cross-entropy of (tile, label) pairs; differentiable."""
    tiles = [t for t, _ in batch]
    labels = torch.tensor([int(l) - 1 for _, l in batch], dtype=torch.long)
    dtype = next(model.module.parameters()).dtype
    x = _to_batch_tensor(tiles, model.config.input_size, dtype)
    return nn.functional.cross_entropy(model.module(x), labels)


def train_step(model: ScorerModel, batch, cfg: TrainConfig) -> float:
    """One Adam step over a batch of (tile, class label) pairs; returns the loss."""
    if len(batch) == 0:
        raise EmptyDataset("empty training batch")
    if len(batch) > cfg.batch_train:
        raise ValueError(f"batch of {len(batch)} exceeds batch_train={cfg.batch_train}")
    model.module.train()
    opt = model.optimizer(cfg)
    opt.zero_grad()
    loss = batch_loss(model, batch)
    if not torch.isfinite(loss):
        model.module.eval()
        raise NonFiniteLoss(f"loss is not finite: {loss.item()}")
    loss.backward()
    opt.step()
    model.module.eval()
    model._invalidate()
    return float(loss.item())


def _eval_tiles(model: ScorerModel, data, cfg: TrainConfig):
    """Accuracy and QWK of the model over labeled tiles."""
    from .metrics import accuracy, qwk

    preds = []
    labels = [int(l) for _, l in data]
    for start in range(0, len(data), cfg.batch_infer):
        chunk = data[start:start + cfg.batch_infer]
        probs = score_batch(model, [t for t, _ in chunk])
        preds.extend(int(np.argmax(p)) + 1 for p in probs)
    return accuracy(preds, labels), qwk(preds, labels, model.config.n_classes)


def train_supervised(model: ScorerModel, annotated, cfg: TrainConfig, val=None):
    """Train on labeled tiles; keep the checkpoint that scores best on validation.

    `annotated` and `val` are lists of (tile, class label). Checkpoints are
    compared by QWK first, accuracy second (ties keep the earlier epoch); the
    train-set metrics stand in when no validation tiles are given. Returns the
    model (best weights restored) and the per-epoch log.
    """
    if not annotated:
        raise EmptyDataset("no annotated tiles to train on")
    if cfg.deterministic:
        enable_determinism(substream_seed(cfg.seed, "train-full"))
    log = []
    if cfg.epochs_full == 0:
        return model, log
    rng = substream_rng(cfg.seed, "shuffle-full")
    best = None  # (qwk, accuracy), epoch, state_dict
    for epoch in range(1, cfg.epochs_full + 1):
        order = rng.permutation(len(annotated))
        losses = []
        for start in range(0, len(order), cfg.batch_train):
            batch = [annotated[i] for i in order[start:start + cfg.batch_train]]
            losses.append(train_step(model, batch, cfg))
        train_acc, train_qwk = _eval_tiles(model, annotated, cfg)
        log.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
                    "accuracy": train_acc, "qwk": train_qwk})
        if val:
            val_acc, val_qwk = _eval_tiles(model, val, cfg)
            log.append({"epoch": epoch, "split": "val", "loss": None,
                        "accuracy": val_acc, "qwk": val_qwk})
            key = (val_qwk, val_acc)
        else:
            key = (train_qwk, train_acc)
        if best is None or key > best[0]:
            best = (key, epoch, copy.deepcopy(model.module.state_dict()))
    model.module.load_state_dict(best[2])
    model._invalidate()
    return model, log


def save_model(model: ScorerModel, path) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "state": model.module.state_dict(),
        "version": model.version,
    }, path)


def load_model(path) -> ScorerModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"unrecognized checkpoint format in {path}")
    cfg_dict = dict(payload["config"])
    cfg_dict["channels"] = tuple(cfg_dict.get("channels", ()))
    config = ScorerConfig(**cfg_dict)
    module = _build_module(config)
    try:
        module.load_state_dict(payload["state"])
    except Exception as exc:
        raise CorruptCheckpoint(f"parameters do not match config: {exc}") from exc
    module.eval()
    model = ScorerModel(config, module)
    if model.version != payload["version"]:
        raise CorruptCheckpoint(
            f"checkpoint version mismatch: stored {payload['version']}, "
            f"recomputed {model.version}")
    return model
