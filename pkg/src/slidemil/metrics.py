"""Evaluation metrics, Gaussian-approximation confidence intervals, the
confidence KDE analysis, and the sampling retention curve."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyInput, LengthMismatch
from .labels import N_CLASSES, NNEO

Z_95 = 1.96


@dataclass
class MetricReport:
    metric: str
    m: float
    n: int
    se: Optional[float]
    z: float
    margin: Optional[float]
    bernoulli: bool = True
    defined: bool = True


@dataclass
class RetentionPoint:
    k: int
    epoch: int
    lost_fraction: float


def _check_pair(preds, labels):
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    if not preds:
        raise EmptyInput("no predictions to evaluate")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return sum(p == l for p, l in zip(preds, labels)) / len(preds)


def binary_accuracy(preds, labels) -> float:
    """Accuracy after collapsing to NNeo vs all."""
    preds, labels = _check_pair(preds, labels)
    return sum((p > NNEO) == (l > NNEO) for p, l in zip(preds, labels)) / len(preds)


def sensitivity(preds, labels) -> float:
    """TP/(TP+FN) of the collapsed NNeo-vs-all problem; NaN when no positives."""
    preds, labels = _check_pair(preds, labels)
    positives = [(p, l) for p, l in zip(preds, labels) if l > NNEO]
    if not positives:
        return math.nan
    return sum(p > NNEO for p, _ in positives) / len(positives)


def qwk(preds, labels, n_classes: int = N_CLASSES) -> float:
    """Quadratic weighted kappa: 1 - sum(w*O)/sum(w*E), w_ij = (i-j)^2.

    E is the outer product of the marginals scaled to N. When both marginals
    collapse onto one identical class the agreement is perfect by construction
    and 1.0 is returned.
    """
    preds, labels = _check_pair(preds, labels)
    for v in preds + labels:
        if not 1 <= v <= n_classes:
            raise ValueError(f"class value {v} outside 1..{n_classes}")
    observed = np.zeros((n_classes, n_classes))
    for p, l in zip(preds, labels):
        observed[l - 1, p - 1] += 1
    n = len(preds)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    idx = np.arange(n_classes)
    weights = (idx[:, None] - idx[None, :]) ** 2
    denom = float((weights * expected).sum())
    if denom == 0.0:
        return 1.0
    return 1.0 - float((weights * observed).sum()) / denom


def confidence_interval(m: float, n: int, z: float = Z_95, metric: str = "accuracy") -> MetricReport:
    """95% Gaussian interval of a Bernoulli metric: margin = z * sqrt(m(1-m)/n)."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"metric value {m} outside [0,1]")
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    se = math.sqrt(m * (1.0 - m) / n)
    return MetricReport(metric=metric, m=m, n=n, se=se, z=z, margin=z * se)


def evaluate_predictions(preds, labels, z: float = Z_95) -> dict:
    """Accuracy, binary accuracy and sensitivity with intervals, QWK without.

    QWK is not a Bernoulli-trial metric, so it carries no interval by this
    formula; its report is flagged accordingly.
    """
    preds, labels = _check_pair(preds, labels)
    n = len(preds)
    reports = {}
    for name, fn in (("accuracy", accuracy), ("binary_accuracy", binary_accuracy),
                     ("sensitivity", sensitivity)):
        m = fn(preds, labels)
        if math.isnan(m):
            reports[name] = MetricReport(metric=name, m=m, n=n, se=None, z=z,
                                         margin=None, defined=False)
        else:
            reports[name] = confidence_interval(m, n, z, metric=name)
    k = qwk(preds, labels)
    reports["qwk"] = MetricReport(metric="qwk", m=k, n=n, se=None, z=z, margin=None,
                                  bernoulli=False)
    return reports


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), guarded against degenerate spread."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    std = float(values.std())
    q75, q25 = np.percentile(values, [75, 25])
    iqr_term = (q75 - q25) / 1.34
    spread = min(x for x in (std, iqr_term) if x > 0) if (std > 0 or iqr_term > 0) else 0.0
    if spread == 0.0:
        return 0.01  # all points identical; keep a resolvable peak
    return 0.9 * spread * n ** (-0.2)


def _kde_reflected(values: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    # reflect at 0 and 1 so the estimate integrates to 1 over [0,1]
    pts = np.concatenate([values, -values, 2.0 - values])
    z = (grid[:, None] - pts[None, :]) / bandwidth
    dens = np.exp(-0.5 * z * z).sum(axis=1)
    return dens / (len(values) * bandwidth * math.sqrt(2.0 * math.pi))


@dataclass
class KdeReport:
    grid: np.ndarray
    density_correct: Optional[np.ndarray]
    density_incorrect: Optional[np.ndarray]
    bandwidth_correct: Optional[float]
    bandwidth_incorrect: Optional[float]
    mean_correct: Optional[float]
    mean_incorrect: Optional[float]
    mean_gap: Optional[float]


def confidence_kde(confidences, correct_mask, grid_points: int = 1001) -> KdeReport:
    """Density of prediction confidences, split into correct and incorrect groups.

    Gaussian kernels with Silverman bandwidth, evaluated on a fixed grid over
    [0,1]. A group with fewer than two points gets no density (its mean is
    still reported when it has one point).
    """
    conf = np.asarray(list(confidences), dtype=np.float64)
    mask = np.asarray(list(correct_mask), dtype=bool)
    if conf.shape != mask.shape:
        raise LengthMismatch(f"{conf.shape} confidences vs {mask.shape} mask")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0,1]")
    grid = np.linspace(0.0, 1.0, grid_points)
    out = {"grid": grid}
    for name, values in (("correct", conf[mask]), ("incorrect", conf[~mask])):
        if len(values) >= 2:
            bw = silverman_bandwidth(values)
            out[f"density_{name}"] = _kde_reflected(values, grid, bw)
            out[f"bandwidth_{name}"] = bw
        else:
            out[f"density_{name}"] = None
            out[f"bandwidth_{name}"] = None
        out[f"mean_{name}"] = float(values.mean()) if len(values) else None
    gap = None
    if out["mean_correct"] is not None and out["mean_incorrect"] is not None:
        gap = out["mean_correct"] - out["mean_incorrect"]
    return KdeReport(mean_gap=gap, **out)


def retention_curve(rankings_per_epoch: dict, relevant: dict, ks) -> list:
    """Fraction of relevant tiles a Top-k cut would discard, per (k, epoch).

    `rankings_per_epoch` maps epoch -> slide_id -> tile indices in rank order;
    `relevant` maps slide_id -> set of relevant tile indices.
    """
    total = sum(len(v) for v in relevant.values())
    points = []
    for epoch in sorted(rankings_per_epoch):
        per_slide = rankings_per_epoch[epoch]
        for k in sorted(int(k) for k in ks):
            if total == 0:
                points.append(RetentionPoint(k=k, epoch=epoch, lost_fraction=0.0))
                continue
            lost = 0
            for sid, wanted in relevant.items():
                order = per_slide.get(sid, [])
                kept = set(order[:k])
                lost += sum(1 for n in wanted if n not in kept)
            points.append(RetentionPoint(k=k, epoch=epoch, lost_fraction=lost / total))
    return points
