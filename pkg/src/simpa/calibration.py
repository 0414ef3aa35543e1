"""Evaluation metrics: negative log-likelihood, reliability curves for
regression (quantile coverage) and classification (confidence bins), and
ECE / MCE."""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

MIN_REGRESSION_POINTS = 30
DEFAULT_BINS = 10


@dataclass(frozen=True)
class ReliabilityCurve:
    levels: np.ndarray
    observed: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        lv, ob, w = (np.asarray(a, dtype=np.float64) for a in (self.levels, self.observed, self.weights))
        if not (lv.shape == ob.shape == w.shape) or lv.ndim != 1:
            raise ValueError("levels, observed and weights must be matching 1-D arrays")
        if lv.size and (np.any(np.diff(lv) <= 0) or lv[0] < 0 or lv[-1] > 1):
            raise ValueError("levels must be strictly increasing inside [0, 1]")
        if np.any((ob < 0) | (ob > 1)):
            raise ValueError("observed frequencies must lie in [0, 1]")
        if np.any(w < 0) or (w.size and abs(w.sum() - 1.0) > 1e-9):
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "observed", ob)
        object.__setattr__(self, "weights", w)

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.observed - self.levels)


# ---------------------------------------------------------------------------
# NLL
# ---------------------------------------------------------------------------

def _flag_inf(values: np.ndarray) -> float:
    out = float(np.mean(values))
    if math.isinf(out):
        warnings.warn("zero predictive probability for at least one target; NLL is +inf", RuntimeWarning, stacklevel=3)
    return out


def categorical_nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean -ln p(label). A zero probability gives +inf with a warning."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[0] != labels.shape[0]:
        raise ValueError("probs and labels must have matching lengths")
    p = probs[np.arange(len(labels)), labels]
    with np.errstate(divide="ignore"):
        return _flag_inf(-np.log(p))


def gaussian_nll(mean: np.ndarray, std, targets: np.ndarray) -> float:
    """Mean negative log density of N(mean, std^2) at the targets."""
    mean, targets = np.asarray(mean, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape)
    if mean.shape != targets.shape:
        raise ValueError("mean and targets must have matching shapes")
    with np.errstate(divide="ignore"):
        vals = 0.5 * ((targets - mean) / std) ** 2 + np.log(std) + 0.5 * math.log(2 * math.pi)
    vals = np.where(std > 0, vals, np.where(targets == mean, -np.inf, np.inf))
    return _flag_inf(vals)


def mixture_gaussian_nll(samples: np.ndarray, targets: np.ndarray, std: float = 1.0) -> float:
    """-ln (1/S) sum_s N(y; yhat_s, std^2) averaged over points.

    ``samples`` has shape (S, n): S predicted means per point."""
    samples = np.asarray(samples, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(1, -1)
    if samples.shape[1] != targets.shape[1]:
        raise ValueError("samples and targets must share the point axis")
    logp = -0.5 * ((targets - samples) / std) ** 2 - math.log(std) - 0.5 * math.log(2 * math.pi)
    per_point = -(np.logaddexp.reduce(logp, axis=0) - math.log(samples.shape[0]))
    return _flag_inf(per_point)


def nll(predictive, targets) -> float:
    """NLL for a ``meta.Predictive`` (or a MAML point prediction)."""
    return predictive.nll(targets)


# ---------------------------------------------------------------------------
# reliability curves
# ---------------------------------------------------------------------------

def default_levels(n: int = DEFAULT_BINS) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def regression_reliability(samples: np.ndarray, targets: np.ndarray, levels=None) -> ReliabilityCurve:
    """observed(p) = fraction of targets at or below the predictive p-quantile.

    ``samples`` (S, n) are draws from each point's predictive distribution.
    Quantiles are order statistics (the smallest sample whose empirical CDF
    reaches p), so the curve depends on ranks only. Level 0 maps to 0 and
    level 1 to 1 by convention.
    """
    samples = np.asarray(samples, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if samples.ndim == 1:
        samples = samples.reshape(1, -1)
    if samples.shape[1] != targets.size:
        raise ValueError("samples must be (S, n) with one column per target")
    if targets.size < MIN_REGRESSION_POINTS:
        raise ValueError(f"regression reliability needs at least {MIN_REGRESSION_POINTS} points, got {targets.size}")
    levels = default_levels() if levels is None else np.asarray(levels, dtype=np.float64)
    observed = np.empty(levels.shape)
    srt = np.sort(samples, axis=0)
    S = srt.shape[0]
    for j, p in enumerate(levels):
        if p <= 0.0:
            observed[j] = 0.0
        elif p >= 1.0:
            observed[j] = 1.0
        else:
            idx = max(int(math.ceil(p * S - 1e-12)) - 1, 0)
            observed[j] = np.mean(targets <= srt[idx])
    weights = np.full(levels.shape, 1.0 / levels.size)
    return ReliabilityCurve(levels, observed, weights)


def gaussian_reliability(mean: np.ndarray, std, targets: np.ndarray, levels=None) -> ReliabilityCurve:
    """Quantile reliability of Gaussian predictives N(mean, std^2): the
    p-quantile is mean + std * Phi^-1(p)."""
    mean = np.asarray(mean, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape)
    if mean.shape != targets.shape:
        raise ValueError("mean and targets must have matching lengths")
    if targets.size < MIN_REGRESSION_POINTS:
        raise ValueError(f"regression reliability needs at least {MIN_REGRESSION_POINTS} points, got {targets.size}")
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    levels = default_levels() if levels is None else np.asarray(levels, dtype=np.float64)
    observed = np.empty(levels.shape)
    for j, p in enumerate(levels):
        if p <= 0.0:
            observed[j] = 0.0
        elif p >= 1.0:
            observed[j] = 1.0
        else:
            observed[j] = np.mean(targets <= mean + std * special.ndtri(p))
    return ReliabilityCurve(levels, observed, np.full(levels.shape, 1.0 / levels.size))


def classification_reliability(probs: np.ndarray, labels: np.ndarray, n_bins: int = DEFAULT_BINS) -> ReliabilityCurve:
    """Equal-width bins over the top-class confidence.

    Bin b covers [b/n, (b+1)/n) with the last bin closed at 1. The level of an
    occupied bin is its mean confidence, observed is its accuracy and the
    weight its share of samples. Empty bins sit at their centre with weight
    and observed 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("classification reliability needs a non-empty (n, N) probability array")
    if probs.shape[0] != labels.size:
        raise ValueError("probs and labels must have matching lengths")
    if np.any(probs < -1e-12) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("each row of probs must lie on the simplex")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    bins = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins).astype(np.float64)
    conf_sum = np.bincount(bins, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(bins, weights=correct, minlength=n_bins)
    occupied = counts > 0
    levels = default_levels(n_bins)
    levels[occupied] = conf_sum[occupied] / counts[occupied]
    observed = np.zeros(n_bins)
    observed[occupied] = acc_sum[occupied] / counts[occupied]
    return ReliabilityCurve(levels, observed, counts / counts.sum())


def ece_mce(curve: ReliabilityCurve) -> tuple[float, float]:
    """ECE = sum_b w_b |obs_b - level_b|; MCE = max over bins with w_b > 0."""
    gaps = curve.gaps
    occ = curve.weights > 0
    if not occ.any():
        return 0.0, 0.0
    return float(np.sum(curve.weights[occ] * gaps[occ])), float(gaps[occ].max())


def normalised_curve(curve: ReliabilityCurve) -> np.ndarray:
    """observed - level, the diagonal-subtracted reliability diagram."""
    return curve.observed - curve.levels


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

CURVE_COLUMNS = ("level", "observed", "weight")


def curve_to_csv(curve: ReliabilityCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for row in zip(curve.levels, curve.observed, curve.weights):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def curve_from_csv(text: str) -> ReliabilityCurve:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CURVE_COLUMNS:
        raise ValueError(f"expected header {CURVE_COLUMNS}")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, 3)
    return ReliabilityCurve(data[:, 0], data[:, 1], data[:, 2])


def write_curve_csv(curve: ReliabilityCurve, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(curve_to_csv(curve))
    os.replace(tmp, path)


def read_curve_csv(path) -> ReliabilityCurve:
    return curve_from_csv(Path(path).read_text())
