"""Isotonic recalibration of ensemble probabilities and entropy-based uncertainty summaries."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import xlogy

from magegraph.errors import DataError, ParameterError

DEFAULT_LAMBDA = 0.5


def pool_adjacent_violators(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted least-squares nondecreasing fit to ``y`` (already in score order)."""
    means: list[float] = []
    weights: list[float] = []
    sizes: list[int] = []
    for yi, wi in zip(y.tolist(), w.tolist()):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, s2 = means.pop(), weights.pop(), sizes.pop()
            m1, w1, s1 = means.pop(), weights.pop(), sizes.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            weights.append(wt)
            sizes.append(s1 + s2)
    return np.repeat(means, sizes)


@dataclass
class IsotonicModel:
    breakpoints: np.ndarray
    fitted_values: np.ndarray

    def __call__(self, x):
        """Linear interpolation between breakpoints, clamped outside them."""
        return np.interp(np.asarray(x, dtype=np.float64), self.breakpoints, self.fitted_values)


def fit_isotonic(scores, labels) -> IsotonicModel:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.size != y.size:
        raise DataError(f"{s.size} scores but {y.size} labels")
    if s.size < 2:
        raise DataError("isotonic fit needs at least two records")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("calibration labels must be 0 or 1")
    if y.min() == y.max():
        raise DataError("calibration data holds a single class")
    xs, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    ybar = np.bincount(inverse, weights=y) / counts
    fitted = pool_adjacent_violators(ybar, counts.astype(np.float64))
    return IsotonicModel(xs, np.clip(fitted, 0.0, 1.0))


@dataclass
class CalibratedPredictor:
    isotonic: IsotonicModel
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")

    def __call__(self, raw):
        return calibrate(raw, self)


def calibrate(raw, predictor: CalibratedPredictor):
    """lam * raw + (1 - lam) * isotonic(raw), clamped to [0, 1]."""
    r = np.asarray(raw, dtype=np.float64)
    lam = predictor.lam
    if lam == 1.0:
        out = r.copy()
    elif lam == 0.0:
        out = predictor.isotonic(r)
    else:
        out = lam * r + (1.0 - lam) * predictor.isotonic(r)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def binary_entropy(p) -> np.ndarray:
    """Natural-log binary entropy with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    return -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p))


def node_entropy(probabilities: Sequence[float]) -> float:
    """Average binary entropy of one node's probabilities across forecast horizons."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise DataError("node entropy needs at least one horizon")
    if np.any((p < 0) | (p > 1)):
        raise DataError("probabilities must lie in [0, 1]")
    return float(binary_entropy(p).mean())


@dataclass
class EntropyRow:
    group: str
    subset: str
    mean_entropy: float
    node_count: int


def entropy_by_group(entropies: Mapping[str, Mapping[str, float]],
                     indicators: Mapping[str, Mapping[str, int]]) -> list[EntropyRow]:
    """Mean node entropy per covariate class and training subset.

    ``entropies`` maps subset name -> {node: entropy}; ``indicators`` maps
    group name -> {node: 0/1}.  Groups with no member node in a subset are
    left out rather than reported as zero.
    """
    rows = []
    for group, members in indicators.items():
        for subset, ent in entropies.items():
            vals = [ent[n] for n, flag in members.items() if flag and n in ent]
            if vals:
                rows.append(EntropyRow(group, subset, float(np.mean(vals)), len(vals)))
    return rows


def entropy_csv(rows: Sequence[EntropyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "subset", "mean_entropy", "node_count"])
    for r in rows:
        w.writerow([r.group, r.subset, f"{r.mean_entropy:.10g}", r.node_count])
    return buf.getvalue()
