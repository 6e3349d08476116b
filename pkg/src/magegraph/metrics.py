"""Forecast evaluation: confusion-based scores, rank AUC, Brier, and a logistic baseline."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from magegraph.errors import DataError
from magegraph.tensor import Tensor, add, matmul, reshape, sigmoid, weighted_bce_with_logits, zero_grad

DEFAULT_THRESHOLD = 0.5
METRIC_NAMES = ("auc", "f1", "sensitivity", "specificity", "accuracy", "brier")


def _check_inputs(probabilities, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0:
        raise DataError("no records to evaluate")
    if p.shape != y.shape:
        raise DataError(f"{p.size} probabilities but {y.size} labels")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise DataError("probabilities must lie in [0, 1]")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    return p, y.astype(np.int64)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(probabilities, labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """Counts with a record predicted positive iff p >= threshold."""
    p, y = _check_inputs(probabilities, labels)
    pred = p >= threshold
    return ConfusionCounts(int(np.sum(pred & (y == 1))), int(np.sum(pred & (y == 0))),
                           int(np.sum(~pred & (y == 0))), int(np.sum(~pred & (y == 1))))


@dataclass(frozen=True)
class Score:
    """A metric value; ``undefined`` marks a zero denominator (value reported as 0)."""

    value: float
    undefined: bool = False

    def __float__(self) -> float:
        return self.value


def _ratio(num: float, den: float) -> Score:
    return Score(0.0, True) if den == 0 else Score(num / den)


def f1(c: ConfusionCounts) -> Score:
    return _ratio(c.tp, c.tp + 0.5 * (c.fp + c.fn))


def sensitivity(c: ConfusionCounts) -> Score:
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts) -> Score:
    return _ratio(c.tn, c.tn + c.fp)


def accuracy(c: ConfusionCounts) -> Score:
    return _ratio(c.tp + c.tn, c.total)


def auc(probabilities, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counting one half."""
    p, y = _check_inputs(probabilities, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise DataError("AUC needs both positive and negative labels")
    ranks = rankdata(p)  # average ranks over ties
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def brier(probabilities, labels) -> float:
    p, y = _check_inputs(probabilities, labels)
    return float(np.mean((p - y) ** 2))


@dataclass
class HorizonMetrics:
    horizon: int
    scores: dict[str, Score]
    support: int
    positives: int


def evaluate(probabilities, labels, horizon: int = 0, threshold: float = DEFAULT_THRESHOLD) -> HorizonMetrics:
    p, y = _check_inputs(probabilities, labels)
    c = confusion(p, y, threshold)
    both = 0 < y.sum() < y.size
    scores = {
        "auc": Score(auc(p, y)) if both else Score(0.0, True),
        "f1": f1(c),
        "sensitivity": sensitivity(c),
        "specificity": specificity(c),
        "accuracy": accuracy(c),
        "brier": Score(brier(p, y)),
    }
    return HorizonMetrics(horizon, scores, int(y.size), int(y.sum()))


def average_metrics(runs: Sequence[HorizonMetrics]) -> HorizonMetrics:
    """Seed average; a metric is undefined if it was undefined for any member."""
    if not runs:
        raise DataError("nothing to average")
    scores = {}
    for name in METRIC_NAMES:
        vals = [r.scores[name] for r in runs]
        scores[name] = Score(float(np.mean([v.value for v in vals])), any(v.undefined for v in vals))
    return HorizonMetrics(runs[0].horizon, scores, runs[0].support, runs[0].positives)


@dataclass
class MetricsReport:
    rows: list[tuple[str, str, HorizonMetrics]] = field(default_factory=list)  # (model, subset, metrics)

    def add(self, model: str, subset: str, m: HorizonMetrics) -> None:
        self.rows.append((model, subset, m))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "subset", "horizon", "metric", "value", "undefined", "support", "positives"])
        for model, subset, m in self.rows:
            for name in METRIC_NAMES:
                s = m.scores[name]
                w.writerow([model, subset, m.horizon, name, f"{s.value:.10g}", int(s.undefined), m.support, m.positives])
        return buf.getvalue()

    def plot(self, path, metric: str = "auc") -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        series: dict[tuple[str, str], list[tuple[int, float]]] = {}
        for model, subset, m in self.rows:
            series.setdefault((model, subset), []).append((m.horizon, m.scores[metric].value))
        for (model, subset), pts in sorted(series.items()):
            pts.sort()
            ax.plot([h for h, _ in pts], [v for _, v in pts], marker="o", label=f"{model} [{subset}]")
        ax.set_xlabel("forecast horizon (weeks)")
        ax.set_ylabel(metric)
        ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
        plt.close(fig)


def logistic_baseline(train_x, train_y, test_x, weights: tuple[float, float] | None = None, epochs: int = 300,
                      lr: float = 0.05, weight_decay: float = 1e-4, seed: int = 1) -> np.ndarray:
    """Per-record logistic regression fit with weighted BCE and full-batch AdamW; returns test probabilities."""
    from magegraph.training import adamw_step, class_weights, cosine_lr, OptimizerState

    x = np.asarray(train_x, dtype=np.float64)
    y = np.asarray(train_y, dtype=np.float64).reshape(-1)
    if weights is None:
        weights = class_weights(y)
    elif not (0 < y.sum() < y.size):
        raise DataError("logistic baseline needs both classes in training labels")
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / (x.shape[1] + 1))
    params = {"W": Tensor(rng.uniform(-bound, bound, size=(x.shape[1], 1)), requires_grad=True),
              "b": Tensor(np.zeros(1), requires_grad=True)}
    state = OptimizerState()
    xt = Tensor(x)
    for epoch in range(epochs):
        logits = reshape(add(matmul(xt, params["W"]), params["b"]), (x.shape[0],))
        loss = weighted_bce_with_logits(logits, y, weights)
        loss.backward()
        adamw_step(params, {k: p.grad for k, p in params.items()}, state,
                   cosine_lr(epoch, epochs, lr, lr * 0.01), weight_decay)
        zero_grad(params.values())
    tx = Tensor(np.asarray(test_x, dtype=np.float64))
    return sigmoid(reshape(add(matmul(tx, params["W"]), params["b"]), (tx.shape[0],))).data.copy()
