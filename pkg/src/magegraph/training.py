"""Optimisation of model parameters over chronological sequences of weekly graphs."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from magegraph.errors import DataError, NumericError, ParameterError
from magegraph.features import FeatureMatrix
from magegraph.geo import DEFAULT_K, DEFAULT_RADIUS_KM, build_semisupervised_graph, build_supervised_graph
from magegraph.model import ModelConfig, Params, aggregation_operator, forward, init_parameters
from magegraph.tensor import Tensor, take, weighted_bce_with_logits, zero_grad

REGIMES = ("supervised", "semi-supervised")
AGC_EPS = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    horizon: int = 0
    epochs: int = 200
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    agc_lambda: float = 0.01
    patience: int = 20
    seed: int = 1
    regime: str = "supervised"
    val_fraction: float = 0.15

    def __post_init__(self):
        if not 0 <= self.horizon <= 7:
            raise ParameterError(f"horizon must be in 0..7, got {self.horizon}")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if not (0 < self.min_lr <= self.base_lr):
            raise ParameterError("need 0 < min_lr <= base_lr")
        if self.weight_decay < 0 or self.agc_lambda <= 0:
            raise ParameterError("weight_decay must be >= 0 and agc_lambda > 0")
        if self.patience < 1:
            raise ParameterError("patience must be >= 1")
        if self.regime not in REGIMES:
            raise ParameterError(f"regime must be one of {REGIMES}")
        if not 0 < self.val_fraction < 1:
            raise ParameterError("val_fraction must lie in (0, 1)")


def class_weights(labels) -> tuple[float, float]:
    """Inverse-frequency weights N / (2 N_c): both classes end up with total weight N/2."""
    y = np.asarray(labels).reshape(-1)
    n, n1 = y.size, int(np.sum(y == 1))
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise DataError(f"class weights need both classes (got {n0} negatives, {n1} positives)")
    return n / (2.0 * n0), n / (2.0 * n1)


def cosine_lr(epoch: int, total: int, base_lr: float, min_lr: float) -> float:
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / total))


def adaptive_gradient_clip(param, grad, agc_lambda: float, eps: float = AGC_EPS) -> np.ndarray:
    """Rescale ``grad`` so that ||grad|| <= agc_lambda * max(||param||, eps) (Frobenius norms)."""
    w = param.data if isinstance(param, Tensor) else np.asarray(param)
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    w_norm = max(float(np.linalg.norm(w)), eps)
    g_norm = float(np.linalg.norm(g))
    limit = agc_lambda * w_norm
    if g_norm > limit:
        return g * (limit / g_norm)
    return g.copy()


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Params, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               weight_decay: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with decoupled weight decay, in place on ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def masked_loss(logits: Tensor, labels, labeled_mask, weights: tuple[float, float]) -> Tensor:
    """Weighted BCE over labeled nodes only; unlabeled entries of ``labels`` are ignored."""
    mask = np.asarray(labeled_mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DataError("loss needs at least one labeled node")
    y = np.asarray(labels, dtype=np.float64)[idx]
    return weighted_bce_with_logits(take(logits, idx), y, weights)


# -- data assembly ----------------------------------------------------------

@dataclass
class WeekSample:
    """One week's graph, node features and horizon-shifted targets."""

    week: int
    node_ids: list[str]
    features: np.ndarray
    operator: Tensor
    targets: np.ndarray
    target_mask: np.ndarray
    graph: object = None

    @property
    def num_targets(self) -> int:
        return int(self.target_mask.sum())


class WeeklyData:
    """Index of a FeatureMatrix by week and trap."""

    def __init__(self, fm: FeatureMatrix):
        self.fm = fm
        self.row_of: dict[tuple[str, int], int] = {(t, int(w)): i for i, (t, w) in enumerate(zip(fm.trap_ids, fm.weeks))}
        self.weeks = sorted(set(int(w) for w in fm.weeks))
        self.trap_ids = sorted(set(fm.trap_ids))
        self.position = {t: (float(fm.lats[i]), float(fm.lons[i])) for i, t in enumerate(fm.trap_ids)}
        self._by_week: dict[int, list[int]] = {}
        for i, w in enumerate(fm.weeks):
            self._by_week.setdefault(int(w), []).append(i)

    def rows_in_week(self, week: int) -> list[int]:
        return self._by_week.get(week, [])

    def label(self, trap: str, week: int) -> int:
        i = self.row_of.get((trap, week))
        return -1 if i is None else int(self.fm.labels[i])

    def sample(self, week: int, horizon: int, regime: str, k: int = DEFAULT_K, radius_km: float = DEFAULT_RADIUS_KM,
               aggregator: str = "mean", allowed: set[str] | None = None) -> WeekSample | None:
        rows = [i for i in self.rows_in_week(week) if allowed is None or self.fm.trap_ids[i] in allowed]
        if not rows:
            return None
        ids = [self.fm.trap_ids[i] for i in rows]
        pos = np.c_[self.fm.lats[rows], self.fm.lons[rows]]
        checked = self.fm.labels[rows] >= 0
        if regime == "supervised":
            if not checked.any():
                return None
            graph = build_supervised_graph(week, ids, pos, checked, k, radius_km)
            rows = [r for r, c in zip(rows, checked) if c]
        else:
            graph = build_semisupervised_graph(week, ids, pos, checked, k, radius_km)
        targets = np.array([self.label(t, week + horizon) for t in graph.node_ids], dtype=np.int64)
        mask = targets >= 0
        return WeekSample(week, list(graph.node_ids), self.fm.values[rows], aggregation_operator(graph, aggregator),
                          np.where(mask, targets, 0).astype(np.float64), mask, graph)

    def samples(self, weeks: Iterable[int], horizon: int, regime: str, **kw) -> list[WeekSample]:
        out = []
        for w in weeks:
            s = self.sample(w, horizon, regime, **kw)
            if s is not None:
                out.append(s)
        return out


# -- training loop ----------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainingRun:
    model_config: ModelConfig
    train_config: TrainConfig
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    stop_reason: str
    best_params: dict[str, np.ndarray]
    class_weights: tuple[float, float]

    def log_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,lr,train_loss,val_loss\n")
        for r in self.history:
            buf.write(f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.val_loss!r}\n")
        return buf.getvalue()

    def params(self) -> Params:
        return {k: Tensor(v.copy()) for k, v in self.best_params.items()}


def chronological_split(samples: Sequence[WeekSample], val_fraction: float) -> tuple[list[WeekSample], list[WeekSample]]:
    ordered = sorted(samples, key=lambda s: s.week)
    if len(ordered) < 2:
        raise DataError("need at least two training weeks for a validation split")
    n_val = min(len(ordered) - 1, max(1, math.ceil(val_fraction * len(ordered))))
    return ordered[:-n_val], ordered[-n_val:]


def pooled_loss(samples: Sequence[WeekSample], params: Params, config: ModelConfig, weights) -> float:
    """Weighted BCE pooled over every labeled node of the given weeks (eval mode)."""
    total, count = 0.0, 0
    for s in samples:
        if s.num_targets == 0:
            continue
        logits = forward(s.features, s.operator, params, config, training=False).logits
        loss = masked_loss(logits, s.targets, s.target_mask, weights)
        total += loss.item() * s.num_targets
        count += s.num_targets
    if count == 0:
        raise DataError("validation weeks hold no labeled targets")
    return total / count


def train(model_config: ModelConfig, samples: Sequence[WeekSample], train_config: TrainConfig,
          val_samples: Sequence[WeekSample] | None = None, init: Params | None = None) -> TrainingRun:
    """Full-graph gradient steps week by week, AGC + AdamW, cosine schedule, early stopping.

    Without explicit ``val_samples`` the chronologically last ``val_fraction`` of
    ``samples`` is held out for validation.
    """
    if val_samples is None:
        train_s, val_s = chronological_split(samples, train_config.val_fraction)
    else:
        train_s, val_s = sorted(samples, key=lambda s: s.week), list(val_samples)
    train_s = [s for s in train_s if s.num_targets > 0]
    if not train_s:
        raise DataError(f"no labeled targets at horizon {train_config.horizon}")
    all_targets = np.concatenate([s.targets[s.target_mask] for s in train_s])
    weights = class_weights(all_targets)

    params = init_parameters(model_config, train_config.seed) if init is None else {
        k: Tensor(v.data.copy(), requires_grad=True) for k, v in init.items()}
    dropout_rng = np.random.default_rng([train_config.seed, 7919])
    state = OptimizerState()
    history: list[EpochRecord] = []
    best_val, best_epoch, best_params, bad = math.inf, 0, None, 0
    stop_reason = "max-epochs"

    for epoch in range(train_config.epochs):
        lr = cosine_lr(epoch, train_config.epochs, train_config.base_lr, train_config.min_lr)
        losses = []
        for s in train_s:
            res = forward(s.features, s.operator, params, model_config, training=True, rng=dropout_rng)
            loss = masked_loss(res.logits, s.targets, s.target_mask, weights)
            loss.backward()
            grads = {n: adaptive_gradient_clip(p.data, p.grad if p.grad is not None else np.zeros_like(p.data),
                                               train_config.agc_lambda)
                     for n, p in params.items()}
            adamw_step(params, grads, state, lr, train_config.weight_decay)
            zero_grad(params.values())
            losses.append(loss.item())
        val = pooled_loss(val_s, params, model_config, weights)
        history.append(EpochRecord(epoch + 1, lr, float(np.mean(losses)), val))
        if val < best_val:
            best_val, best_epoch, bad = val, epoch + 1, 0
            best_params = {k: p.data.copy() for k, p in params.items()}
        else:
            bad += 1
            if bad >= train_config.patience:
                stop_reason = "early-stop"
                break
    return TrainingRun(model_config, train_config, history, best_epoch, best_val, stop_reason, best_params, weights)


def train_ensemble(model_config: ModelConfig, samples: Sequence[WeekSample], train_config: TrainConfig,
                   seeds: Sequence[int], val_samples=None) -> list[TrainingRun]:
    if len(seeds) < 1:
        raise ParameterError("ensemble needs at least one seed")
    runs = []
    for seed in seeds:
        cfg = TrainConfig(**{**train_config.__dict__, "seed": int(seed)})
        runs.append(train(model_config, samples, cfg, val_samples))
    return runs


def ensemble_mean(probabilities: Sequence[np.ndarray]) -> np.ndarray:
    """Per-node mean of member probabilities."""
    if len(probabilities) == 0:
        raise ParameterError("ensemble is empty")
    return np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in probabilities]), axis=0)
