"""Command implementations behind the ``magegraph`` CLI.

Each ``cmd_*`` reads its inputs from the run's output directory (or the paths
named in the config), writes its outputs atomically, and returns nothing.
Errors surface as :class:`~magegraph.errors.MageGraphError` subclasses.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from magegraph import checkpoint
from magegraph.calibration import CalibratedPredictor, entropy_by_group, entropy_csv, fit_isotonic, node_entropy, calibrate
from magegraph.checkpoint import atomic_write, checkpoint_name
from magegraph.config import RunConfig
from magegraph.errors import DataError
from magegraph.features import FeatureMatrix, assemble_features, covariate_groups, read_raw_table
from magegraph.geo import ConnectivityPartition, build_semisupervised_graph, connectivity_partition, edge_list_lines
from magegraph.metrics import MetricsReport, average_metrics, evaluate, logistic_baseline
from magegraph.model import ModelConfig, forward
from magegraph.synth import generate
from magegraph.tensor import Tensor
from magegraph.training import TrainConfig, WeeklyData, ensemble_mean, train

log = logging.getLogger(__name__)


@dataclass
class RunPaths:
    out: Path
    raw: Path
    oracle: Path

    @property
    def features(self):
        return self.out / "features.csv"

    @property
    def scaler(self):
        return self.out / "scaler.txt"

    @property
    def edges(self):
        return self.out / "edges.csv"

    @property
    def checkpoints(self):
        return self.out / "checkpoints"

    @property
    def logs(self):
        return self.out / "logs"

    @property
    def metrics(self):
        return self.out / "metrics.csv"

    @property
    def calibrated(self):
        return self.out / "calibrated.csv"

    @property
    def entropy(self):
        return self.out / "entropy.csv"


def run_paths(cfg: RunConfig) -> RunPaths:
    out = cfg.output_dir
    raw = cfg.resolve(cfg["data"]["raw_csv"]) if cfg["data"]["raw_csv"] else out / "raw.csv"
    oracle = cfg.resolve(cfg["data"]["oracle_csv"]) if cfg["data"]["oracle_csv"] else out / "oracle.csv"
    return RunPaths(out, raw, oracle)


def _record_config(cfg: RunConfig) -> None:
    atomic_write(cfg.output_dir / "config.ini", cfg.dumps())


# -- week bookkeeping -------------------------------------------------------

@dataclass
class WeekSplit:
    train: list[int]
    calib: list[int]
    evaluation: list[int]

    @property
    def test(self) -> list[int]:
        return self.calib + self.evaluation


def split_weeks(weeks: list[int], cfg: RunConfig) -> WeekSplit:
    weeks = sorted(weeks)
    n_train = int(math.floor(cfg["data"]["train_fraction"] * len(weeks)))
    if n_train < 2 or n_train >= len(weeks):
        raise DataError(f"{len(weeks)} weeks cannot be split with train_fraction={cfg['data']['train_fraction']}")
    test = weeks[n_train:]
    n_cal = max(1, math.ceil(cfg["calibration"]["calib_fraction"] * len(test)))
    if n_cal >= len(test):
        raise DataError("test period too short to hold out a calibration split")
    return WeekSplit(weeks[:n_train], test[:n_cal], test[n_cal:])


def horizon_weeks(weeks: list[int], horizon: int, last: int) -> list[int]:
    return [w for w in weeks if w + horizon <= last]


def trap_partition(data: WeeklyData, cfg: RunConfig) -> ConnectivityPartition:
    ids = data.trap_ids
    pos = np.array([data.position[t] for t in ids])
    g = build_semisupervised_graph(-1, ids, pos, np.ones(len(ids), dtype=bool), cfg["graph"]["k"], cfg["graph"]["radius_km"])
    return connectivity_partition(g)


def training_traps(data: WeeklyData, part: ConnectivityPartition, subset: str) -> set[str]:
    """Traps used for fitting: lower80 drops the most connected quintile, upper80 the least."""
    traps = set(data.trap_ids)
    if subset == "lower80":
        return traps - part.upper_set
    if subset == "upper80":
        return traps - part.lower_set
    return traps


def _graph_kwargs(cfg: RunConfig) -> dict:
    return {"k": cfg["graph"]["k"], "radius_km": cfg["graph"]["radius_km"], "aggregator": cfg["graph"]["aggregator"]}


def load_features(paths: RunPaths) -> FeatureMatrix:
    if not paths.features.exists():
        raise DataError(f"missing feature file {paths.features}; run preprocess first")
    with open(paths.features, newline="") as fh:
        return FeatureMatrix.from_csv(fh)


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> None:
    s = cfg["synth"]
    world = generate(s["seed"], s["n_traps"], s["n_weeks"], s["missing_rate"])
    paths = run_paths(cfg)
    atomic_write(paths.raw, world.to_csv())
    atomic_write(paths.oracle, world.oracle_csv())
    _record_config(cfg)
    log.info("wrote %d traps x %d weeks to %s", world.n_traps, world.n_weeks, paths.raw)


def cmd_preprocess(cfg: RunConfig) -> None:
    paths = run_paths(cfg)
    if not paths.raw.exists():
        raise DataError(f"raw covariate file {paths.raw} not found")
    with open(paths.raw, newline="") as fh:
        table = read_raw_table(fh)
    split = split_weeks(sorted({r.week for r in table.rows}), cfg)
    fm, scaler = assemble_features(table, split.train)
    atomic_write(paths.features, fm.to_csv())
    atomic_write(paths.scaler, scaler.dumps())
    _record_config(cfg)
    log.info("features: %d rows x %d columns", fm.num_rows, len(fm.column_names))


def cmd_build_graph(cfg: RunConfig) -> None:
    paths = run_paths(cfg)
    data = WeeklyData(load_features(paths))
    kw = _graph_kwargs(cfg)
    graphs = []
    for w in data.weeks:
        s = data.sample(w, 0, cfg["train"]["regime"], **kw)
        if s is not None:
            graphs.append(s.graph)
    atomic_write(paths.edges, "week,src_id,dst_id,distance_km\n" + "".join(l + "\n" for l in edge_list_lines(graphs)))
    log.info("edge list for %d weeks written to %s", len(graphs), paths.edges)


def _model_config(cfg: RunConfig, input_dim: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(input_dim, m["variant"], m["num_layers"], m["width"], m["dropout"], cfg["graph"]["aggregator"])


def _train_config(cfg: RunConfig, horizon: int, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(horizon, t["epochs"], t["base_lr"], t["min_lr"], t["weight_decay"], t["agc_lambda"],
                       t["patience"], seed, t["regime"], t["val_fraction"])


def cmd_train(cfg: RunConfig) -> None:
    paths = run_paths(cfg)
    fm = load_features(paths)
    data = WeeklyData(fm)
    split = split_weeks(data.weeks, cfg)
    part = trap_partition(data, cfg)
    allowed = training_traps(data, part, cfg["train"]["subset"])
    mc = _model_config(cfg, len(fm.column_names))
    for h in cfg["train"]["horizons"]:
        weeks = horizon_weeks(split.train, h, split.train[-1])
        samples = data.samples(weeks, h, cfg["train"]["regime"], allowed=allowed, **_graph_kwargs(cfg))
        for seed in cfg["train"]["seeds"]:
            tc = _train_config(cfg, h, seed)
            run = train(mc, samples, tc)
            meta = {"horizon": h, "seed": seed, "regime": tc.regime, "subset": cfg["train"]["subset"],
                    "best_epoch": run.best_epoch, "stop_reason": run.stop_reason,
                    "class_weights": list(run.class_weights), "scaler": paths.scaler.name}
            checkpoint.save(paths.checkpoints / checkpoint_name(h, seed), mc, run.best_params, meta)
            atomic_write(paths.logs / f"train_h{h}_s{seed}.csv", run.log_csv())
            log.info("h=%d seed=%d: best epoch %d (val %.4f), %s", h, seed, run.best_epoch, run.best_val_loss,
                     run.stop_reason)
    _record_config(cfg)


def _load_members(paths: RunPaths, horizon: int, seeds: list[int]):
    members = []
    for seed in seeds:
        p = paths.checkpoints / checkpoint_name(horizon, seed)
        if not p.exists():
            raise DataError(f"missing checkpoint {p}")
        mc, params, meta = checkpoint.load(p)
        members.append((mc, {k: Tensor(v) for k, v in params.items()}, meta))
    return members


@dataclass
class PredictionRecord:
    trap_id: str
    week: int
    label: int  # -1 when the target is unobserved
    probabilities: list[float]  # one per ensemble member


def predict_records(data: WeeklyData, weeks: list[int], horizon: int, members, graph_kw: dict,
                    labeled_only: bool = True) -> list[PredictionRecord]:
    regime = members[0][2].get("regime", "supervised")
    out = []
    for w in weeks:
        s = data.sample(w, horizon, regime, **graph_kw)
        if s is None:
            continue
        probs = [forward(s.features, s.operator, params, mc).probabilities() for mc, params, _ in members]
        for i, tid in enumerate(s.node_ids):
            if labeled_only and not s.target_mask[i]:
                continue
            label = int(s.targets[i]) if s.target_mask[i] else -1
            out.append(PredictionRecord(tid, w, label, [float(p[i]) for p in probs]))
    return out


def _read_oracle(path: Path) -> dict[tuple[str, int], float]:
    with open(path, newline="") as fh:
        return {(r["trap_id"], int(r["week"])): float(r["probability"]) for r in csv.DictReader(fh)}


def _subset_filter(name: str, part: ConnectivityPartition):
    if name == "upper20":
        return lambda t: t in part.upper_set
    if name == "lower20":
        return lambda t: t in part.lower_set
    return lambda t: True


def _baseline_probs(data: WeeklyData, split: WeekSplit, horizon: int, allowed: set[str], records, seed: int,
                    regime: str, graph_kw: dict) -> np.ndarray:
    weeks = horizon_weeks(split.train, horizon, split.train[-1])
    samples = data.samples(weeks, horizon, regime, allowed=allowed, **graph_kw)
    x = np.concatenate([s.features[s.target_mask] for s in samples])
    y = np.concatenate([s.targets[s.target_mask] for s in samples])
    rows = [data.row_of[(r.trap_id, r.week)] for r in records]
    return logistic_baseline(x, y, data.fm.values[rows], seed=seed)


def cmd_evaluate(cfg: RunConfig) -> MetricsReport:
    paths = run_paths(cfg)
    data = WeeklyData(load_features(paths))
    split = split_weeks(data.weeks, cfg)
    part = trap_partition(data, cfg)
    last = data.weeks[-1]
    graph_kw = _graph_kwargs(cfg)
    seeds = cfg["train"]["seeds"]
    oracle = _read_oracle(paths.oracle) if paths.oracle.exists() else None
    threshold = cfg["eval"]["threshold"]
    report = MetricsReport()
    name = cfg["run"]["name"]
    for h in cfg["train"]["horizons"]:
        members = _load_members(paths, h, seeds)
        records = predict_records(data, horizon_weeks(split.evaluation, h, last), h, members, graph_kw)
        if not records:
            raise DataError(f"no labeled evaluation records at horizon {h}")
        labels = np.array([r.label for r in records])
        model_probs = {name: [np.array([r.probabilities[j] for r in records]) for j in range(len(seeds))]}
        if cfg["eval"]["baseline"]:
            allowed = training_traps(data, part, cfg["train"]["subset"])
            model_probs["logistic"] = [
                _baseline_probs(data, split, h, allowed, records, seed, members[0][2].get("regime", "supervised"), graph_kw)
                for seed in seeds]
        if oracle is not None:
            model_probs["oracle"] = [np.array([oracle[(r.trap_id, r.week + h)] for r in records])]
        for subset in cfg["eval"]["subsets"]:
            keep = np.array([_subset_filter(subset, part)(r.trap_id) for r in records])
            if not keep.any():
                log.warning("evaluation subset %s is empty at horizon %d", subset, h)
                continue
            for model, runs in model_probs.items():
                per_seed = [evaluate(p[keep], labels[keep], h, threshold) for p in runs]
                report.add(model, subset, average_metrics(per_seed))
    atomic_write(paths.metrics, report.to_csv())
    if cfg["eval"]["plot"]:
        report.plot(paths.out / "metrics_auc.png")
    _record_config(cfg)
    return report


def cmd_calibrate(cfg: RunConfig) -> None:
    paths = run_paths(cfg)
    data = WeeklyData(load_features(paths))
    split = split_weeks(data.weeks, cfg)
    last = data.weeks[-1]
    graph_kw = _graph_kwargs(cfg)
    lam = cfg["calibration"]["lambda"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trap_id", "week", "horizon", "split", "raw", "calibrated", "label"])
    for h in cfg["train"]["horizons"]:
        members = _load_members(paths, h, cfg["train"]["seeds"])
        calib = predict_records(data, horizon_weeks(split.calib, h, last), h, members, graph_kw)
        held = predict_records(data, split.evaluation, h, members, graph_kw, labeled_only=False)
        if not calib:
            raise DataError(f"calibration split has no labeled records at horizon {h}")
        raw_cal = ensemble_mean([np.array([r.probabilities[j] for r in calib]) for j in range(len(members))])
        predictor = CalibratedPredictor(fit_isotonic(raw_cal, [r.label for r in calib]), lam)
        for part_name, recs in (("calib", calib), ("eval", held)):
            if not recs:
                continue
            raw = ensemble_mean([np.array([r.probabilities[j] for r in recs]) for j in range(len(members))])
            cal = calibrate(raw, predictor)
            for r, pr, pc in zip(recs, np.atleast_1d(raw), np.atleast_1d(cal)):
                w.writerow([r.trap_id, r.week, h, part_name, repr(float(pr)), repr(float(pc)),
                            "" if r.label < 0 else r.label])
    atomic_write(paths.calibrated, buf.getvalue())
    _record_config(cfg)


def _node_entropies(path: Path) -> dict[str, float]:
    per_node_week: dict[tuple[str, int], list[float]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["split"] != "eval":
                continue
            per_node_week.setdefault((r["trap_id"], int(r["week"])), []).append(float(r["calibrated"]))
    per_node: dict[str, list[float]] = {}
    for (tid, _), ps in sorted(per_node_week.items()):
        per_node.setdefault(tid, []).append(node_entropy(ps))
    return {tid: float(np.mean(v)) for tid, v in per_node.items()}


def trap_indicators(fm: FeatureMatrix) -> dict[str, dict[str, int]]:
    """Per indicator column, trap -> 1 when the indicator is on in at least half the trap's rows."""
    groups = covariate_groups(fm.column_names)
    cols = [c for g in groups.values() for c in g]
    rows_by_trap: dict[str, list[int]] = {}
    for i, t in enumerate(fm.trap_ids):
        rows_by_trap.setdefault(t, []).append(i)
    out = {}
    for c in cols:
        j = fm.column_names.index(c)
        out[c] = {t: int(fm.values[rows, j].mean() >= 0.5) for t, rows in sorted(rows_by_trap.items())}
    return out


def cmd_entropy_report(cfg: RunConfig) -> None:
    paths = run_paths(cfg)
    fm = load_features(paths)
    if not paths.calibrated.exists():
        raise DataError(f"missing {paths.calibrated}; run calibrate first")
    runs = {cfg["train"]["subset"]: paths.calibrated}
    for item in cfg["entropy"]["extra_runs"]:
        if "=" not in item:
            raise DataError(f"entropy.extra_runs entry {item!r} must look like label=path")
        label, p = item.split("=", 1)
        runs[label.strip()] = cfg.resolve(p.strip())
    entropies = {label: _node_entropies(p) for label, p in runs.items()}
    rows = entropy_by_group(entropies, trap_indicators(fm))
    atomic_write(paths.entropy, entropy_csv(rows))
    _record_config(cfg)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
    "entropy-report": cmd_entropy_report,
}
PIPELINE = ("synth", "preprocess", "build-graph", "train", "evaluate", "calibrate", "entropy-report")
