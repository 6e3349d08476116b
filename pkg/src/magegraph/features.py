"""Covariate preprocessing: raw per-trap table -> fixed-order numeric features.

Input CSV layout (one row per trap-week)::

    trap_id,lat,lon,week,label,tmean_1..tmean_N,precip_1..precip_N,
    canopy_pct,impervious_pct,lc_<class>...,road_primary,road_secondary,
    road_tertiary,road_nonroad,<other numeric columns>

``label`` is blank for an unchecked trap.  Output columns, in order:

    canopy_{low,medium,high}, impervious_{low,medium,high}, lc_<class>...,
    road_{primary,secondary,tertiary,nonroad}, temp_q{10,25,50,75,90},
    heating_days, cooling_days, precip_total (when precip_* present),
    <other numeric columns>

Everything from ``temp_q10`` onward is continuous and gets standardized with
statistics from training weeks only.

Degree days follow the source data's convention, which is the reverse of the
HVAC one: a *heating* day has mean temperature above 65°F and a *cooling* day
below it.  Days at exactly 65°F count as neither.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from magegraph.errors import DataError
from magegraph.geo import validate_coordinates

KEY_COLUMNS = ("trap_id", "lat", "lon", "week", "label")
ROAD_CLASSES = ("primary", "secondary", "tertiary", "nonroad")
TEMP_QUANTILES = (10, 25, 50, 75, 90)
DEGREE_DAY_BASE_F = 65.0
LANDCOVER_THRESHOLD = 0.15
ROAD_THRESHOLD = 0.10
SCALER_FORMAT_VERSION = 1


def _check_pct(pct: float, what: str) -> None:
    if not (math.isfinite(pct) and 0.0 <= pct <= 100.0):
        raise DataError(f"{what} {pct} outside [0, 100]")


def _three_bins(pct: float, low_cut: float, high_cut: float) -> tuple[int, int, int]:
    if pct < low_cut:
        return (1, 0, 0)
    if pct <= high_cut:
        return (0, 1, 0)
    return (0, 0, 1)


def bin_canopy(pct: float) -> tuple[int, int, int]:
    """One-hot (low, medium, high): <20, [20, 50], >50 percent tree canopy."""
    _check_pct(pct, "canopy_pct")
    return _three_bins(pct, 20.0, 50.0)


def bin_imperviousness(pct: float) -> tuple[int, int, int]:
    """One-hot (low, medium, high): <33, [33, 67], >67 percent impervious surface."""
    _check_pct(pct, "impervious_pct")
    return _three_bins(pct, 33.0, 67.0)


def _indicators(fractions: dict[str, float], threshold: float) -> dict[str, int]:
    out = {}
    for name, frac in fractions.items():
        if not (math.isfinite(frac) and 0.0 <= frac <= 1.0):
            raise DataError(f"fraction {name}={frac} outside [0, 1]")
        out[name] = int(frac > threshold)
    return out


def landcover_indicators(fractions: dict[str, float]) -> dict[str, int]:
    return _indicators(fractions, LANDCOVER_THRESHOLD)


def road_indicators(fractions: dict[str, float]) -> dict[str, int]:
    return _indicators(fractions, ROAD_THRESHOLD)


def temperature_quantiles(daily_means: Sequence[float]) -> tuple[float, ...]:
    temps = np.asarray(daily_means, dtype=np.float64)
    if temps.size == 0:
        raise DataError("temperature window is empty")
    if not np.all(np.isfinite(temps)):
        raise DataError("temperature window contains non-finite values")
    return tuple(float(q) for q in np.percentile(temps, TEMP_QUANTILES))


def degree_day_counts(daily_means: Sequence[float]) -> tuple[int, int]:
    """(heating_days, cooling_days) with heating = mean above 65°F, cooling = below."""
    temps = np.asarray(daily_means, dtype=np.float64)
    if temps.size == 0:
        raise DataError("temperature window is empty")
    return int(np.sum(temps > DEGREE_DAY_BASE_F)), int(np.sum(temps < DEGREE_DAY_BASE_F))


@dataclass
class RawRow:
    trap_id: str
    lat: float
    lon: float
    week: int
    label: int | None
    tmean: list[float]
    precip: list[float]
    canopy_pct: float
    impervious_pct: float
    landcover: dict[str, float]
    roads: dict[str, float]
    extra: dict[str, float] = field(default_factory=dict)


@dataclass
class RawTable:
    header: list[str]
    rows: list[RawRow]

    @property
    def landcover_classes(self) -> list[str]:
        return [c[3:] for c in self.header if c.startswith("lc_")]

    @property
    def extra_columns(self) -> list[str]:
        return [c for c in self.header if _column_kind(c) == "extra"]

    @property
    def has_precip(self) -> bool:
        return any(c.startswith("precip_") for c in self.header)


def _column_kind(col: str) -> str:
    if col in KEY_COLUMNS:
        return "key"
    if col.startswith("tmean_"):
        return "tmean"
    if col.startswith("precip_"):
        return "precip"
    if col in ("canopy_pct", "impervious_pct"):
        return "pct"
    if col.startswith("lc_"):
        return "lc"
    if col.startswith("road_"):
        return "road"
    return "extra"


class TableValidationError(DataError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__(f"{len(problems)} invalid row(s):\n" + "\n".join(problems))


def _num(value: str, col: str) -> float:
    if value is None or value.strip() == "":
        raise DataError(f"missing value in column {col}")
    try:
        x = float(value)
    except ValueError:
        raise DataError(f"non-numeric value {value!r} in column {col}") from None
    if not math.isfinite(x):
        raise DataError(f"non-finite value in column {col}")
    return x


def parse_row(rec: dict[str, str], header: Sequence[str]) -> RawRow:
    label_txt = (rec.get("label") or "").strip()
    if label_txt == "":
        label = None
    elif label_txt in ("0", "1"):
        label = int(label_txt)
    else:
        raise DataError(f"label {label_txt!r} is not 0, 1 or blank")
    lat, lon = _num(rec["lat"], "lat"), _num(rec["lon"], "lon")
    validate_coordinates(lat, lon)
    week_f = _num(rec["week"], "week")
    if week_f != int(week_f):
        raise DataError(f"week {week_f} is not an integer")
    trap_id = (rec.get("trap_id") or "").strip()
    if not trap_id:
        raise DataError("empty trap_id")
    tmean = [_num(rec[c], c) for c in header if c.startswith("tmean_")]
    if not tmean:
        raise DataError("temperature window is empty")
    precip = [_num(rec[c], c) for c in header if c.startswith("precip_")]
    if any(p < 0 for p in precip):
        raise DataError("negative precipitation")
    canopy = _num(rec["canopy_pct"], "canopy_pct")
    imperv = _num(rec["impervious_pct"], "impervious_pct")
    _check_pct(canopy, "canopy_pct")
    _check_pct(imperv, "impervious_pct")
    lc = {c[3:]: _num(rec[c], c) for c in header if c.startswith("lc_")}
    roads = {r: _num(rec[f"road_{r}"], f"road_{r}") for r in ROAD_CLASSES}
    for name, frac in list(lc.items()) + list(roads.items()):
        if not 0.0 <= frac <= 1.0:
            raise DataError(f"fraction {name}={frac} outside [0, 1]")
    extra = {c: _num(rec[c], c) for c in header if _column_kind(c) == "extra"}
    return RawRow(trap_id, lat, lon, int(week_f), label, tmean, precip, canopy, imperv, lc, roads, extra)


def read_raw_table(text_or_handle) -> RawTable:
    """Parse and validate the raw covariate CSV, collecting every bad row before failing."""
    handle = io.StringIO(text_or_handle) if isinstance(text_or_handle, str) else text_or_handle
    reader = csv.DictReader(handle)
    header = list(reader.fieldnames or [])
    missing = [c for c in KEY_COLUMNS + ("canopy_pct", "impervious_pct") if c not in header]
    missing += [f"road_{r}" for r in ROAD_CLASSES if f"road_{r}" not in header]
    if not any(c.startswith("tmean_") for c in header):
        missing.append("tmean_*")
    if missing:
        raise TableValidationError([f"header: missing column(s) {', '.join(missing)}"])
    rows, problems = [], []
    seen: set[tuple[str, int]] = set()
    positions: dict[str, tuple[float, float]] = {}
    for lineno, rec in enumerate(reader, start=2):
        try:
            row = parse_row(rec, header)
            key = (row.trap_id, row.week)
            if key in seen:
                raise DataError(f"duplicate (trap_id, week) = {key}")
            seen.add(key)
            prev = positions.setdefault(row.trap_id, (row.lat, row.lon))
            if prev != (row.lat, row.lon):
                raise DataError(f"trap {row.trap_id} moved from {prev} to {(row.lat, row.lon)}")
            rows.append(row)
        except DataError as exc:
            problems.append(f"row {lineno} (trap_id={rec.get('trap_id')!s}): {exc}")
    by_pos: dict[tuple[float, float], str] = {}
    for tid, pos in positions.items():
        other = by_pos.setdefault(pos, tid)
        if other != tid:
            problems.append(f"traps {other} and {tid} share coordinates {pos}")
    if problems:
        raise TableValidationError(problems)
    return RawTable(header, rows)


def feature_columns(table: RawTable) -> tuple[list[str], list[str]]:
    """(all output columns, continuous subset) for a table's schema."""
    cols = ["canopy_low", "canopy_medium", "canopy_high", "impervious_low", "impervious_medium", "impervious_high"]
    cols += [f"lc_{c}" for c in table.landcover_classes]
    cols += [f"road_{r}" for r in ROAD_CLASSES]
    continuous = [f"temp_q{q}" for q in TEMP_QUANTILES] + ["heating_days", "cooling_days"]
    if table.has_precip:
        continuous.append("precip_total")
    continuous += table.extra_columns
    return cols + continuous, continuous


def row_features(row: RawRow, table: RawTable) -> list[float]:
    vec: list[float] = []
    vec += bin_canopy(row.canopy_pct)
    vec += bin_imperviousness(row.impervious_pct)
    lc = landcover_indicators(row.landcover)
    vec += [lc[c] for c in table.landcover_classes]
    rd = road_indicators(row.roads)
    vec += [rd[r] for r in ROAD_CLASSES]
    vec += temperature_quantiles(row.tmean)
    vec += degree_day_counts(row.tmean)
    if table.has_precip:
        vec.append(float(np.sum(row.precip)))
    vec += [row.extra[c] for c in table.extra_columns]
    return [float(v) for v in vec]


@dataclass
class Scaler:
    columns: list[str]
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray, column_names: Sequence[str]) -> np.ndarray:
        out = values.copy()
        for j, col in enumerate(self.columns):
            k = list(column_names).index(col)
            out[:, k] = (out[:, k] - self.mean[j]) / self.std[j]
        return out

    def dumps(self) -> str:
        lines = [f"format_version={SCALER_FORMAT_VERSION}", "column,mean,std"]
        lines += [f"{c},{m!r},{s!r}" for c, m, s in zip(self.columns, self.mean.tolist(), self.std.tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> Scaler:
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != f"format_version={SCALER_FORMAT_VERSION}":
            raise DataError("scaler file: unsupported or missing format_version")
        cols, means, stds = [], [], []
        for line in lines[2:]:
            c, m, s = line.split(",")
            cols.append(c)
            means.append(float(m))
            stds.append(float(s))
        return cls(cols, np.array(means), np.array(stds))


def fit_scaler(values: np.ndarray, column_names: Sequence[str], continuous: Sequence[str],
               train_rows: np.ndarray) -> Scaler:
    """Column mean/std over training rows; a zero std is replaced by 1."""
    idx = [list(column_names).index(c) for c in continuous]
    train = values[np.asarray(train_rows, dtype=bool)][:, idx]
    if train.shape[0] == 0:
        mean = np.zeros(len(idx))
        std = np.ones(len(idx))
    else:
        mean = train.mean(axis=0)
        std = train.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    return Scaler(list(continuous), mean, std)


@dataclass
class FeatureMatrix:
    column_names: list[str]
    trap_ids: list[str]
    weeks: np.ndarray
    lats: np.ndarray
    lons: np.ndarray
    labels: np.ndarray  # -1 marks unchecked
    values: np.ndarray

    @property
    def num_rows(self) -> int:
        return len(self.trap_ids)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(KEY_COLUMNS) + self.column_names)
        for i in range(self.num_rows):
            label = "" if self.labels[i] < 0 else str(int(self.labels[i]))
            w.writerow([self.trap_ids[i], repr(float(self.lats[i])), repr(float(self.lons[i])),
                        int(self.weeks[i]), label] + [repr(float(v)) for v in self.values[i]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text_or_handle) -> FeatureMatrix:
        handle = io.StringIO(text_or_handle) if isinstance(text_or_handle, str) else text_or_handle
        reader = csv.reader(handle)
        header = next(reader)
        if tuple(header[:5]) != KEY_COLUMNS:
            raise DataError(f"feature file header must start with {','.join(KEY_COLUMNS)}")
        cols = header[5:]
        ids, weeks, lats, lons, labels, vals = [], [], [], [], [], []
        for rec in reader:
            ids.append(rec[0])
            lats.append(float(rec[1]))
            lons.append(float(rec[2]))
            weeks.append(int(rec[3]))
            labels.append(-1 if rec[4] == "" else int(rec[4]))
            vals.append([float(v) for v in rec[5:]])
        values = np.array(vals, dtype=np.float64).reshape(len(ids), len(cols))
        return cls(cols, ids, np.array(weeks, dtype=np.int64), np.array(lats), np.array(lons),
                   np.array(labels, dtype=np.int64), values)


def assemble_features(table: RawTable, train_weeks: Iterable[int] | None = None,
                      scaler: Scaler | None = None) -> tuple[FeatureMatrix, Scaler]:
    """Build the feature matrix and standardize continuous columns.

    The scaler is fit on rows whose week is in ``train_weeks`` (all rows when
    None) unless a previously fit ``scaler`` is supplied.
    """
    cols, continuous = feature_columns(table)
    raw = np.array([row_features(r, table) for r in table.rows], dtype=np.float64).reshape(len(table.rows), len(cols))
    weeks = np.array([r.week for r in table.rows], dtype=np.int64)
    if scaler is None:
        train_mask = np.ones(len(weeks), dtype=bool) if train_weeks is None else np.isin(weeks, list(train_weeks))
        scaler = fit_scaler(raw, cols, continuous, train_mask)
    values = scaler.transform(raw, cols) if len(table.rows) else raw
    fm = FeatureMatrix(
        cols,
        [r.trap_id for r in table.rows],
        weeks,
        np.array([r.lat for r in table.rows], dtype=np.float64),
        np.array([r.lon for r in table.rows], dtype=np.float64),
        np.array([-1 if r.label is None else r.label for r in table.rows], dtype=np.int64),
        values,
    )
    return fm, scaler


def covariate_groups(column_names: Sequence[str]) -> dict[str, list[str]]:
    """Indicator columns grouped the way entropy reports present them."""
    groups: dict[str, list[str]] = {"canopy": [], "imperviousness": [], "land_use": [], "roads": []}
    for c in column_names:
        if c.startswith("canopy_"):
            groups["canopy"].append(c)
        elif c.startswith("impervious_"):
            groups["imperviousness"].append(c)
        elif c.startswith("lc_"):
            groups["land_use"].append(c)
        elif c.startswith("road_"):
            groups["roads"].append(c)
    return groups
