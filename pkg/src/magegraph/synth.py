"""Seeded synthetic trap surveillance data with a known positivity probability.

The latent log-odds at trap s in week t is

    risk(s, t) = base + seasonal(t) + hotspots(s, t) + urban(s) + heat(s, t)

* ``seasonal``: annual sinusoid (52-week period)
* ``hotspots``: a few spatial Gaussian bumps whose amplitudes drift week to week
* ``urban``: a smooth urbanisation gradient that also drives imperviousness,
  canopy, land cover and road fractions
* ``heat``: hinge effect of the weekly median temperature above 72°F

Each trap also reports a noisy weekly proxy of its hotspot intensity
(``abundance_index``).  Own-trap readings are noisy; averaging neighbours
recovers the smooth field, which is what lets a graph model beat a per-trap
model on this data.  Labels are Bernoulli(logistic(risk)) exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from magegraph.errors import ParameterError
from magegraph.geo import pairwise_distances
from magegraph.features import ROAD_CLASSES

LANDCOVER_CLASSES = (
    "open_water", "open_space_developed", "low_developed", "medium_developed", "high_developed",
    "deciduous_forest", "grassland_herbaceous", "pasture_hay", "cultivated_crops", "woody_wetlands",
)
LAT_RANGE = (41.60, 42.10)
LON_RANGE = (-88.10, -87.50)
CITY_CENTER = (41.88, -87.63)
DAYS_PER_WEEK = 7


@dataclass
class SyntheticWorld:
    trap_ids: list[str]
    positions: np.ndarray  # (n, 2) lat/lon
    probability: np.ndarray  # (n, weeks) logistic(risk)
    labels: np.ndarray  # (n, weeks) in {0, 1}
    checked: np.ndarray  # (n, weeks) bool
    tmean: np.ndarray  # (n, weeks, 7) °F
    precip: np.ndarray  # (n, weeks, 7) mm
    abundance: np.ndarray  # (n, weeks)
    canopy_pct: np.ndarray
    impervious_pct: np.ndarray
    landcover: np.ndarray  # (n, classes)
    roads: np.ndarray  # (n, 4)

    @property
    def n_traps(self) -> int:
        return len(self.trap_ids)

    @property
    def n_weeks(self) -> int:
        return self.probability.shape[1]

    def header(self) -> list[str]:
        cols = ["trap_id", "lat", "lon", "week", "label"]
        cols += [f"tmean_{d + 1}" for d in range(DAYS_PER_WEEK)]
        cols += [f"precip_{d + 1}" for d in range(DAYS_PER_WEEK)]
        cols += ["canopy_pct", "impervious_pct"]
        cols += [f"lc_{c}" for c in LANDCOVER_CLASSES]
        cols += [f"road_{r}" for r in ROAD_CLASSES]
        cols += ["abundance_index"]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for t in range(self.n_weeks):
            for i, tid in enumerate(self.trap_ids):
                label = str(int(self.labels[i, t])) if self.checked[i, t] else ""
                row = [tid, f"{self.positions[i, 0]:.6f}", f"{self.positions[i, 1]:.6f}", t, label]
                row += [f"{v:.3f}" for v in self.tmean[i, t]]
                row += [f"{v:.3f}" for v in self.precip[i, t]]
                row += [f"{self.canopy_pct[i]:.3f}", f"{self.impervious_pct[i]:.3f}"]
                row += [f"{v:.4f}" for v in self.landcover[i]]
                row += [f"{v:.4f}" for v in self.roads[i]]
                row += [f"{self.abundance[i, t]:.4f}"]
                w.writerow(row)
        return buf.getvalue()

    def oracle_csv(self) -> str:
        buf = io.StringIO()
        buf.write("trap_id,week,probability\n")
        for t in range(self.n_weeks):
            for i, tid in enumerate(self.trap_ids):
                buf.write(f"{tid},{t},{float(self.probability[i, t])!r}\n")
        return buf.getvalue()


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate(seed: int, n_traps: int = 200, n_weeks: int = 150, missing_rate: float = 0.2) -> SyntheticWorld:
    if n_traps < 2 or n_weeks < 1 or not 0.0 <= missing_rate < 1.0:
        raise ParameterError("need n_traps >= 2, n_weeks >= 1 and missing_rate in [0, 1)")
    rng = np.random.default_rng(seed)
    lat = rng.uniform(*LAT_RANGE, size=n_traps).round(6)
    lon = rng.uniform(*LON_RANGE, size=n_traps).round(6)
    pos = np.c_[lat, lon]
    ids = [f"T{i:04d}" for i in range(n_traps)]

    # urbanisation decays with distance from the city centre
    d_city = pairwise_distances(pos, np.array([CITY_CENTER]))[:, 0]
    urban = np.exp(-d_city / 18.0)
    impervious = np.clip(100 * urban + rng.normal(0, 12, n_traps), 0, 100)
    canopy = np.clip(55 - 45 * urban + rng.normal(0, 12, n_traps), 0, 100)
    lc_raw = rng.gamma(0.6, 1.0, size=(n_traps, len(LANDCOVER_CLASSES)))
    lc_raw[:, 1:5] *= (0.3 + 2.5 * urban)[:, None]
    lc_raw[:, 5:] *= (1.8 - 1.5 * urban)[:, None]
    landcover = lc_raw / lc_raw.sum(axis=1, keepdims=True)
    roads = np.clip(rng.beta(1.2, 8, size=(n_traps, len(ROAD_CLASSES))) * (0.5 + urban)[:, None], 0, 1)

    # drifting hotspots
    n_bumps = 7
    centers = np.c_[rng.uniform(*LAT_RANGE, n_bumps), rng.uniform(*LON_RANGE, n_bumps)]
    scale_km = rng.uniform(5.0, 10.0, n_bumps)
    amp = rng.uniform(1.2, 2.4, n_bumps) * rng.choice([-1.0, 1.0], n_bumps, p=[0.3, 0.7])
    period = rng.uniform(8.0, 30.0, n_bumps)
    phase = rng.uniform(0, 2 * np.pi, n_bumps)
    kernel = np.exp(-0.5 * (pairwise_distances(pos, centers) / scale_km) ** 2)  # (n, bumps)
    weeks = np.arange(n_weeks)
    drift = 1.0 + 0.6 * np.sin(2 * np.pi * weeks[:, None] / period + phase)  # (weeks, bumps)
    hotspots = kernel @ (amp[:, None] * drift.T)  # (n, weeks)

    seasonal_wave = np.sin(2 * np.pi * (weeks - 13) / 52.0)
    weekly_anom = rng.normal(0, 3.0, n_weeks)
    temp_week = 68 + 14 * seasonal_wave + weekly_anom
    tmean = temp_week[None, :, None] + 2.0 * urban[:, None, None] + rng.normal(0, 4.0, (n_traps, n_weeks, DAYS_PER_WEEK))
    precip = rng.gamma(0.5, 6.0, (n_traps, n_weeks, DAYS_PER_WEEK)) * (rng.random((1, n_weeks, DAYS_PER_WEEK)) < 0.4)
    median_temp = np.median(tmean, axis=2)

    risk = -1.6 + 1.0 * seasonal_wave[None, :] + 1.8 * hotspots + 1.2 * urban[:, None] \
        + 0.6 * np.maximum(median_temp - 72.0, 0.0) / 5.0
    prob = _logistic(risk)
    labels = (rng.random((n_traps, n_weeks)) < prob).astype(np.int64)
    checked = rng.random((n_traps, n_weeks)) >= missing_rate
    abundance = hotspots + rng.normal(0, 2.0, (n_traps, n_weeks))
    return SyntheticWorld(ids, pos, prob, labels, checked, tmean, precip, abundance, canopy, impervious,
                          landcover, roads)
