"""Run configuration: an INI file with a fixed schema; unknown sections or keys are errors."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from magegraph.errors import ParameterError


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "run": {
        "output_dir": (str, "run"),
        "name": (str, "graphmage"),
    },
    "synth": {
        "seed": (int, "0"),
        "n_traps": (int, "200"),
        "n_weeks": (int, "150"),
        "missing_rate": (float, "0.2"),
    },
    "data": {
        "raw_csv": (str, ""),
        "oracle_csv": (str, ""),
        "train_fraction": (float, "0.7"),
    },
    "graph": {
        "k": (int, "10"),
        "radius_km": (float, "50"),
        "aggregator": (str, "mean"),
    },
    "model": {
        "variant": (str, "graphmage"),
        "num_layers": (int, "4"),
        "width": (int, "128"),
        "dropout": (float, "0.2"),
    },
    "train": {
        "horizons": (_ints, "0,1,2,3,4,5,6,7"),
        "seeds": (_ints, "1"),
        "epochs": (int, "200"),
        "base_lr": (float, "0.001"),
        "min_lr": (float, "0.00001"),
        "weight_decay": (float, "0.0001"),
        "agc_lambda": (float, "0.01"),
        "patience": (int, "20"),
        "val_fraction": (float, "0.15"),
        "regime": (str, "supervised"),
        "subset": (str, "all"),
    },
    "eval": {
        "subsets": (_strs, "all,upper20,lower20"),
        "threshold": (float, "0.5"),
        "baseline": (_bool, "true"),
        "plot": (_bool, "false"),
    },
    "calibration": {
        "lambda": (float, "0.5"),
        "calib_fraction": (float, "0.2"),
    },
    "entropy": {
        "extra_runs": (_strs, ""),
    },
}

CHOICES = {
    ("train", "regime"): ("supervised", "semi-supervised"),
    ("train", "subset"): ("all", "upper80", "lower80"),
    ("graph", "aggregator"): ("mean", "inverse-distance"),
    ("model", "variant"): ("graphmage", "graphsage", "resgcn-over-mage", "resgcn-over-sage"),
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    raw: dict[str, dict[str, str]]
    base_dir: Path

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.values["run"]["output_dir"])

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section in SCHEMA:
            cp[section] = {k: self.raw[section][k] for k in SCHEMA[section]}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def parse_config(text: str, overrides: list[str] | None = None, base_dir: Path | str = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParameterError(f"config: {exc}") from None
    raw = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ParameterError(f"config: unknown section [{section}]")
        for key, value in cp[section].items():
            if key not in SCHEMA[section]:
                raise ParameterError(f"config: unknown key {section}.{key}")
            raw[section][key] = value
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ParameterError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ParameterError(f"override: unknown key {dotted}")
        raw[section][key] = value
    values: dict[str, dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, _) in keys.items():
            try:
                values[section][key] = parse(raw[section][key])
            except ValueError as exc:
                raise ParameterError(f"config: bad value for {section}.{key}: {exc}") from None
    for (section, key), allowed in CHOICES.items():
        if values[section][key] not in allowed:
            raise ParameterError(f"config: {section}.{key} must be one of {', '.join(allowed)}")
    for s in values["eval"]["subsets"]:
        if s not in ("all", "upper20", "lower20"):
            raise ParameterError(f"config: unknown evaluation subset {s!r}")
    if not 0 < values["data"]["train_fraction"] < 1:
        raise ParameterError("config: data.train_fraction must lie in (0, 1)")
    if not 0 < values["calibration"]["calib_fraction"] < 1:
        raise ParameterError("config: calibration.calib_fraction must lie in (0, 1)")
    if not values["train"]["seeds"] or not values["train"]["horizons"]:
        raise ParameterError("config: train.seeds and train.horizons must be nonempty")
    return RunConfig(values, raw, Path(base_dir))


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), overrides, path.parent)
