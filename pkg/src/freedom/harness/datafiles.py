"""On-disk layout of generated scenarios.

A data directory holds the trainer-visible arrays at its top level and the
evaluation-only oracle under ``oracle/``::

    source_x.npy  source_y.npy  source_test_x.npy  source_test_y.npy  target_x.npy
    oracle/target_y.npy  oracle/source_styles.npy  oracle/source_test_styles.npy
    oracle/meta.json
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import ConfigError, parse_key_values, typed_values
from . import synthetic
from .synthetic import Scenario

SOURCE_FILES = ("source_x.npy", "source_y.npy")


class DataError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    """Keys accepted in a ``gen-data`` spec file."""

    preset: str = "separable3"
    seed: int = 0
    n_domains: int = 0          # 0 keeps the preset's own count
    samples_per_cell: int = 0   # 0 keeps the preset default
    target_samples_per_class: int = 0
    holdout_fraction: float = -1.0

    def build(self) -> synthetic.SyntheticSpec:
        if self.preset not in synthetic.PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {synthetic.PRESETS}")
        spec = synthetic.preset(self.preset, self.seed, self.n_domains or None)
        if self.samples_per_cell:
            spec.samples_per_cell = self.samples_per_cell
        if self.target_samples_per_class:
            spec.target_samples_per_class = self.target_samples_per_class
        if self.holdout_fraction >= 0:
            spec.holdout_fraction = self.holdout_fraction
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return spec


SCENARIO_KEYS = tuple(ScenarioConfig.__dataclass_fields__)


def scenario_config(raw: dict[str, str]) -> ScenarioConfig:
    return ScenarioConfig(**typed_values(raw, ScenarioConfig()))


def load_scenario_config(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from None
    return scenario_config(parse_key_values(text))


def save_scenario(out: str | Path, sc: Scenario) -> Path:
    out = Path(out)
    (out / "oracle").mkdir(parents=True, exist_ok=True)
    np.save(out / "source_x.npy", sc.source_x)
    np.save(out / "source_y.npy", sc.source_y)
    np.save(out / "source_test_x.npy", sc.source_test_x)
    np.save(out / "source_test_y.npy", sc.source_test_y)
    np.save(out / "target_x.npy", sc.target_x)
    o = sc.oracle
    np.save(out / "oracle" / "target_y.npy", o["target_y"])
    np.save(out / "oracle" / "source_styles.npy", o["source_styles"])
    np.save(out / "oracle" / "source_test_styles.npy", o["source_test_styles"])
    meta = {"n_latent_styles": o["n_latent_styles"], "n_domains": o["n_domains"],
            "source_domains": o["source_domains"].tolist()}
    (out / "oracle" / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return out


def load_matrix(path: str | Path) -> np.ndarray:
    a = _load(path, ndmin=2)
    if a.ndim != 2 or not np.issubdtype(a.dtype, np.number):
        raise DataError(f"{path}: expected a numeric N x D matrix, got shape {a.shape}")
    a = a.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise DataError(f"{path}: contains non-finite values")
    return a


def load_labels(path: str | Path) -> np.ndarray:
    a = _load(path)
    if np.issubdtype(a.dtype, np.floating) and np.all(a == np.round(a)):
        a = a.astype(np.int64)
    if a.ndim != 1 or not np.issubdtype(a.dtype, np.integer) or (a.size and a.min() < 0):
        raise DataError(f"{path}: expected a vector of non-negative integer labels")
    return a.astype(np.int64)


def _load(path: str | Path, ndmin: int = 1) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix == ".csv":
            return np.loadtxt(path, delimiter=",", ndmin=ndmin)
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def load_source_pool(data_dir: str | Path) -> tuple[np.ndarray, np.ndarray]:
    d = Path(data_dir)
    x, y = load_matrix(d / SOURCE_FILES[0]), load_labels(d / SOURCE_FILES[1])
    if len(x) != len(y):
        raise DataError(f"{d}: {len(x)} source inputs but {len(y)} labels")
    return x, y
