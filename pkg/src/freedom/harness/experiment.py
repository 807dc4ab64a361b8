"""End-to-end pipeline: generate data, train on the source pool, adapt to the
target pool, evaluate. Every stage reads its inputs from disk, so stages can
be rerun individually and the adaptation stage only ever touches the source
checkpoint and the target file."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import (ConfigError, ExperimentConfig, config_from_text, config_to_text,
                      parse_key_values)
from ..model import classify
from ..source import LabeledPool, NumericalError, SourceTrainer, build_model
from ..target import TargetAdapter
from . import checkpoint as ckpt
from .datafiles import (
    DataError,
    ScenarioConfig,
    SCENARIO_KEYS,
    load_labels,
    load_matrix,
    load_source_pool,
    save_scenario,
    scenario_config,
)
from .metrics import MetricsRow, write_metrics, write_summary
from .synthetic import generate

STAGES = ("gen", "train-source", "adapt-target", "eval")
SEED_ENV = "FREEDOM_SEED"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, code: int):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.code = code


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exc.code
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, ckpt.CheckpointError, FileNotFoundError)):
        return EXIT_DATA
    raise exc


def resolve_seed(cli_seed: int | None, file_seed: int | None) -> int:
    """``--seed`` beats the config file's ``seed``, which beats the environment."""
    if cli_seed is not None:
        return cli_seed
    if file_seed is not None:
        return file_seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def load_run_config(path: str | Path, cli_seed: int | None = None
                    ) -> tuple[ExperimentConfig, ScenarioConfig]:
    """Experiment keys plus the scenario keys of a ``gen-data`` spec."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg, extra = config_from_text(text, allow_extra=True)
    unknown = sorted(set(extra) - set(SCENARIO_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    has_seed = "seed" in parse_key_values(text)
    seed = resolve_seed(cli_seed, cfg.seed if has_seed else None)
    scenario = scenario_config(extra)
    scenario.seed = seed
    return cfg.replace(seed=seed), scenario


@dataclass
class RunPaths:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def source_ckpt(self) -> Path:
        return self.root / "source.frdm"

    @property
    def adapted_ckpt(self) -> Path:
        return self.root / "adapted.frdm"

    @property
    def deployed_ckpt(self) -> Path:
        return self.root / "deployed.frdm"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def summary(self) -> Path:
        return self.root / "summary.json"


def _accuracy(model, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) != len(y):
        raise DataError(f"{len(x)} inputs but {len(y)} labels")
    return float(np.mean(np.argmax(classify(model, x), axis=1) == y))


def evaluate(model, x: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax predictions equal to ``labels``."""
    return _accuracy(model, np.asarray(x, dtype=np.float64), np.asarray(labels))


def _rows(log_rows: list[dict]) -> list[MetricsRow]:
    return [MetricsRow.from_log_row({k: v for k, v in r.items() if k != "wall"}) for r in log_rows]


def stage_gen(paths: RunPaths, scenario: ScenarioConfig) -> None:
    save_scenario(paths.data, generate(scenario.build()))


def stage_train_source(paths: RunPaths, cfg: ExperimentConfig) -> SourceTrainer:
    x, y = load_source_pool(paths.data)
    rng = np.random.default_rng(cfg.seed)
    pool = LabeledPool(x, y)
    trainer = SourceTrainer(build_model(x.shape[1], int(y.max()) + 1, cfg, rng), pool, cfg, rng)
    trainer.run()
    ckpt.save_source_checkpoint(paths.source_ckpt, trainer)
    return trainer


def stage_adapt_target(paths: RunPaths, cfg: ExperimentConfig) -> TargetAdapter:
    if not paths.source_ckpt.exists():
        raise StageError("adapt-target", f"source checkpoint missing: {paths.source_ckpt}", EXIT_DATA)
    model, _ = ckpt.load_source_model(paths.source_ckpt)
    target_x = load_matrix(paths.data / "target_x.npy")
    adapter = TargetAdapter(model, target_x, cfg, np.random.default_rng(cfg.seed + 1))
    adapter.run()
    ckpt.save_adapter_checkpoint(paths.adapted_ckpt, adapter)
    ckpt.save_deployed(paths.deployed_ckpt, adapter.deployed(), cfg.to_dict())
    return adapter


def stage_eval(paths: RunPaths, cfg: ExperimentConfig) -> dict:
    for p, what in ((paths.source_ckpt, "source"), (paths.deployed_ckpt, "deployed")):
        if not p.exists():
            raise StageError("eval", f"{what} checkpoint missing: {p}", EXIT_DATA)
    source, meta = ckpt.load_source_model(paths.source_ckpt)
    _, adapted_meta = ckpt.load_arrays(paths.adapted_ckpt)
    deployed = ckpt.load_deployed(paths.deployed_ckpt)
    target_x = load_matrix(paths.data / "target_x.npy")
    target_y = load_labels(paths.data / "oracle" / "target_y.npy")
    test_x = load_matrix(paths.data / "source_test_x.npy")
    test_y = load_labels(paths.data / "source_test_y.npy")
    n_classes = source.classifier.out_dim
    adapt_log = adapted_meta["log"]
    ratios = [r["ratio"] for r in adapt_log["rows"]]
    source_rows = meta["log"]["rows"]
    record = {
        "config": cfg.to_dict(),
        "chance": 1.0 / n_classes,
        "source_test_acc": evaluate(source, test_x, test_y),
        "baseline_target_acc": evaluate(source, target_x, target_y),
        "adapted_target_acc": evaluate(deployed, target_x, target_y),
        "regime": adapt_log["regime"],
        "initial_ratio": adapt_log["initial_ratio"],
        "first_epoch_ratio": ratios[0] if ratios else None,
        "final_epoch_ratio": ratios[-1] if ratios else None,
        "source_dpm_components": source_rows[-1].get("dpm_components") if source_rows else None,
        "deployed_parameters": deployed.num_parameters(),
        "skipped_class_epochs": adapt_log["skipped_class_epochs"],
    }
    record["gain"] = record["adapted_target_acc"] - record["baseline_target_acc"]
    rows = _rows(source_rows) + _rows(adapt_log["rows"])
    write_metrics(paths.metrics, rows)
    write_summary(paths.summary, _json_safe(record))
    return record


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


@dataclass
class RunResult:
    status: int
    stage: str | None = None
    message: str = ""
    record: dict | None = None


def run_experiment(config_path: str | Path, out_dir: str | Path, *, seed: int | None = None,
                   stages: tuple[str, ...] = STAGES) -> RunResult:
    """Run the requested stages in order. A failure stops the run and is
    reported with the failing stage's name and a nonzero status."""
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ValueError(f"unknown stages {bad}; choose from {STAGES}")
    paths = RunPaths(Path(out_dir))
    stage = "config"
    record = None
    try:
        cfg, scenario = load_run_config(config_path, seed)
        paths.root.mkdir(parents=True, exist_ok=True)
        (paths.root / "config.txt").write_text(config_to_text(cfg) + config_to_text(scenario))
        for stage in (s for s in STAGES if s in stages):
            if stage == "gen":
                stage_gen(paths, scenario)
            elif stage == "train-source":
                stage_train_source(paths, cfg)
            elif stage == "adapt-target":
                stage_adapt_target(paths, cfg)
            else:
                record = stage_eval(paths, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit status
        code = exit_code(exc)
        message = str(exc) if isinstance(exc, StageError) else f"{stage}: {exc}"
        return RunResult(code, stage, message, record)
    return RunResult(EXIT_OK, None, "", record)
