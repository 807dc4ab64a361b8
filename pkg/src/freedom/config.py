"""Experiment configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .model import ENCODER_HEADS


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    # network sizes; input dimension and class count come from the data
    class_dim: int = 4
    style_dim: int = 4
    hidden: int = 32
    class_head: str = "identity"
    style_head: str = "tanh-mean"
    # source side
    beta_low: float = 0.1
    beta_high: float = 5.0
    label_smoothing: float = 0.15
    epochs: int = 30
    pretrain_epochs: int = 5
    pretrain_style_helper: bool = False
    symmetric_alternation: bool = False
    batch_size: int = 64
    lr: float = 1e-3
    adam_beta1: float = 0.5
    adam_beta2: float = 0.99
    lr_decay: float = 0.9
    lr_decay_epochs: int = 10
    # style prior
    dpm_T: int = 10
    dpm_gamma: float = 1.0
    dpm_max_iters: int = 200
    dpm_tol: float = 1e-4
    dpm_n_init: int = 3
    dpm_warm_start: bool = False
    # target side
    adapt_lr: float = 5e-4
    warmup_epochs: int = 3
    adapt_epochs: int = 20
    confidence_level: float = 0.8
    alpha_conf1: tuple = (1.0, 5.0, 5.0)
    alpha_conf2: tuple = (5.0, 1.0, 5.0)
    weight_regime: str = "auto"
    regime_threshold: float = 0.5
    mc_samples: int = 16
    refilter_per_batch: bool = False

    def __post_init__(self):
        self.alpha_conf1 = tuple(float(a) for a in self.alpha_conf1)
        self.alpha_conf2 = tuple(float(a) for a in self.alpha_conf2)
        self.validate()

    def validate(self) -> None:
        if not self.beta_low < self.beta_high:
            raise ConfigError("beta_low must be smaller than beta_high")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.confidence_level <= 1.0:
            raise ConfigError("confidence_level must lie in [0, 1]")
        for name in ("class_head", "style_head"):
            if getattr(self, name) not in ENCODER_HEADS:
                raise ConfigError(f"{name} must be one of {ENCODER_HEADS}")
        if self.weight_regime not in ("auto", "conf1", "conf2"):
            raise ConfigError("weight_regime must be auto, conf1 or conf2")
        for name in ("alpha_conf1", "alpha_conf2"):
            alphas = getattr(self, name)
            if len(alphas) != 3 or min(alphas) < 0:
                raise ConfigError(f"{name} needs three non-negative weights")
        for name in ("epochs", "pretrain_epochs", "warmup_epochs", "adapt_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.dpm_T < 2 or self.dpm_gamma <= 0 or self.mc_samples < 1:
            raise ConfigError("batch_size >= 1, dpm_T >= 2, dpm_gamma > 0, mc_samples >= 1 required")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["alpha_conf1"] = list(self.alpha_conf1)
        out["alpha_conf2"] = list(self.alpha_conf2)
        return out

    @classmethod
    def desk(cls, **changes) -> "ExperimentConfig":
        """Defaults with the overrides used for the synthetic presets."""
        return cls(**{**DESK_SCALE, **changes})

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(p) for p in raw.split(","))
    return raw


def parse_key_values(text: str) -> dict[str, str]:
    """Split ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def typed_values(raw: dict[str, str], template) -> dict:
    """Convert raw strings using the types of ``template``'s dataclass defaults."""
    defaults = {f.name: getattr(template, f.name) for f in dataclasses.fields(template)}
    out = {}
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r}")
        try:
            out[key] = _parse_value(value, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return out


# Small embeddings and minibatches suit the 8-dimensional presets; a larger
# beta_low keeps class information out of the style channel at this scale.
DESK_SCALE = {"class_dim": 3, "style_dim": 3, "batch_size": 16, "beta_low": 0.6}


def config_from_text(text: str, *, allow_extra: bool = False) -> tuple[ExperimentConfig, dict[str, str]]:
    """Parse a config; with ``allow_extra`` unknown keys are returned, not rejected."""
    raw = parse_key_values(text)
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    extra = {k: v for k, v in raw.items() if k not in names}
    if extra and not allow_extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    own = typed_values({k: v for k, v in raw.items() if k in names}, ExperimentConfig())
    try:
        return ExperimentConfig(**own), extra
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, *, allow_extra: bool = False):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_text(text, allow_extra=allow_extra)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg) -> str:
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n"
                   for f in dataclasses.fields(cfg))


__all__ = ["ConfigError", "DESK_SCALE", "ExperimentConfig", "config_from_text", "config_to_text",
           "load_config", "parse_key_values", "typed_values"]
