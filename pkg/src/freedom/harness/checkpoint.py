"""Versioned binary checkpoints.

Layout::

    b"FRDM" | uint32 version | uint64 header length | JSON header | payload

All integers are little-endian. The JSON header holds free-form metadata and
a table of ``{name, shape, dtype, offset}`` entries pointing into the payload,
which is a concatenation of little-endian float64 arrays. Integer arrays are
stored as float64 and cast back on load (exact below 2**53).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from ..autodiff import Adam, Mlp, Tensor
from ..config import ExperimentConfig
from ..dpm import DpmPosterior, summarize
from ..model import DeployedModel, ModelParams, ModelShape, deploy
from ..source import LabeledPool, SourceTrainer, TrainLog
from ..target import AdaptLog, TargetAdapter

MAGIC = b"FRDM"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    table, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        kind = "int" if np.issubdtype(a.dtype, np.integer) else "float"
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(a.shape), "dtype": kind, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True,
                        separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, n = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size + n
    try:
        header = json.loads(blob[_PREFIX.size:start])
    except ValueError:
        raise CheckpointError(f"{path}: corrupt header") from None
    payload = memoryview(blob)[start:]
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: payload shorter than its table")
        a = np.frombuffer(payload[entry["offset"]:end], dtype="<f8").reshape(entry["shape"])
        a = a.astype(np.int64) if entry["dtype"] == "int" else a.astype(np.float64)
        arrays[entry["name"]] = a
    return arrays, header["meta"]


# -- model bundles -------------------------------------------------------------


def _model_meta(m: ModelParams) -> dict:
    return {"shape": dataclasses.asdict(m.shape)}


def model_arrays(m: ModelParams) -> dict[str, np.ndarray]:
    return {f"model.{name}": t.data for name, t in m.named_tensors()}


def model_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> ModelParams:
    m = ModelParams.init(ModelShape(**meta["shape"]), np.random.default_rng(0))
    for name, t in m.named_tensors():
        key = f"model.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        if arrays[key].shape != t.data.shape:
            raise CheckpointError(f"tensor {name}: shape {arrays[key].shape} != {t.data.shape}")
        t.data = arrays[key].copy()
    return m


def _optimizer_arrays(prefix: str, opt: Adam) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in opt.state_arrays().items()}


def _load_optimizer(prefix: str, opt: Adam, arrays: dict[str, np.ndarray]) -> None:
    n = len(prefix) + 1
    opt.load_state_arrays({k[n:]: v for k, v in arrays.items() if k.startswith(prefix + ".")})


def _posterior_arrays(post: DpmPosterior | None) -> dict[str, np.ndarray]:
    if post is None:
        return {}
    return {f"dpm.{f.name}": getattr(post, f.name)
            for f in dataclasses.fields(post) if f.name != "gamma"}


def _posterior_from(arrays: dict, meta: dict) -> DpmPosterior | None:
    if "dpm_gamma" not in meta:
        return None
    values = {f.name: arrays[f"dpm.{f.name}"] for f in dataclasses.fields(DpmPosterior)
              if f.name != "gamma"}
    return DpmPosterior(gamma=meta["dpm_gamma"], **values)


def _strip_wall(rows: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wall"} for r in rows]


def save_source_checkpoint(path: str | Path, trainer: SourceTrainer) -> None:
    """Everything needed to resume source training at an epoch boundary."""
    arrays = model_arrays(trainer.model)
    arrays.update(_optimizer_arrays("opt", trainer.optimizer))
    arrays.update(_posterior_arrays(trainer.posterior))
    meta = {
        "kind": "source",
        "config": trainer.cfg.to_dict(),
        **_model_meta(trainer.model),
        "rng": trainer.rng.bit_generator.state,
        "pretrain_done": trainer.pretrain_done,
        "epochs_done": trainer.epochs_done,
        "log": {"rows": _strip_wall(trainer.log.rows), "elbo_traces": trainer.log.elbo_traces,
                "beta_schedule": [list(b) for b in trainer.log.beta_schedule]},
    }
    if trainer.posterior is not None:
        meta["dpm_gamma"] = trainer.posterior.gamma
    save_arrays(path, arrays, meta)


def _require_kind(meta: dict, *kinds: str) -> None:
    if meta.get("kind") not in kinds:
        raise CheckpointError(f"expected a {' or '.join(kinds)} checkpoint, got {meta.get('kind')!r}")


def load_source_model(path: str | Path) -> tuple[ModelParams, dict]:
    arrays, meta = load_arrays(path)
    _require_kind(meta, "source", "adapted")
    return model_from_arrays(arrays, meta), meta


def restore_source_trainer(path: str | Path, pool: LabeledPool,
                           cfg: ExperimentConfig | None = None) -> SourceTrainer:
    arrays, meta = load_arrays(path)
    _require_kind(meta, "source")
    cfg = cfg or ExperimentConfig.from_dict(meta["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    trainer = SourceTrainer(model_from_arrays(arrays, meta), pool, cfg, rng)
    _load_optimizer("opt", trainer.optimizer, arrays)
    trainer.pretrain_done = meta["pretrain_done"]
    trainer.epochs_done = meta["epochs_done"]
    trainer.posterior = _posterior_from(arrays, meta)
    trainer.summary = summarize(trainer.posterior) if trainer.posterior is not None else None
    log = meta["log"]
    trainer.log = TrainLog(log["rows"], log["elbo_traces"], [tuple(b) for b in log["beta_schedule"]])
    return trainer


def save_adapter_checkpoint(path: str | Path, adapter: TargetAdapter) -> None:
    arrays = model_arrays(adapter.model)
    for name, opt in adapter.optimizers.items():
        arrays.update(_optimizer_arrays(f"opt_{name}", opt))
    log = adapter.log
    meta = {
        "kind": "adapted",
        "config": adapter.cfg.to_dict(),
        **_model_meta(adapter.model),
        "rng": adapter.rng.bit_generator.state,
        "epochs_done": adapter.epochs_done,
        "log": {"rows": _strip_wall(log.rows), "regime": log.regime, "alphas": list(log.alphas),
                "initial_ratio": log.initial_ratio, "initial_acc": log.initial_acc,
                "skipped_class_epochs": log.skipped_class_epochs},
    }
    save_arrays(path, arrays, meta)


def restore_adapter(path: str | Path, target_x: np.ndarray, eval_y: np.ndarray | None = None,
                    cfg: ExperimentConfig | None = None) -> TargetAdapter:
    arrays, meta = load_arrays(path)
    _require_kind(meta, "adapted")
    cfg = cfg or ExperimentConfig.from_dict(meta["config"])
    adapter = TargetAdapter(model_from_arrays(arrays, meta), target_x, cfg, None, eval_y)
    for name, opt in adapter.optimizers.items():
        _load_optimizer(f"opt_{name}", opt, arrays)
    adapter.rng = np.random.default_rng()
    adapter.rng.bit_generator.state = meta["rng"]
    adapter.epochs_done = meta["epochs_done"]
    log = meta["log"]
    adapter.log = AdaptLog(log["rows"], log["regime"], tuple(log["alphas"]), log["initial_ratio"],
                           log["initial_acc"], log["skipped_class_epochs"])
    return adapter


def save_deployed(path: str | Path, d: DeployedModel, config: dict | None = None) -> None:
    arrays = {}
    for mlp in (d.class_encoder, d.classifier):
        arrays.update({f"deployed.{n}": t.data for n, t in mlp.named_parameters()})
    meta = {"kind": "deployed", "config": config or {}, "class_head": d.class_head,
            "activations": {"class_encoder": list(d.class_encoder.activations),
                            "classifier": list(d.classifier.activations)}}
    save_arrays(path, arrays, meta)


def _mlp_from(arrays: dict, name: str, activations: list[str], prefix: str) -> Mlp:
    ws = [Tensor(arrays[f"{prefix}.{name}.w{k}"].copy(), True, f"{name}.w{k}")
          for k in range(len(activations))]
    bs = [Tensor(arrays[f"{prefix}.{name}.b{k}"].copy(), True, f"{name}.b{k}")
          for k in range(len(activations))]
    return Mlp(ws, bs, activations, name)


def load_deployed(path: str | Path) -> DeployedModel:
    """Deployed model from a deployed, source or adapted checkpoint."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") in ("source", "adapted"):
        return deploy(model_from_arrays(arrays, meta))
    _require_kind(meta, "deployed")
    acts = meta["activations"]
    return DeployedModel(_mlp_from(arrays, "class_encoder", acts["class_encoder"], "deployed"),
                         _mlp_from(arrays, "classifier", acts["classifier"], "deployed"),
                         meta["class_head"])
