"""Command-line entry point.

Exit status: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from ..autodiff import no_grad
from ..config import ConfigError, ExperimentConfig
from ..model import encode_class, encode_style
from ..source import LabeledPool, NumericalError, SourceTrainer, build_model
from ..target import TargetAdapter
from . import checkpoint as ckpt
from .datafiles import DataError, load_labels, load_matrix, load_source_pool, save_scenario
from .experiment import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_OK,
    StageError,
    evaluate,
    load_run_config,
    run_experiment,
)
from .metrics import MetricsRow, write_metrics
from .report import ReportError, render_report
from .synthetic import generate


def _config(args) -> ExperimentConfig:
    cfg, _ = load_run_config(args.config, args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    # a full run config is accepted; its training keys are validated and ignored
    _, sc = load_run_config(args.spec, args.seed)
    out = save_scenario(args.out, generate(sc.build()))
    print(f"wrote scenario {sc.preset} (seed {sc.seed}) to {out}")
    return EXIT_OK


def cmd_train_source(args) -> int:
    cfg = _config(args)
    x, y = load_source_pool(args.data)
    pool = LabeledPool(x, y)
    if args.resume:
        trainer = ckpt.restore_source_trainer(args.resume, pool, cfg)
    else:
        rng = np.random.default_rng(cfg.seed)
        trainer = SourceTrainer(build_model(x.shape[1], int(y.max()) + 1, cfg, rng), pool, cfg, rng)
    trainer.run()
    ckpt.save_source_checkpoint(args.out, trainer)
    if args.metrics:
        write_metrics(args.metrics, [MetricsRow.from_log_row(_no_wall(r)) for r in trainer.log.rows])
    last = trainer.log.rows[-1] if trainer.log.rows else {}
    print(json.dumps({"epochs": trainer.epochs_done, "source_acc": last.get("source_acc"),
                      "dpm_components": last.get("dpm_components")}))
    return EXIT_OK


def _no_wall(row: dict) -> dict:
    return {k: v for k, v in row.items() if k != "wall"}


def cmd_adapt_target(args) -> int:
    cfg = _config(args)
    if not Path(args.source_ckpt).exists():
        raise StageError("adapt-target", f"source checkpoint missing: {args.source_ckpt}", EXIT_DATA)
    model, _ = ckpt.load_source_model(args.source_ckpt)
    target_x = load_matrix(args.target)
    adapter = TargetAdapter(model, target_x, cfg, np.random.default_rng(cfg.seed + 1))
    adapter.run()
    ckpt.save_adapter_checkpoint(args.out, adapter)
    if args.metrics:
        write_metrics(args.metrics, [MetricsRow.from_log_row(_no_wall(r)) for r in adapter.log.rows])
    ratios = adapter.log.ratios
    print(json.dumps({"regime": adapter.log.regime, "initial_ratio": adapter.log.initial_ratio,
                      "final_ratio": ratios[-1] if ratios else None}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = ckpt.load_deployed(args.ckpt)
    acc = evaluate(model, load_matrix(args.data), load_labels(args.labels))
    print(json.dumps({"accuracy": acc}))
    return EXIT_OK


def cmd_deploy(args) -> int:
    d = ckpt.load_deployed(args.ckpt)
    _, meta = ckpt.load_arrays(args.ckpt)
    ckpt.save_deployed(args.out, d, meta.get("config"))
    print(json.dumps({"parameters": d.num_parameters()}))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    """Class (and, for full checkpoints, style) embedding means as CSV."""
    x = load_matrix(args.data)
    arrays, meta = ckpt.load_arrays(args.ckpt)
    with no_grad():
        if meta.get("kind") == "deployed":
            model = ckpt.load_deployed(args.ckpt)
            blocks = {"class": encode_class(model, x).mean.data}
        else:
            model = ckpt.model_from_arrays(arrays, meta)
            blocks = {"class": encode_class(model, x).mean.data,
                      "style": encode_style(model, x).mean.data}
    header = [f"{k}_{j}" for k, v in blocks.items() for j in range(v.shape[1])]
    table = np.concatenate(list(blocks.values()), axis=1)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([repr(float(v)) for v in row])
    print(f"wrote {len(table)} rows x {len(header)} columns to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    result = run_experiment(args.config, args.out, seed=args.seed)
    if result.status != EXIT_OK:
        print(f"error: {result.message}", file=sys.stderr)
        return result.status
    print(json.dumps({k: result.record[k] for k in
                      ("source_test_acc", "baseline_target_acc", "adapted_target_acc", "gain")}))
    return EXIT_OK


def cmd_report(args) -> int:
    paths = render_report(args.run, args.out, args.embeddings, args.labels)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freedom", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_, *specs):
        sp = sub.add_parser(name, help=help_)
        for flag, kw in specs:
            sp.add_argument(flag, **kw)
        sp.add_argument("--seed", type=int, default=None,
                        help="overrides the config seed and FREEDOM_SEED")
        sp.set_defaults(func=func)

    req = {"required": True}
    add("gen-data", cmd_gen_data, "generate a synthetic scenario",
        ("--spec", req), ("--out", req))
    add("train-source", cmd_train_source, "train on a labeled source pool",
        ("--config", req), ("--data", req), ("--out", req), ("--metrics", {}),
        ("--resume", {"help": "continue from a source checkpoint"}))
    add("adapt-target", cmd_adapt_target, "adapt a source model to an unlabeled target pool",
        ("--config", req), ("--source-ckpt", req), ("--target", req), ("--out", req),
        ("--metrics", {}))
    add("eval", cmd_eval, "accuracy of a checkpoint on labeled data",
        ("--ckpt", req), ("--data", req), ("--labels", req))
    add("deploy", cmd_deploy, "strip a checkpoint to class encoder + classifier",
        ("--ckpt", req), ("--out", req))
    add("export-embeddings", cmd_export_embeddings, "write embedding means as CSV",
        ("--ckpt", req), ("--data", req), ("--out", req))
    add("run", cmd_run, "gen-data, train-source, adapt-target and eval in one go",
        ("--config", req), ("--out", req))
    add("report", cmd_report, "render figures from a finished run directory",
        ("--run", req), ("--out", {"help": "figure directory (default <run>/figures)"}),
        ("--embeddings", {"help": "CSV written by export-embeddings"}),
        ("--labels", {"help": "labels (.npy/.csv) used to colour the embeddings"}))
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ReportError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ckpt.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
