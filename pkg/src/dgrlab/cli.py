"""Command-line front end: pretrain / finetune / eval / export-embeddings."""

from __future__ import annotations

import os

# honor the thread cap before numpy binds its BLAS pools
_threads = os.environ.get("DGRLAB_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig, config_hash, load_config
from .distortions import DistortionError, patches_array, sample_type_batch
from .optim import OptimizerError
from .training import (HELDOUT_SEED_RANGE, ModelBundle, TrainingError,
                       evaluate, finetune, load_model, pretrain, save_model)

log = logging.getLogger("dgrlab")

_KNOWN_ERRORS = (ConfigError, CheckpointError, TrainingError, DistortionError,
                 OptimizerError, ValueError, OSError)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class Manifest:
    """One JSON manifest per run, written before any heavy work starts."""

    def __init__(self, command: str, config_path, seed: int, out_dir: Path):
        self.path = out_dir / "manifest.json"
        self.record = {
            "command": command,
            "config_path": None if config_path is None else str(config_path),
            "seed": seed,
            "config_hash": config_hash(config_path),
            "out_dir": str(out_dir),
            "started_at": _now(),
            "finished_at": None,
            "status": "running",
        }
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.record, indent=2) + "\n", encoding="utf-8")

    def finish(self, status: str = "complete") -> None:
        self.record["finished_at"] = _now()
        self.record["status"] = status
        self._write()


def _prepare(args, command: str) -> tuple[TrainConfig, Path, Manifest]:
    overrides = {} if args.seed is None else {"seed": args.seed}
    cfg = load_config(args.config, overrides)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(command, args.config, cfg.seed, out_dir)
    return cfg, out_dir, manifest


def _write_report(report, path: Path) -> None:
    path.write_text(report.to_json() + "\n", encoding="utf-8")


def cmd_pretrain(args) -> int:
    cfg, out_dir, manifest = _prepare(args, "pretrain")
    model = ModelBundle(cfg)
    log.info("pretraining for %d steps (%d types, N=%d)",
             cfg.pretrain_steps, len(cfg.types), cfg.graph_size)

    loss_path = out_dir / "loss_log.csv"
    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_dist", "l_level", "total"])

        def on_step(step, row):
            writer.writerow([step, repr(row[0]), repr(row[1]), repr(row[2])])
            if step % cfg.eval_every == 0 and step < cfg.pretrain_steps:
                report = evaluate(model, cfg, step=step)
                _write_report(report, out_dir / f"eval_{step:06d}.json")
                log.info("step %d: triplet_acc=%s", step, report.triplet_accuracy)

        pretrain(model, cfg, on_step=on_step)

    save_model(model, out_dir / "pretrain.ckpt", include_regressor=False)
    report = evaluate(model, cfg, step=cfg.pretrain_steps)
    _write_report(report, out_dir / "eval_final.json")
    manifest.finish()
    log.info("done: checkpoint and reports under %s", out_dir)
    return 0


def cmd_finetune(args) -> int:
    cfg, out_dir, manifest = _prepare(args, "finetune")
    if args.from_ckpt == "random":
        model = ModelBundle(cfg)  # the no-pretraining ablation arm
    else:
        model = load_model(args.from_ckpt, cfg)
    log.info("finetuning for %d steps (inputs=%s)", cfg.finetune_steps, cfg.finetune_inputs)

    loss_path = out_dir / "finetune_loss.csv"
    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        finetune(model, cfg,
                 on_step=lambda step, loss: writer.writerow([step, repr(loss)]))

    save_model(model, out_dir / "finetuned.ckpt", include_regressor=True)
    report = evaluate(model, cfg, step=cfg.finetune_steps)
    _write_report(report, out_dir / "report.json")
    print(report.to_json())
    manifest.finish()
    return 0


def cmd_eval(args) -> int:
    overrides = {} if args.seed is None else {"seed": args.seed}
    cfg = load_config(args.config, overrides)
    model = load_model(args.checkpoint, cfg)
    report = evaluate(model, cfg)
    print(report.to_json())
    return 0


def cmd_export_embeddings(args) -> int:
    cfg, out_dir, manifest = _prepare(args, "export-embeddings")
    model = load_model(args.checkpoint, cfg)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 777)))
    n = cfg.eval_samples_per_type
    for spec in model.specs:
        batch = sample_type_batch(spec, n, rng, patch_size=cfg.patch_size,
                                  seed_range=HELDOUT_SEED_RANGE,
                                  jitter_std=cfg.jitter_std)
        dgr = model.build_graph(patches_array(batch), spec.type_id)
        node_path = out_dir / f"nodes_type{spec.type_id}.csv"
        with open(node_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_index", "type_id", "level"]
                            + [f"v_{i}" for i in range(cfg.feature_dim)])
            for i, sample in enumerate(batch):
                writer.writerow([i, spec.type_id, sample.level]
                                + [repr(float(v)) for v in dgr.V.data[i]])
        edge_path = out_dir / f"edges_type{spec.type_id}.csv"
        with open(edge_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j"] + [f"e_{i}" for i in range(cfg.edge_dim)])
            for i in range(n):
                for j in range(n):
                    writer.writerow([i, j] + [repr(float(v)) for v in dgr.E.data[i, j]])
        log.info("exported type %d to %s / %s", spec.type_id, node_path.name, edge_path.name)
    manifest.finish()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgrlab",
        description="Distortion-graph quality model: pretrain, finetune, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", default=None, help="INI config path (defaults run as-is)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if out_default is not None:
            p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("pretrain", help="train the graph representation")
    common(p, "runs/pretrain")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the score regressor")
    common(p, "runs/finetune")
    p.add_argument("--from", dest="from_ckpt", required=True,
                   help="pretrain checkpoint path, or 'random' for the ablation arm")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint, JSON on stdout")
    common(p, None)
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-embeddings", help="dump node/edge embeddings as CSV")
    common(p, "runs/embeddings")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
