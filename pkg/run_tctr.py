#!/usr/bin/env python3
"""
run_tctr.py
--------------------------------
Command-line harness for the temporal-channel Lidar video detector.

Subcommands:
  gen        Write train/eval LSEQ datasets from the scene.* keys
  train      Train on data.train, write the checkpoint and run.log
  eval       Evaluate the checkpoint on data.eval (text + Excel report)
  infer      Run the checkpoint on data.eval and log one record per detection
  gradcheck  Compare tape gradients with finite differences (exit 1 on failure)
  ablate     Train/evaluate every variant of ablate.axis and tabulate mAP
  render     Write a BEV bitmap of one eval sequence with gt and detections
  defaults   List every config key with its default and description

Usage:
  python3 run_tctr.py gen --out runs/demo
  python3 run_tctr.py train --out runs/demo --set train.steps=50
  python3 run_tctr.py eval --out runs/demo
  python3 run_tctr.py ablate --out runs/abl --set ablate.axis=frames --set scene.occlusion_dropout=0.3

Common flags: --config PATH (key = value lines or YAML), --set key=value
(repeatable), --seed N, --out DIR. Relative data.* paths resolve against --out.

Every command writes <out>/run.log: the resolved config echo, per-step and
per-result key=value records, and one run_summary record.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

from tctr.ablation import run_ablation, write_table
from tctr.config import RunConfig, describe_defaults
from tctr.errors import TctrError
from tctr.evaluation import EvalReport, evaluate_detector, write_report
from tctr.gradcheck import gradcheck
from tctr.model import Detector, ModelConfig
from tctr.render import render_detections
from tctr.runlog import RunLog
from tctr.synthlidar import generate_dataset, read_dataset, write_dataset
from tctr.trainer import train

COMMANDS = ("gen", "train", "eval", "infer", "gradcheck", "ablate", "render", "defaults")


def data_path(cfg: RunConfig, key: str, out_dir: Path) -> Path:
    path = Path(cfg[key])
    return path if path.is_absolute() else out_dir / path


def load_or_generate(cfg: RunConfig, key: str, out_dir: Path, count_key: str, seed: int):
    """Read a dataset, generating and writing it first when the file does not exist."""
    path = data_path(cfg, key, out_dir)
    if not path.exists():
        print(f"{path} not found; generating {cfg[count_key]} sequences")
        write_dataset(path, generate_dataset(cfg.scene(), cfg.get_int(count_key), seed))
    return read_dataset(path)


def summary(runlog: RunLog, cfg: RunConfig, started: float, steps: int = 0,
            final_loss: float = float("nan"), report: Optional[EvalReport] = None) -> None:
    fields: Dict[str, object] = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "steps": steps,
        "final_loss": final_loss,
        "map": report.map if report else float("nan"),
    }
    if report:
        fields.update({f"per_class_ap.{c}": ap for c, ap in report.per_class_ap().items()})
    fields["wall_seconds"] = round(time.perf_counter() - started, 3)
    runlog.record("run_summary", **fields)


def log_eval(runlog: RunLog, report: EvalReport) -> None:
    for (c, t), r in sorted(report.results.items()):
        runlog.record("eval", **{"class": report.classes[c]}, threshold=t, ap=r.ap, tp=r.tp, fp=r.fp, fn=r.fn)


def cmd_gen(cfg: RunConfig, out_dir: Path, runlog: RunLog, started: float) -> int:
    scene = cfg.scene()
    train_path = write_dataset(data_path(cfg, "data.train", out_dir),
                               generate_dataset(scene, cfg.get_int("data.train_sequences"), cfg.seed))
    eval_path = write_dataset(data_path(cfg, "data.eval", out_dir),
                              generate_dataset(scene, cfg.get_int("data.eval_sequences"), cfg.get_int("data.eval_seed")))
    print(f"Wrote {train_path} and {eval_path}")
    summary(runlog, cfg, started)
    return 0


def cmd_train(cfg: RunConfig, out_dir: Path, runlog: RunLog, started: float) -> int:
    samples = load_or_generate(cfg, "data.train", out_dir, "data.train_sequences", cfg.seed)
    print(f"Training on {len(samples)} sequences for {cfg['train.steps']} steps...")
    result = train(cfg, samples, out_dir, runlog)
    print(f"Final loss: {result.final_loss:.5f}")
    print(f"Checkpoint: {result.checkpoint}")
    summary(runlog, cfg, started, len(result.history), result.final_loss)
    return 0


def _load_detector(cfg: RunConfig, out_dir: Path) -> Detector:
    checkpoint = data_path(cfg, "data.checkpoint", out_dir)
    if not checkpoint.exists():
        raise TctrError(f"Checkpoint not found: {checkpoint} (run 'train' first)")
    return Detector.from_checkpoint(ModelConfig.from_run_config(cfg), checkpoint)


def cmd_eval(cfg: RunConfig, out_dir: Path, runlog: RunLog, started: float) -> int:
    detector = _load_detector(cfg, out_dir)
    samples = load_or_generate(cfg, "data.eval", out_dir, "data.eval_sequences", cfg.get_int("data.eval_seed"))
    report, _ = evaluate_detector(detector, samples, cfg.eval_thresholds())
    log_eval(runlog, report)
    print(report.format_table())
    print(f"Report: {write_report(report, out_dir)}")
    summary(runlog, cfg, started, report=report)
    return 0


def cmd_infer(cfg: RunConfig, out_dir: Path, runlog: RunLog, started: float) -> int:
    detector = _load_detector(cfg, out_dir)
    samples = load_or_generate(cfg, "data.eval", out_dir, "data.eval_sequences", cfg.get_int("data.eval_seed"))
    classes = detector.cfg.head.classes
    total = 0
    for i, seq in enumerate(samples):
        dets = detector.detect(seq)
        for box, c, s in zip(dets.boxes, dets.class_ids, dets.scores):
            x, y, z, l, w, h, yaw = (float(v) for v in box)
            runlog.record("detection", sequence=i, **{"class": classes[int(c)]}, score=float(s),
                          x=x, y=y, z=z, l=l, w=w, h=h, yaw=yaw)
        total += len(dets)
    print(f"{total} detections over {len(samples)} sequences written to {runlog.path}")
    summary(runlog, cfg, started)
    return 0


def cmd_gradcheck(cfg: RunConfig, out_dir: Path, runlog: RunLog, started: float) -> int:
    report = gradcheck(cfg)
    for group, (err, n) in sorted(report.groups().items()):
        runlog.record("gradcheck", group=group, max_rel_err=err, checked=n)
    print(report.format_table())
    summary(runlog, cfg, started)
    return 0 if report.passed else 1


def cmd_ablate(cfg: RunConfig, out_dir: Path, runlog: RunLog, started: float) -> int:
    axis = cfg.ablation_axis()
    train_samples = load_or_generate(cfg, "data.train", out_dir, "data.train_sequences", cfg.seed)
    eval_samples = load_or_generate(cfg, "data.eval", out_dir, "data.eval_sequences", cfg.get_int("data.eval_seed"))
    table = run_ablation(cfg, axis, train_samples, eval_samples, runlog)
    print(table.format_table())
    print(f"Table: {write_table(table, out_dir)}")
    summary(runlog, cfg, started)
    return 0


def cmd_render(cfg: RunConfig, out_dir: Path, runlog: RunLog, started: float) -> int:
    detector = _load_detector(cfg, out_dir)
    samples = load_or_generate(cfg, "data.eval", out_dir, "data.eval_sequences", cfg.get_int("data.eval_seed"))
    index = cfg.get_int("render.sequence")
    if not 0 <= index < len(samples):
        raise TctrError(f"render.sequence {index} outside the {len(samples)} eval sequences")
    path = render_detections(detector, samples[index], out_dir / f"render_{index:03d}.bmp",
                             cfg.get_int("render.width"), cfg.get_int("render.height"))
    print(f"Wrote {path}")
    summary(runlog, cfg, started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Temporal-channel transformer Lidar video detection")
    parser.add_argument("command", choices=COMMANDS, help="What to run")
    parser.add_argument("--config", type=str, help="Config file (key = value lines, or .yaml)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key (repeatable)")
    parser.add_argument("--seed", type=int, help="Override the master seed")
    parser.add_argument("--out", type=str, default="runs/latest", help="Output directory (default: runs/latest)")
    parser.add_argument("--verbose", action="store_true", help="Show library log messages")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")

    if args.command == "defaults":
        print("\n".join(describe_defaults()))
        return 0

    started = time.perf_counter()
    try:
        cfg = RunConfig.load(args.config, args.overrides, args.seed)
        out_dir = Path(args.out)
        with RunLog(out_dir) as runlog:
            runlog.config(cfg.echo())
            cfg.save(out_dir / "config.txt")
            handler = {
                "gen": cmd_gen,
                "train": cmd_train,
                "eval": cmd_eval,
                "infer": cmd_infer,
                "gradcheck": cmd_gradcheck,
                "ablate": cmd_ablate,
                "render": cmd_render,
            }[args.command]
            return handler(cfg, out_dir, runlog, started)
    except TctrError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
