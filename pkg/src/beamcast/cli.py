"""Command-line entry point: ``beamcast {generate,train,evaluate,replay,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment
from .config import ExperimentConfig, load_config, save_config


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out if args.out is not None else cfg.output_dir)


def _horizons(args, cfg: ExperimentConfig) -> list[float]:
    return list(args.horizon) if args.horizon else list(cfg.horizons_ms)


def _common(p: argparse.ArgumentParser, dataset: bool = False) -> None:
    p.add_argument("--config", default="los", help="config JSON path or preset name (los, nlos)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for simulation")
    if dataset:
        p.add_argument("--dataset", default=None, help="dataset container (default: OUT/dataset.bin)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beamcast", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a run and write the dataset container")
    _common(p)
    p.add_argument("--export-q15", default=None, metavar="PATH", help="also write raw per-PRB samples as SRSQ15")

    p = sub.add_parser("train", help="train one model per horizon")
    _common(p, dataset=True)
    p.add_argument("--horizon", type=float, action="append", metavar="MS", help="horizon in ms (repeatable)")

    p = sub.add_parser("evaluate", help="evaluate trained checkpoints and write reports")
    _common(p, dataset=True)
    p.add_argument("--horizon", type=float, action="append", metavar="MS", help="horizon in ms (repeatable)")
    p.add_argument("--checkpoints", default=None, help="checkpoint directory (default: OUT)")

    p = sub.add_parser("replay", help="ingest an SRSQ15 raw file through the pipeline")
    _common(p)
    p.add_argument("raw", help="SRSQ15 file")

    p = sub.add_parser("report", help="print the summary table of an evaluation report")
    p.add_argument("--out", default=None, help="directory holding report.json")
    p.add_argument("--report", default=None, help="report.json path (overrides --out)")

    p = sub.add_parser("show-config", help="write a config (or preset) as JSON")
    _common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            path = Path(args.report) if args.report else Path(args.out or ".") / "report.json"
            if not path.exists():
                raise FileNotFoundError(f"report {path} not found; run `beamcast evaluate` first")
            experiment.cmd_report(path)
            return 0
        cfg = _load(args)
        out = _out(args, cfg)
        if args.threads < 1:
            raise ValueError("--threads must be at least 1")
        if args.command == "show-config":
            out.mkdir(parents=True, exist_ok=True)
            save_config(cfg, out / "config.json")
            print(out / "config.json")
        elif args.command == "generate":
            experiment.cmd_generate(cfg, out, args.threads, args.export_q15)
        elif args.command == "train":
            dataset = args.dataset or out / "dataset.bin"
            experiment.cmd_train(cfg, dataset, _horizons(args, cfg), out, progress=args.verbose)
        elif args.command == "evaluate":
            dataset = args.dataset or out / "dataset.bin"
            experiment.cmd_evaluate(cfg, dataset, args.checkpoints or out, _horizons(args, cfg), out)
        elif args.command == "replay":
            experiment.cmd_replay(cfg, args.raw, out)
    except (OSError, ValueError) as exc:
        print(f"beamcast {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
