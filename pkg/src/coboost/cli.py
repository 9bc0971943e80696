"""Command line entry point: ``coboost run | sweep | report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import torch

from .config import METHODS, ExperimentConfig, apply_overrides, desk_profile, load_config, reference_profile

_PROFILES = {"desk": desk_profile, "reference": reference_profile}


def _config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = _PROFILES[args.profile]()
    cfg = apply_overrides(cfg, args.override or [])
    if args.output_dir is not None:
        cfg = cfg.replace(output_dir=args.output_dir)
    return cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="YAML or JSON file mirroring ExperimentConfig")
    src.add_argument("--profile", choices=sorted(_PROFILES), default="desk", help="built-in config when --config is absent")
    p.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted override, e.g. synth.beta=0.5; repeatable")
    p.add_argument("--output-dir", help="where run directories are written")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coboost", description="One-shot federated ensemble distillation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="one method, one seed")
    _add_config_args(p_run)
    p_run.add_argument("--seed", type=int, default=None, help="defaults to the first configured seed")
    p_run.add_argument("--method", choices=METHODS, default=None)

    p_sweep = sub.add_parser("sweep", help="every configured method over every configured seed")
    _add_config_args(p_sweep)
    p_sweep.add_argument("--seeds", type=int, nargs="+", default=None)
    p_sweep.add_argument("--methods", choices=METHODS, nargs="+", default=None)

    p_report = sub.add_parser("report", help="rebuild the table and curves from finished run directories")
    p_report.add_argument("--dir", required=True)
    p_report.add_argument("--methods", choices=METHODS, nargs="+", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)

    from .orchestrator import report, run, sweep

    try:
        if args.command == "run":
            cfg = _config(args)
            seed = args.seed if args.seed is not None else cfg.seeds[0]
            result = run(cfg, seed, args.method)
            print(json.dumps({**result.summary(), "wall_clock": round(result.wall_clock, 2), "run_dir": result.run_dir}, indent=2))
        elif args.command == "sweep":
            cfg = _config(args)
            if args.methods:
                cfg = cfg.replace(methods=args.methods)
            out = sweep(cfg, seeds=args.seeds)
            print(out.table, end="")
            if any(r.error for r in out.results):
                return 1
        else:
            print(report(args.dir, args.methods), end="")
    except (ValueError, FileNotFoundError) as exc:
        print(f"coboost: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
