"""Command line entry point: run, sweep, evaluate, report, validate."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (ExperimentConfig, IngestionError, build_env, emit_report, evaluate_checkpoint, load_reports,
                      run_experiment, run_sweep)
from .topology import ConfigurationError


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    out = Path(args.out) if args.out else None
    reports = []
    for seed in seeds:
        dest = None if out is None else (out if len(seeds) == 1 else out / f"seed{seed}")
        reports.append(run_experiment(cfg, seed, dest))
    print(emit_report(reports, "table"), end="")
    return 0


def _cmd_sweep(args) -> int:
    cfg_path = Path(args.config)
    doc = json.loads(cfg_path.read_text())
    grid = json.loads(Path(args.grid).read_text())
    reports = run_sweep(doc, grid, args.out, base_dir=cfg_path.parent)
    print(emit_report(reports, "table"), end="")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    report = evaluate_checkpoint(args.checkpoint, cfg, args.seed)
    print(emit_report([report], args.format), end="")
    return 0


def _cmd_report(args) -> int:
    reports = load_reports(args.input)
    if not reports:
        print(f"no report.json found under {args.input}", file=sys.stderr)
        return 1
    print(emit_report(reports, args.format, args.output), end="")
    return 0


def _cmd_validate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    env = build_env(cfg)
    topo = env.topology
    print(f"ok: {cfg.name} algorithm={cfg.algorithm} nodes={len(topo.nodes)} agents={len(env.agents)} "
          f"clients={len(topo.clients)} obs_dim={env.obs_dim} action_dim={env.action_dim}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fauno", description="edge task-offloading experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="run a config over a parameter grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", default="sweep_out")
    s.set_defaults(func=_cmd_sweep)

    e = sub.add_parser("evaluate", help="evaluate a saved checkpoint without learning")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--format", choices=("table", "csv", "json"), default="table")
    e.set_defaults(func=_cmd_evaluate)

    rep = sub.add_parser("report", help="summarize report.json files")
    rep.add_argument("--in", dest="input", required=True)
    rep.add_argument("--format", choices=("table", "csv", "json"), default="table")
    rep.add_argument("--output", default=None)
    rep.set_defaults(func=_cmd_report)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("--config", required=True)
    v.set_defaults(func=_cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, IngestionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
