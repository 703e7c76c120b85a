"""``gridscale`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import load_config
from .pipeline import STAGES, Pipeline, PipelineStageError


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file merged over the defaults")
    common.add_argument("--out-dir", default="runs/default", help="artifact directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--case", help="bundled case name (case14, case30, case118) or a .m/.json path")
    common.add_argument("--fractions", help="comma list of training fractions, e.g. 1/8,1/4,1/2,1")
    common.add_argument("--tasks", help="comma list of tasks")
    common.add_argument("--scenarios", type=int, help="number of scenarios")
    common.add_argument("--responder-cmd", help="external responder command (shell-quoted)")
    common.add_argument("--responder-mode", choices=("oracle", "noisy_oracle", "scaling_emulator"))
    common.add_argument("--jobs", type=int, help="worker processes for simulation")

    ap = argparse.ArgumentParser(prog="gridscale", description="Power-grid QA dataset and evaluation harness.")
    sub = ap.add_subparsers(dest="command", required=True)
    for s in STAGES:
        sub.add_parser(s, parents=[common], help=f"run the {s} stage")
    sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return ap


def _overrides(args) -> dict:
    out = {"seed": args.seed, "case": args.case, "fractions": args.fractions, "tasks": args.tasks,
           "jobs": args.jobs}
    if args.scenarios is not None:
        out["scenarios"] = {"count": args.scenarios}
    responder = {k: v for k, v in (("cmd", args.responder_cmd), ("mode", args.responder_mode)) if v is not None}
    if responder:
        out["responder"] = responder
    return out


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GRIDSCALE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except (OSError, ValueError) as exc:
        print(f"gridscale: configuration error: {exc}", file=sys.stderr)
        return 2
    if args.command == "show-config":
        print(json.dumps(cfg, indent=1, sort_keys=True))
        return 0
    pipe = Pipeline(cfg, args.out_dir)
    try:
        if args.command == "pipeline":
            report = pipe.run()
            print(json.dumps(report["metrics"], indent=1, sort_keys=True))
        else:
            pipe.run_stage(args.command)
    except PipelineStageError as exc:
        print(f"gridscale: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
