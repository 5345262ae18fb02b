"""Command line entry point: ``stratmap run|inspect|export|reflect``.

Exit codes: 0 success, 2 configuration error, 3 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, apply_ablation_flags, load_config, parse_seeds
from .engine import EngineConfig
from .selection import SelectionPolicy

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
    common.add_argument("--seed", help="seed list, e.g. 7, 0-9 or 1,4,7")
    common.add_argument("--episodes", type=int, help="episodes per seed")
    common.add_argument("--max-steps", type=int, help="step budget per episode")
    common.add_argument("--policy", help="thompson, ucb or epsilon_greedy")
    common.add_argument("--ablation", action="append", default=[],
                        help="flat_list, sequential, no_fd or key=value; repeatable")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--mock", dest="proposers", action="store_const", const="mock",
                      help="offline rule-based proposers (default)")
    mode.add_argument("--live", dest="proposers", action="store_const", const="live",
                      help="chat endpoint from STRATMAP_LLM_* environment variables")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stratmap", description="Strategy-map exploration runner.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run all seeds of a configuration")
    r.add_argument("--resume", action="store_true", help="continue from the latest checkpoints")
    r.add_argument("--stop-after", type=int, help="stop each seed after this episode")
    i = sub.add_parser("inspect", parents=[common], help="print a saved map")
    i.add_argument("map")
    e = sub.add_parser("export", parents=[common], help="write plot-ready files from a run")
    e.add_argument("run_dir")
    e.add_argument("what", choices=("scores", "heatmap", "map_dot"))
    f = sub.add_parser("reflect", parents=[common], help="run one reflection cycle on a saved map")
    f.add_argument("map")
    f.add_argument("episodes_log")
    f.add_argument("--episode", type=int, help="episode index to stamp (default: last logged)")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = parse_seeds(args.seed)
    if args.proposers:
        changes["proposers"] = args.proposers
    if args.out and args.command == "run":
        changes["output"] = args.out
    try:
        if args.episodes is not None or args.max_steps is not None:
            e = cfg.engine
            changes["engine"] = EngineConfig(
                args.max_steps if args.max_steps is not None else e.max_steps,
                e.patience_unvisited, e.patience_visited,
                args.episodes if args.episodes is not None else e.episodes,
            )
        if args.policy is not None:
            p = cfg.policy
            changes["policy"] = SelectionPolicy(args.policy, p.c, p.epsilon, p.sigma_prior, p.sigma_min)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = cfg.with_overrides(**changes)
    return apply_ablation_flags(cfg, args.ablation)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import runner

    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            result = runner.run(cfg, resume=args.resume, stop_after=args.stop_after)
            print(json.dumps(result.summary, indent=2, sort_keys=True))
            print(f"artifacts in {result.run_dir}")
        elif args.command == "inspect":
            sys.stdout.write(runner.inspect_map(args.map, cfg.reflection))
        elif args.command == "export":
            for path in runner.export(args.run_dir, args.what, args.out):
                print(path)
        else:
            report = runner.reflect(args.map, args.episodes_log, cfg, args.out, args.episode)
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # every other failure is a runtime fault
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
