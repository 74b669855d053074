"""Command-line driver.

Subcommands: pretrain, train-supernet, search, shortlist, eval, ablate,
analyze, export. Config precedence: built-in defaults < config file <
--profile preset < --set/flag overrides. ADAPTSEARCH_OUT overrides the
configured output directory; --out overrides both.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, ExperimentConfig, PROFILES, parse_assignments, resolve_config
from .harness import (
    EVAL_METHODS,
    MissingArtifactError,
    run_ablation,
    run_analyze,
    run_eval,
    run_export,
    run_pretrain,
    run_search,
    run_shortlist,
    run_train_supernet,
)

OUTPUT_DIR_ENV = "ADAPTSEARCH_OUT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptsearch",
        description="Train a weight-sharing adaptation supernet, search it, and evaluate.",
    )
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="named preset applied over the file")
    parser.add_argument("--out", help="output directory (overrides config and env)")
    parser.add_argument("--seed", type=int, help="experiment seed")
    parser.add_argument(
        "--set",
        dest="assignments",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", help="episodically pre-train the plain backbone")
    sub.add_parser("train-supernet", help="train the weight-sharing supernet")
    sub.add_parser("search", help="run the evolutionary path search")
    sub.add_parser("shortlist", help="select the diversity-constrained top-N paths")

    p_eval = sub.add_parser("eval", help="evaluate one method on the meta-test domains")
    p_eval.add_argument("--method", required=True, choices=EVAL_METHODS)
    p_eval.add_argument("--episodes", type=int, help="episodes per test domain")

    p_ablate = sub.add_parser("ablate", help="run all six methods on identical episodes")
    p_ablate.add_argument("--episodes", type=int, help="episodes per test domain")

    sub.add_parser("analyze", help="decision-bit / fitness correlations from the history")
    sub.add_parser("export", help="export history snapshots for external projection")
    return parser


def _resolve(args: argparse.Namespace) -> ExperimentConfig:
    overrides = parse_assignments(args.assignments)
    if args.seed is not None:
        overrides["seed"] = args.seed
    env_out = os.environ.get(OUTPUT_DIR_ENV)
    if env_out:
        overrides["output_dir"] = env_out
    if args.out:
        overrides["output_dir"] = args.out
    return resolve_config(args.config, args.profile, overrides)


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "pretrain":
            out = run_pretrain(cfg)
            print(f"pretrain: wrote {out}")
        elif args.command == "train-supernet":
            out = run_train_supernet(cfg)
            print(f"train-supernet: wrote {out}")
        elif args.command == "search":
            out = run_search(cfg)
            print(f"search: wrote {out}")
        elif args.command == "shortlist":
            out = run_shortlist(cfg)
            print(f"shortlist: wrote {out}")
        elif args.command == "eval":
            out = run_eval(cfg, args.method, args.episodes)
            print(f"eval[{args.method}]: wrote {out}")
        elif args.command == "ablate":
            out = run_ablation(cfg, args.episodes)
            print(f"ablate: wrote {out}")
        elif args.command == "analyze":
            out = run_analyze(cfg)
            print(f"analyze: wrote {out}")
        elif args.command == "export":
            out = run_export(cfg)
            print(f"export: wrote {out}")
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command!r}")
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
