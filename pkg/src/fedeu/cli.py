"""Command-line entry point: ``fedeu generate | run | verify``.

Exit codes: 0 success, 1 oracle failure, 2 config error, 3 numeric error,
4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import apply_overrides, default_config, load_config
from .data import generate_task, write_dataset
from .errors import ConfigError, FormatError, NumericError

EXIT_OK = 0
EXIT_ORACLE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _resolve(args):
    cfg = load_config(args.config) if args.config else default_config(args.seed or 0)
    sets = list(getattr(args, "set", None) or [])
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
        if cfg.data is not None:
            sets.append(f"data.seed={args.seed}")
    if getattr(args, "mode", None):
        sets.append(f"federation.mode={args.mode}")
    if getattr(args, "rounds", None) is not None:
        sets.append(f"federation.rounds={args.rounds}")
    if getattr(args, "workers", None) is not None:
        sets.append(f"federation.workers={args.workers}")
    for flag in ("disable_cfe", "disable_tuw", "share_eu_head"):
        if getattr(args, flag, False):
            sets.append(f"ablation.{flag}=true")
    if getattr(args, "out", None) and args.command == "run":
        sets.append(f"output_dir={args.out}")
    return apply_overrides(cfg, sets) if sets else cfg


def cmd_generate(args):
    cfg = _resolve(args)
    if cfg.data is None:
        where = args.config or "<defaults>"
        raise ConfigError(f"{where}: field 'data' is required to generate a dataset")
    clients = generate_task(cfg.data)
    write_dataset(args.out, clients)
    for k, c in enumerate(clients):
        print(f"client {k}: {c.n_train} train, {c.n_test} test")
    print(f"wrote {len(clients)} clients to {args.out}")
    return EXIT_OK


def cmd_run(args):
    from .federation import run_experiment

    cfg = _resolve(args)
    result = run_experiment(cfg)
    summary = json.loads((result.path / "summary.json").read_text())
    total = summary["total"]
    print(f"{summary['rounds']} rounds -> {result.path}")
    print(f"final mean IoU {total['iou']:.4f}  OA {total['oa']:.4f}")
    return EXIT_OK


def cmd_verify(args):
    from .oracles import format_report, run_oracle_suite

    results = run_oracle_suite(samples=args.samples)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_ORACLE


def build_parser():
    parser = argparse.ArgumentParser(prog="fedeu", description="FedEU federated segmentation simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic multi-client dataset")
    gen.add_argument("--config", help="YAML experiment config with a 'data' section")
    gen.add_argument("--out", required=True, help="output dataset file")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    gen.set_defaults(func=cmd_generate)

    run = sub.add_parser("run", help="run a federated experiment")
    run.add_argument("--config", help="YAML experiment config (defaults to the built-in task)")
    run.add_argument("--out", help="experiment output directory")
    run.add_argument("--seed", type=int)
    run.add_argument("--mode", choices=("tuw", "fedavg"))
    run.add_argument("--rounds", type=int)
    run.add_argument("--workers", type=int, help="parallel client threads")
    run.add_argument("--disable-cfe", action="store_true")
    run.add_argument("--disable-tuw", action="store_true")
    run.add_argument("--share-eu-head", action="store_true")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run the numerical oracle suite")
    ver.add_argument("--samples", type=int, default=1_000_000,
                     help="Monte-Carlo draws per Bayes-risk case")
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        where = exc.filename or "<unknown path>"
        print(f"I/O error: {where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
