"""Command line: ``cvfl run``, ``cvfl compare`` and ``cvfl verify``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

from .analysis import verify_suite
from .config import COMPRESSORS, REQUIRED, ConfigError, ExperimentConfig, parse_config
from .data import DataError
from .harness import EXIT_OK, comm_cost_report, format_cost_table, run_experiment, write_cost_table

DEFAULTS_HELP = """\
config file: key = value lines, '#' comments, optional [train]/[data]/[codec]/[analysis]/[output]
sections and [party.N] sections overriding compressor/bits/selection/topk_k for party N.
required keys: {required}
defaults: {defaults}
"""

OVERRIDES = {"seed": "seed", "out": "out", "parties": "M", "local_iters": "Q", "rounds": "rounds",
             "batch": "batch", "compressor": "compressor", "bits": "bits"}


def _defaults() -> str:
    fields = [f for f in dataclasses.fields(ExperimentConfig) if f.name not in REQUIRED and f.name != "parties"]
    return ", ".join(f"{f.name}={f.default}" for f in fields)


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--parties", type=int, help="M")
    p.add_argument("--local-iters", type=int, help="Q")
    p.add_argument("--rounds", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--compressor", choices=sorted(COMPRESSORS))
    p.add_argument("--bits", type=int, choices=range(1, 33), metavar="{1..32}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvfl",
        description="Compressed vertical federated learning experiments.",
        epilog=DEFAULTS_HELP.format(required=", ".join(REQUIRED), defaults=_defaults()),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train one configuration and write metrics.csv")
    run.add_argument("config")
    _add_overrides(run)
    cmp_ = sub.add_parser("compare", help="bytes needed to reach a target loss, per configuration")
    cmp_.add_argument("configs", nargs="+")
    cmp_.add_argument("--target", type=float, required=True)
    _add_overrides(cmp_)
    ver = sub.add_parser("verify", help="run the bound-verification suite")
    ver.add_argument("--trials", type=int, default=1000)
    return parser


def load(path: str, args: argparse.Namespace) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        cfg = parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    changes = {OVERRIDES[k]: v for k, v in vars(args).items() if k in OVERRIDES and v is not None}
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    res = run_experiment(load(args.config, args))
    print(f"{res.message}; wrote {res.out / 'metrics.csv'}")
    return res.status


def cmd_compare(args) -> int:
    named, status = [], EXIT_OK
    base_out = args.out
    args.out = None
    for path in args.configs:
        cfg = load(path, args)
        if base_out:
            cfg = cfg.replace(out=str(Path(base_out) / Path(path).stem))
        res = run_experiment(cfg)
        if res.series is None:
            print(f"{path}: {res.message}", file=sys.stderr)
            status = res.status
            continue
        named.append((Path(path).stem, res.series))
    rows = comm_cost_report(named, args.target)
    print(format_cost_table(rows, args.target))
    if base_out:
        write_cost_table(Path(base_out) / "comparison.csv", rows)
    return status


def cmd_verify(args) -> int:
    reports = verify_suite(trials=args.trials)
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} lhs={r.lhs:.6g} rhs={r.rhs:.6g} margin={r.margin:.4g}")
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return 0 if failed == 0 else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return {"run": cmd_run, "compare": cmd_compare, "verify": cmd_verify}[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
