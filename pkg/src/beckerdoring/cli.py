"""``beckerdoring`` command line.

    beckerdoring run CONFIG [--override KEY=VALUE ...] [--out DIR] [--seed N] [--threads N]
    beckerdoring verify {fast,full}

Exit codes: 0 success, 1 an acceptance check failed, 2 invalid input or
usage, 3 numerical failure (the report with its failure section is still
written).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import io
from .acceptance import SUITES, run_suite
from .exceptions import NUMERICAL_ERRORS, BDError, ConfigError
from .experiments import RUNNERS

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _u64(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    p = _Parser(prog="beckerdoring", description="Becker-Doring equilibria, dynamics and decay experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="run one experiment from a config file")
    r.add_argument("config_path", nargs="?", help="config file (key = value lines or JSON)")
    r.add_argument("--config", dest="config_flag", metavar="PATH", help="config file (alternative to the positional)")
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    r.add_argument("--out", metavar="DIR", help="output directory (created if missing)")
    r.add_argument("--seed", type=_u64, help="seed for all sampling")
    r.add_argument("--threads", type=int, help="BLAS thread limit")
    v = sub.add_parser("verify", help="run the acceptance battery")
    v.add_argument("suite", help=f"one of {', '.join(SUITES)}")
    v.add_argument("--out", metavar="DIR", help="also write verify.json here")
    return p


def _failure(exc):
    return {"type": type(exc).__name__, "message": str(exc)}


def run(config_path, overrides=(), out=None, seed=None, threads=None, echo=print):
    """Run one experiment; returns the exit code."""
    try:
        pairs = [io.parse_override(o) for o in overrides]
        cfg = io.load_config(config_path, pairs, seed, threads)
    except ConfigError as exc:
        echo(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out_dir = Path(out or cfg["out"] or ".")
    if out is not None:
        cfg = io.ExperimentConfig({**cfg.values, "out": str(out)})
    kind = cfg["kind"]
    head = {"kind": kind, "config": cfg.values, "config_hash": cfg.digest}
    code = EXIT_OK
    try:
        with threadpool_limits(limits=cfg["threads"]):
            report, tables = RUNNERS[kind](cfg)
        body = {**head, "status": "ok", "result": report}
    except NUMERICAL_ERRORS as exc:
        body = {**head, "status": "failed", "failure": _failure(exc), "result": getattr(exc, "report", None)}
        tables = {}
        code = EXIT_NUMERICAL
    except (BDError, ValueError) as exc:
        body = {**head, "status": "invalid", "failure": _failure(exc), "result": None}
        tables = {}
        code = EXIT_INVALID
    for name, (header, rows) in tables.items():
        io.write_csv(out_dir / name, header, rows)
    io.write_json(out_dir / f"{kind}.json", body)
    if code == EXIT_OK:
        echo(f"{kind}: wrote {', '.join(sorted([*tables, f'{kind}.json']))} to {out_dir}")
    else:
        echo(f"{kind}: {body['status']}: {body['failure']['message']}", file=sys.stderr)
    return code


def verify(suite, out=None, echo=print):
    if suite not in SUITES:
        echo(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_INVALID
    res = run_suite(suite, echo=echo)
    n_pass = sum(r.passed for r in res.results)
    echo(f"{n_pass}/{len(res.results)} checks passed ({suite})")
    if out is not None:
        io.write_json(Path(out) / "verify.json", {"suite": suite, "passed": res.passed,
                                                  "checks": [r.to_dict() for r in res.results]})
    return EXIT_OK if res.passed else EXIT_FAIL


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        return verify(args.suite, args.out)
    path = args.config_flag or args.config_path
    if path is None or (args.config_flag and args.config_path):
        print("run: give exactly one config (positional or --config)", file=sys.stderr)
        return EXIT_INVALID
    return run(path, args.override, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
