"""Command line entry point: ``gridseed run | extract-curves | validate``.

Exit codes: 0 when every reported method satisfies its constraints (yes or
marginal), 2 when some method violates them, 1 on an execution error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .grid_model import NetworkError, load_network, validate
from .evaluation import (ConfigError, RunConfig, Study, emit_report, exit_status, export_curves, load_config,
                         render_markdown, run)

log = logging.getLogger("gridseed")


def _methods(text: str) -> tuple:
    if text == "all":
        return (0, 1, 2, 3)
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad method list {text!r}") from None


def _formats(text: str) -> tuple:
    out = tuple(f.strip() for f in text.split(",") if f.strip())
    bad = [f for f in out if f not in ("csv", "json", "md")]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown format(s) {bad}")
    return out


def _horizon(text: str) -> str:
    if text == "year":
        return text
    return text if ":" in text else f"worst:{text}"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridseed", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="evaluate control methods and write reports")
    r.add_argument("--case", type=int, choices=(1, 2))
    r.add_argument("--method", type=_methods, help="comma separated subset of 0,1,2,3 or 'all'")
    r.add_argument("--horizon", type=_horizon, help="worst:<season>, typical:<season> or year")
    r.add_argument("--config", help="JSON config file")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--format", type=_formats, default=("csv", "json", "md"))

    e = sub.add_parser("extract-curves", help="derive the seasonal local curves from worst-day OPF runs")
    e.add_argument("--case", type=int, choices=(1, 2))
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)

    v = sub.add_parser("validate", help="check a network JSON file")
    v.add_argument("network")
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.case is not None:
        changes["case"] = args.case
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "method", None) is not None:
        changes["methods"] = args.method
    if getattr(args, "horizon", None) is not None:
        changes["horizon"] = args.horizon
    changes["out_dir"] = args.out
    return replace(cfg, **changes)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors are execution errors; exit code 2 is reserved for violations
        return 0 if exc.code in (0, None) else 1
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            net = load_network(args.network)
            problems = validate(net)
            for p in problems:
                print(p)
            if problems:
                return 2
            print(f"{args.network}: ok ({net.n_bus} buses, {len(net.branches)} branches, {len(net.dgs)} DGs)")
            return 0
        cfg = _config(args)
        if args.command == "extract-curves":
            files = export_curves(Study(cfg), args.out)
            print(f"wrote {len(files)} files to {args.out}")
            return 0
        report = run(cfg)
        emit_report(report, args.out, args.format)
        print(render_markdown(report))
        return exit_status(report)
    except (ConfigError, NetworkError, OSError, ValueError) as exc:
        print(f"gridseed: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report anything else as an execution error
        log.debug("unhandled error", exc_info=True)
        print(f"gridseed: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
