"""Command line entry point: ``oseenstab <stage> --config run.toml``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .export import ExportError, export_run
from .pipeline import COMMAND_STAGES, build_report, exit_code, run_pipeline

log = logging.getLogger("oseenstab")


def build_parser():
    ap = argparse.ArgumentParser(prog="oseenstab",
                                 description="Boundary feedback stabilization of discrete Oseen flows.")
    ap.add_argument("command", choices=list(COMMAND_STAGES),
                    help="run the pipeline up to this stage (verify and run also evaluate the checks)")
    ap.add_argument("--config", required=True, metavar="PATH", help="TOML run configuration")
    ap.add_argument("--out", metavar="DIR", help="output directory (default: output.dir from the config)")
    ap.add_argument("--seed", type=int, default=0, metavar="N", help="run seed (default 0)")
    ap.add_argument("--check-only", action="store_true", help="validate the configuration and exit")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {args.config}: {exc}", file=sys.stderr)
        return 1
    if args.check_only:
        print(f"config ok: {args.config} (hash {cfg.digest()[:12]})")
        return 0
    state = run_pipeline(cfg, seed=args.seed, command=args.command)
    report = build_report(state)
    try:
        paths = export_run(state, report, args.out or cfg.output.dir, args.command)
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 1
    for s in report["stages"]:
        line = f"stage {s['name']}: {s['status']}"
        print(line + (f" ({s['message']})" if s["message"] else ""))
    if args.command in ("verify", "run"):
        for c in report["checks"]:
            print(f"{c['id']}: {c['status']}")
    print(f"report: {paths[-1]}")
    code = exit_code(report)
    if code:
        summ = report["summary"]
        if summ["failed_stages"]:
            print("failed stages: " + ", ".join(summ["failed_stages"]), file=sys.stderr)
        if summ["failing_checks"]:
            print("failing checks: " + ", ".join(summ["failing_checks"]), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
