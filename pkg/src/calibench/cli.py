"""Command-line front end: ``calibench <verb> --config PRESET_OR_PATH [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from calibench import harness

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

VERBS = ("simulate", "surface", "calibrate", "compare", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {
                "time": round(record.created, 3),
                "level": record.levelname,
                "logger": record.name,
                "message": record.getMessage(),
            },
            sort_keys=True,
        )


def _setup_logging(json_logs: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        handler.setFormatter(_JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="config file or built-in preset name")
    common.add_argument("--override", action="append", default=[], metavar="K=V", help="override a config key")
    common.add_argument("--out", help="output directory (default: output.dir from the config)")
    common.add_argument("--threads", type=int, default=None, help="maximum worker threads")
    common.add_argument("--json-logs", action="store_true", help="log one JSON object per line")

    p = _Parser(prog="calibench", description="Calibration benchmark for time-series simulation models.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="write the truth series to truth.csv")
    s = sub.add_parser("surface", parents=[common], help="evaluate criteria on a parameter grid")
    s.add_argument("--criterion", action="append", choices=[*harness.CRITERIA, "bayes"], help="repeatable")
    s.add_argument("--axes", help="comma-separated free parameters (default: first one or two)")
    s.add_argument("--resolution", type=int, default=21)
    c = sub.add_parser("calibrate", parents=[common], help="run one calibration method")
    c.add_argument("--method", required=True, choices=[*harness.METHODS, *harness.LABEL_TO_ID])
    sub.add_parser("compare", parents=[common], help="run every configured method")
    r = _Parser(add_help=False)
    r.add_argument("--report", required=True, help="stored report.json")
    r.add_argument("--out", help="output directory (default: next to the report)")
    r.add_argument("--json-logs", action="store_true")
    sub.add_parser("report", parents=[r], help="re-render CSV tables from a stored report")
    return p


def _out_dir(args, cfg: harness.ExperimentConfig) -> Path:
    return Path(args.out) if args.out else cfg.output_dir


def _cmd_simulate(args, cfg) -> list[Path]:
    truth = harness.make_truth_data(cfg)
    rows = [[t, float(v)] for t, v in enumerate(truth.values)]
    path = _out_dir(args, cfg) / "truth.csv"
    return [harness._write(path, harness._csv_text(["t", "value"], rows))]


def _cmd_surface(args, cfg) -> list[Path]:
    axes = args.axes.split(",") if args.axes else list(cfg.free[:2])
    exp = harness.Experiment(cfg)
    out = []
    for crit in args.criterion or list(harness.CRITERIA):
        s = harness.grid_surface(exp, crit, axes, args.resolution)
        out.append(harness._write(_out_dir(args, cfg) / f"surface_{crit}.csv", harness.surface_csv(s)))
    return out


def _run_and_export(args, cfg) -> list[Path]:
    report = harness.run_experiment(cfg, threads=args.threads)
    return harness.export_all(report, _out_dir(args, cfg))


def _cmd_report(args) -> list[Path]:
    if not Path(args.report).is_file():
        raise harness.ConfigError(f"report file not found: {args.report}")
    report = harness.load_report(args.report)
    out = Path(args.out) if args.out else Path(args.report).parent
    return harness.export_report(report, out, "csv")


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    _setup_logging(args.json_logs)
    log = logging.getLogger("calibench")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("calibench: error: --threads must be positive", file=sys.stderr)
        return EXIT_INVALID
    t0 = time.perf_counter()
    try:
        if args.verb == "report":
            written = _cmd_report(args)
        else:
            overrides = list(args.override)
            if args.verb == "calibrate":
                mid = harness.LABEL_TO_ID.get(args.method, args.method)
                overrides.append(f'methods.run=["{mid}"]')
            cfg = harness.load_config(args.config, overrides)
            if args.verb == "simulate":
                written = _cmd_simulate(args, cfg)
            elif args.verb == "surface":
                written = _cmd_surface(args, cfg)
            else:
                written = _run_and_export(args, cfg)
    except (harness.ConfigError, ValueError, KeyError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID
    except Exception as exc:
        log.error("run failed: %s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    for p in written:
        log.info("wrote %s", os.fspath(p))
    log.info("%s finished in %.1fs", args.verb, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
