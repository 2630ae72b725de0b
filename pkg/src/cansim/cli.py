"""Command line entry point.

Subcommands:
  run     simulate a scenario file, write trace.csv / trace.log / summary.json
  serve   host the gateway for live clients (monitor console, scripts)
  slack   print the firewall timing arithmetic for a bitrate/CPU pairing
  export  run a scenario and print one export format to stdout or a file

Exit codes: 0 ok, 2 input/validation error, 3 runtime or bind error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

from .errors import BindError, CanSimError, ConfigError
from .gateway import DEFAULT_PORT, serve
from .metrics import export_csv, export_log, summarize
from .rbt import RuleSet, slack_report
from .scenario import load_scenario, run_scenario

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3


def _fmt_fraction(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return f"{float(value):g}"


def _load(path: str):
    if not os.path.exists(path):
        print(f"error: scenario file not found: {path}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)
    try:
        return load_scenario(path)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"error: invalid scenario {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def cmd_run(args) -> int:
    scenario = _load(args.scenario)
    with_rbt = None
    if args.no_rbt:
        with_rbt = False
    bus, trace = run_scenario(scenario, with_rbt=with_rbt)

    baseline_trace = None
    attached = scenario.attach_rbt and not args.no_rbt and scenario.rules is not None
    if attached and args.paired:
        _, baseline_trace = run_scenario(scenario, with_rbt=False)
    summary = summarize(trace, baseline_trace)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "trace.csv").write_text(export_csv(trace), encoding="utf-8")
    (out_dir / "trace.log").write_text(export_log(trace), encoding="utf-8")
    (out_dir / "summary.json").write_text(
        json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote {out_dir}/trace.csv, trace.log, summary.json")
    print(
        "offered=%d delivered=%d killed=%d bus_off=%d busload=%.3f%%"
        % (
            summary.frames_offered,
            summary.frames_delivered,
            summary.frames_killed,
            len(summary.bus_off_events),
            summary.busload_pct,
        )
    )
    return EXIT_OK


def cmd_serve(args) -> int:
    scenario = _load(args.scenario)
    port = args.port
    if port is None:
        port = int(os.environ.get("CANSIM_PORT", DEFAULT_PORT))
    try:
        server = serve(scenario, port=port, time_scale=args.time_scale)
    except BindError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"gateway listening on 127.0.0.1:{port} (time scale {args.time_scale})")
    try:
        server.wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_slack(args) -> int:
    if args.bitrate <= 0 or args.cpu <= 0 or args.cycles <= 0:
        print("error: bitrate, cpu, and cycles must be positive", file=sys.stderr)
        return EXIT_INPUT
    rules = RuleSet(frozenset(), "after_crc", 0)
    report = slack_report(rules, args.bitrate, args.cpu, args.cycles)
    print(f"bitrate: {report.bitrate} bps")
    print(f"bit time: {_fmt_fraction(report.bit_time_us)} us")
    print(
        f"compute time: {_fmt_fraction(report.compute_time_us)} us"
        f" ({report.cycles_per_decision} cycles at {report.cpu_freq_hz} Hz)"
    )
    for point in ("after_id", "after_data", "after_crc"):
        feasible = "feasible" if report.feasible[point] else "infeasible"
        print(f"slack {point}: {_fmt_fraction(report.slack_us[point])} us ({feasible})")
    print(f"sampling overhead: {_fmt_fraction(report.sampling_overhead_pct)}%")
    return EXIT_OK


def cmd_export(args) -> int:
    scenario = _load(args.scenario)
    _, trace = run_scenario(scenario)
    text = export_csv(trace) if args.format == "csv" else export_log(trace)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cansim", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file headless")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--no-rbt", action="store_true",
                       help="run without the firewall even if the scenario attaches it")
    p_run.add_argument("--paired", action="store_true",
                       help="also run without the firewall to report its busload cost")
    p_run.set_defaults(func=cmd_run)

    p_serve = sub.add_parser("serve", help="serve the gateway")
    p_serve.add_argument("--scenario", required=True)
    p_serve.add_argument("--port", type=int, default=None,
                         help=f"listen port (default env CANSIM_PORT or {DEFAULT_PORT})")
    p_serve.add_argument("--time-scale", type=float, default=1.0,
                         help="simulated us per real us; 0 = advance only on commands")
    p_serve.set_defaults(func=cmd_serve)

    p_slack = sub.add_parser("slack", help="print firewall timing arithmetic")
    p_slack.add_argument("--bitrate", type=int, required=True)
    p_slack.add_argument("--cpu", type=int, required=True, help="CPU frequency in Hz")
    p_slack.add_argument("--cycles", type=int, required=True, help="cycles per decision")
    p_slack.set_defaults(func=cmd_slack)

    p_export = sub.add_parser("export", help="run a scenario and export its trace")
    p_export.add_argument("--scenario", required=True)
    p_export.add_argument("--format", choices=("csv", "log"), default="csv")
    p_export.add_argument("--out", default=None)
    p_export.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        raise exc
    except BindError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except CanSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
