"""Command-line entry point: ``rltorrent run | compare | replay``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 when a
simulation or report step fails at runtime.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from rltorrent.config import ExperimentSpec, bundled_config, load_config, swarm_from_dict
from rltorrent.errors import ConfigError, InvalidInputError
from rltorrent.experiment import compare_report, replay_run, report_text, run_experiment
from rltorrent.metrics import MetricsLedger, dumps, trial_summary

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SPEC_OVERRIDES = ("trials", "master_seed", "name", "output_dir")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(spec: ExperimentSpec, overrides: list[str]) -> ExperimentSpec:
    """Apply ``key=value`` overrides. Swarm fields apply to every variant and
    win over per-variant values; values parse as JSON when they can."""
    swarm_changes = {}
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override {item!r}: expected key=value", field="override")
        value = _parse_value(raw)
        if key in SPEC_OVERRIDES:
            setattr(spec, key, value)
        else:
            swarm_changes[key.removeprefix("swarm.")] = value
    if swarm_changes:
        spec.base = swarm_from_dict(swarm_changes, spec.base, "override")
        for v in spec.variants:
            v.swarm = swarm_from_dict(swarm_changes, v.swarm, f"override[{v.name}]")
    return spec.validate()


def _resolve_config(name: str) -> Path:
    path = Path(name)
    if path.exists() or path.suffix:
        return path
    return bundled_config(name)


def cmd_run(args) -> int:
    spec = load_config(_resolve_config(args.config))
    overrides = list(args.override or [])
    if args.trials is not None:
        overrides.append(f"trials={args.trials}")
    if args.seed is not None:
        overrides.append(f"master_seed={args.seed}")
    spec = apply_overrides(spec, overrides)
    out = Path(args.out) if args.out else Path(spec.output_dir)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    report = run_experiment(spec, out, jobs=args.jobs, log=log)
    print(report_text(report), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    summaries = {}
    for path in args.summaries:
        path = Path(path)
        try:
            summaries[path.stem] = json.loads(path.read_text())
        except FileNotFoundError:
            raise InvalidInputError(f"{path}: no such file") from None
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}: invalid JSON ({exc})") from None
    report = compare_report(summaries)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(dumps(report))
        (out / "report.txt").write_text(report_text(report))
    print(report_text(report), end="")
    return EXIT_OK


def cmd_replay(args) -> int:
    target = Path(args.ledger)
    if target.is_dir():
        report = replay_run(target, args.out)
        print(report_text(report), end="")
        return EXIT_OK
    try:
        ledger = MetricsLedger.read(target)
    except FileNotFoundError as exc:
        raise InvalidInputError(f"{exc.filename}: no such file") from None
    text = dumps(trial_summary(ledger))
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rltorrent", description="Swarm simulator comparing regular and learning-based choking.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every trial of an experiment config")
    run.add_argument("config", help="JSON config path, or a bundled name: default, desk, freeriders")
    run.add_argument("--trials", type=int, help="trials per variant")
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--out", help="output directory")
    run.add_argument("--override", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
    run.add_argument("--jobs", type=int, default=1, help="worker processes for trials")
    run.add_argument("--quiet", action="store_true", help="no per-trial progress on stderr")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="compare stored per-variant summaries")
    cmp_.add_argument("summaries", nargs="+", help="summary JSON files; the first is the baseline")
    cmp_.add_argument("--out", help="directory for report.txt and report.json")
    cmp_.set_defaults(func=cmd_compare)

    rep = sub.add_parser("replay", help="recompute summaries from stored ledgers")
    rep.add_argument("ledger", help="a trial ledger CSV, or a run output directory")
    rep.add_argument("--out", help="output file (ledger) or directory (run)")
    rep.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
