"""Multi-trial A/B experiments: run variants, store ledgers, build reports.

Output layout under the experiment's output directory::

    ledgers/<variant>/trial_00.csv          transfer ledger (+ .unchokes.csv, .peers.csv)
    ledgers/<variant>/trial_00.summary.json per-trial summary
    summaries/<variant>.json                pooled per-variant summary
    report.txt, report.json                 comparison across variants
    experiment.json                         the resolved experiment spec
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from rltorrent.config import ExperimentSpec, SwarmConfig
from rltorrent.errors import ContractError
from rltorrent.metrics import MetricsLedger, dumps, trial_summary, variant_summary
from rltorrent.sim import init_world, step


class TrialError(RuntimeError):
    """A trial crashed; names the variant, trial index and tick."""

    def __init__(self, variant: str, trial: int, tick: int, cause: BaseException):
        super().__init__(f"variant {variant!r} trial {trial} failed at tick {tick}: {type(cause).__name__}: {cause}")
        self.variant = variant
        self.trial = trial
        self.tick = tick


def _completion(group):
    return lambda s: s["completion"].get(group, {}).get("median")


def _median(values):
    vals = sorted(v for v in values if v is not None)
    if not vals:
        return None
    mid = len(vals) // 2
    return vals[mid] if len(vals) % 2 else (vals[mid - 1] + vals[mid]) / 2


# Rows of the comparison: (key, label, getter over a pooled variant summary).
REPORT_METRICS = [
    ("completion_top20", "median completion, top-20% capacity (ticks)", _completion("top20")),
    ("completion_bottom80", "median completion, bottom-80% capacity (ticks)", _completion("bottom80")),
    ("completion_all", "median completion, all contributors (ticks)", _completion("all")),
    ("completion_freeriders", "median completion, free-riders (ticks)", _completion("freeriders")),
    ("fluctuation", "mean unchoke changes per peer per tick", lambda s: s["fluctuation_mean"]),
    ("top_unchoke_share", "median top-20% unchoke share", lambda s: _median(s["top_unchoke_share"])),
    ("freerider_upload_share", "contributor upload share to free-riders", lambda s: s["freerider_upload_share"]),
    ("min_dl_ul_ratio", "minimum download/upload rate ratio", lambda s: s["min_contributor_dl_ul_ratio"]),
]


def percent_change(base, other):
    """Relative change of ``other`` against ``base`` in percent; ``None`` when undefined."""
    if base is None or other is None or base == 0:
        return None
    return 100.0 * (other - base) / base


def run_trial(config: SwarmConfig, variant: str = "", trial: int = 0) -> MetricsLedger:
    world = init_world(config)
    try:
        while not world.done:
            step(world)
    except Exception as exc:  # noqa: BLE001 - re-raised with trial context
        raise TrialError(variant, trial, world.tick, exc) from exc
    world.ledger.ticks = world.tick
    return world.ledger


def _trial_job(args):
    config, variant, trial, stem = args
    ledger = run_trial(config, variant, trial)
    ledger.write(stem)
    summary = trial_summary(ledger)
    Path(f"{stem}.summary.json").write_text(dumps(summary))
    return summary


def compare_report(summaries: dict) -> dict:
    """Comparison of variant summaries against the first one.

    ``summaries`` maps variant name to a pooled variant summary, in report
    order. With a single variant no deltas are produced.
    """
    if not summaries:
        raise ContractError("no variant summaries to compare")
    names = list(summaries)
    groups = {n: sorted(summaries[n]["completion"]) for n in names}
    ref = groups[names[0]]
    for n in names[1:]:
        if groups[n] != ref:
            raise ContractError(f"variant {n!r} reports groups {groups[n]}, expected {ref}")
    base = names[0]
    metrics = {}
    for key, label, get in REPORT_METRICS:
        values = {n: get(summaries[n]) for n in names}
        entry = {"label": label, "values": values}
        if len(names) > 1:
            entry["percent_change"] = {n: percent_change(values[base], values[n]) for n in names[1:]}
        metrics[key] = entry
    return {"baseline": base, "variants": names, "metrics": metrics}


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, int):
        return str(v)
    return f"{v:.4g}"


def _fmt_pct(v) -> str:
    return "-" if v is None else f"{v:+.1f}%"


def report_text(report: dict) -> str:
    names = report["variants"]
    base = report["baseline"]
    header = ["metric"] + names + [f"{n} vs {base}" for n in names[1:]]
    rows = [header]
    for entry in report["metrics"].values():
        row = [entry["label"]] + [_fmt(entry["values"][n]) for n in names]
        row += [_fmt_pct(entry["percent_change"][n]) for n in names[1:]]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip() for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def spec_to_dict(spec: ExperimentSpec) -> dict:
    return {
        "name": spec.name,
        "trials": spec.trials,
        "master_seed": spec.master_seed,
        "seeds": spec.seeds,
        "variants": [{"name": v.name, "swarm": dataclasses.asdict(v.swarm)} for v in spec.variants],
    }


def run_experiment(spec: ExperimentSpec, out=None, jobs: int = 1, log=None) -> dict:
    """Run every trial of every variant and write ledgers, summaries and the report.

    Returns the comparison report. Trials are independent; ``jobs > 1`` runs
    them in worker processes. Output bytes do not depend on ``jobs``.
    """
    spec.validate()
    out = Path(out if out is not None else spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(dumps(spec_to_dict(spec)))
    tasks = []
    for variant in spec.variants:
        for k, seed in enumerate(spec.seeds):
            cfg = dataclasses.replace(variant.swarm, rng_seed=seed)
            tasks.append((cfg, variant.name, k, str(out / "ledgers" / variant.name / f"trial_{k:02d}")))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_trial_job, tasks))
    else:
        results = []
        for task in tasks:
            results.append(_trial_job(task))
            if log is not None:
                log(f"{task[1]} trial {task[2]} done")
    per_variant: dict = {v.name: [] for v in spec.variants}
    for task, summary in zip(tasks, results):
        per_variant[task[1]].append(summary)
    return write_reports(per_variant, out)


def write_reports(per_variant: dict, out) -> dict:
    out = Path(out)
    (out / "summaries").mkdir(parents=True, exist_ok=True)
    summaries = {}
    for name, trials in per_variant.items():
        summaries[name] = variant_summary(trials)
        (out / "summaries" / f"{name}.json").write_text(dumps(summaries[name]))
    report = compare_report(summaries)
    (out / "report.json").write_text(dumps(report))
    (out / "report.txt").write_text(report_text(report))
    return report


def ledger_stems(run_dir) -> dict:
    """Stored trial ledgers of a run directory, grouped by variant in experiment order."""
    run_dir = Path(run_dir)
    meta = run_dir / "experiment.json"
    if meta.exists():
        order = [v["name"] for v in json.loads(meta.read_text())["variants"]]
    else:
        order = sorted(p.name for p in (run_dir / "ledgers").iterdir() if p.is_dir())
    stems = {}
    for name in order:
        files = sorted((run_dir / "ledgers" / name).glob("trial_*.peers.csv"))
        stems[name] = [f.with_name(f.name[: -len(".peers.csv")]) for f in files]
    return stems


def replay_run(run_dir, out=None) -> dict:
    """Recompute every summary and the report from a run directory's ledgers."""
    per_variant = {}
    for name, stems in ledger_stems(run_dir).items():
        per_variant[name] = [trial_summary(MetricsLedger.read(f"{s}.csv")) for s in stems]
    return write_reports(per_variant, out if out is not None else run_dir)
