"""Run ledger and every derived quantity used to compare swarms.

Ledger files
------------
A trial is stored as three CSV files sharing a stem:

``<stem>.csv``
    ``tick,from,to,bytes`` -- one row per sender/receiver pair that moved
    bytes during a tick, sorted by tick, sender, receiver.
``<stem>.unchokes.csv``
    ``tick,peer,unchoked`` -- every present peer's unchoke set per tick;
    ``unchoked`` is a space-separated, ascending list of ids (may be empty).
``<stem>.peers.csv``
    ``id,slot,kind,capacity,join_tick,complete_tick,generation`` -- one row per
    peer identity. ``capacity`` is bytes per tick; ``complete_tick`` is empty
    for identities that never finished.

A header comment line ``# file_size=<bytes> ticks=<n>`` opens the peers file.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

TOP_FRACTION = 0.2


@dataclass
class PeerRecord:
    id: int
    slot: int
    kind: str
    capacity: int
    join_tick: int
    complete_tick: int | None = None
    generation: int = 0

    @property
    def is_leecher(self) -> bool:
        return self.kind != "seed"

    @property
    def is_freerider(self) -> bool:
        return self.kind == "freerider"

    @property
    def is_contributor(self) -> bool:
        return self.kind in ("regular", "rl")

    @property
    def completion_time(self) -> int | None:
        return None if self.complete_tick is None else self.complete_tick - self.join_tick


@dataclass
class MetricsLedger:
    file_size: int = 0
    ticks: int = 0
    peers: dict = field(default_factory=dict)
    transfers: list = field(default_factory=list)  # (tick, src, dst, bytes)
    unchokes: list = field(default_factory=list)  # (tick, peer, tuple of ids)

    def add_peer(self, rec: PeerRecord) -> None:
        self.peers[rec.id] = rec

    def record_transfer(self, tick: int, src: int, dst: int, nbytes: int) -> None:
        self.transfers.append((tick, src, dst, int(nbytes)))

    def record_unchokes(self, tick: int, peer: int, unchoked: Iterable) -> None:
        self.unchokes.append((tick, peer, tuple(sorted(unchoked))))

    def uploaded(self) -> dict:
        out: dict = {}
        for _, src, _, b in self.transfers:
            out[src] = out.get(src, 0) + b
        return out

    def downloaded(self) -> dict:
        out: dict = {}
        for _, _, dst, b in self.transfers:
            out[dst] = out.get(dst, 0) + b
        return out

    # -- serialization --------------------------------------------------------

    def write(self, stem) -> Path:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        main = stem.with_name(stem.name + ".csv")
        main.write_text(self.transfers_csv())
        stem.with_name(stem.name + ".unchokes.csv").write_text(self.unchokes_csv())
        stem.with_name(stem.name + ".peers.csv").write_text(self.peers_csv())
        return main

    def transfers_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tick", "from", "to", "bytes"])
        w.writerows(sorted(self.transfers))
        return buf.getvalue()

    def unchokes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tick", "peer", "unchoked"])
        for tick, peer, ids in sorted(self.unchokes):
            w.writerow([tick, peer, " ".join(map(str, ids))])
        return buf.getvalue()

    def peers_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# file_size={self.file_size} ticks={self.ticks}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "slot", "kind", "capacity", "join_tick", "complete_tick", "generation"])
        for pid in sorted(self.peers):
            r = self.peers[pid]
            w.writerow([r.id, r.slot, r.kind, r.capacity, r.join_tick, "" if r.complete_tick is None else r.complete_tick, r.generation])
        return buf.getvalue()

    @classmethod
    def read(cls, path) -> "MetricsLedger":
        """Load a ledger from its main CSV (or the shared stem)."""
        path = Path(path)
        name = path.name
        for suffix in (".unchokes.csv", ".peers.csv", ".csv"):
            if name.endswith(suffix):
                name = name[: -len(suffix)]
                break
        stem = path.with_name(name)
        ledger = cls()
        with open(stem.with_name(name + ".peers.csv")) as fh:
            header = fh.readline().lstrip("# ").split()
            meta = dict(item.split("=") for item in header)
            ledger.file_size = int(meta["file_size"])
            ledger.ticks = int(meta["ticks"])
            for row in csv.DictReader(fh):
                ledger.add_peer(
                    PeerRecord(
                        id=int(row["id"]),
                        slot=int(row["slot"]),
                        kind=row["kind"],
                        capacity=int(row["capacity"]),
                        join_tick=int(row["join_tick"]),
                        complete_tick=int(row["complete_tick"]) if row["complete_tick"] else None,
                        generation=int(row["generation"]),
                    )
                )
        with open(stem.with_name(name + ".csv")) as fh:
            for row in csv.DictReader(fh):
                ledger.transfers.append((int(row["tick"]), int(row["from"]), int(row["to"]), int(row["bytes"])))
        with open(stem.with_name(name + ".unchokes.csv")) as fh:
            for row in csv.DictReader(fh):
                ids = tuple(int(x) for x in row["unchoked"].split())
                ledger.unchokes.append((int(row["tick"]), int(row["peer"]), ids))
        return ledger


# -- quantities ---------------------------------------------------------------


def fluctuation_count(prev, cur) -> int:
    """Number of unchoke-slot replacements between two consecutive decisions."""
    prev, cur = set(prev), set(cur)
    return max(len(cur - prev), len(prev - cur))


def mean_fluctuation(ledger: MetricsLedger, who: Callable[[PeerRecord], bool] | None = None) -> float:
    """Mean changes per tick per peer, over consecutive ticks a peer was present.

    By default only contributing leechers are counted.
    """
    who = who or (lambda r: r.is_contributor)
    last: dict = {}
    total = 0
    n = 0
    for tick, peer, ids in sorted(ledger.unchokes):
        rec = ledger.peers.get(peer)
        if rec is None or not who(rec):
            continue
        prev = last.get(peer)
        if prev is not None and prev[0] == tick - 1:
            total += fluctuation_count(prev[1], ids)
            n += 1
        last[peer] = (tick, ids)
    return total / n if n else 0.0


@dataclass
class SummaryStats:
    n: int = 0
    median: float = math.nan
    q25: float = math.nan
    q75: float = math.nan
    whisker_low: float = math.nan
    whisker_high: float = math.nan
    outliers: list = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.n == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def nearest_rank(sorted_values, p: float):
    n = len(sorted_values)
    k = max(1, math.ceil(p * n))
    return sorted_values[k - 1]


def summarize(values) -> SummaryStats:
    vals = sorted(values)
    if not vals:
        return SummaryStats()
    q25, med, q75 = (nearest_rank(vals, p) for p in (0.25, 0.5, 0.75))
    iqr = q75 - q25
    lo, hi = q25 - 1.5 * iqr, q75 + 1.5 * iqr
    inside = [v for v in vals if lo <= v <= hi]
    return SummaryStats(
        n=len(vals),
        median=med,
        q25=q25,
        q75=q75,
        whisker_low=min(inside),
        whisker_high=max(inside),
        outliers=[v for v in vals if v < lo or v > hi],
    )


def completion_times(ledger: MetricsLedger, group: Callable[[PeerRecord], bool] | None = None, first_lifetime: bool = True) -> list[int]:
    out = []
    for pid in sorted(ledger.peers):
        rec = ledger.peers[pid]
        if not rec.is_leecher or rec.completion_time is None:
            continue
        if first_lifetime and rec.generation != 0:
            continue
        if group is not None and not group(rec):
            continue
        out.append(rec.completion_time)
    return out


def completion_stats(ledger: MetricsLedger, group: Callable[[PeerRecord], bool] | None = None, first_lifetime: bool = True) -> SummaryStats:
    return summarize(completion_times(ledger, group, first_lifetime))


def top_capacity_threshold(ledger: MetricsLedger, fraction: float = TOP_FRACTION) -> int:
    """Smallest capacity among the fastest ``fraction`` of first-lifetime contributors."""
    caps = sorted((r.capacity for r in ledger.peers.values() if r.is_contributor and r.generation == 0), reverse=True)
    if not caps:
        return 0
    k = max(1, math.ceil(fraction * len(caps)))
    return caps[k - 1]


def top_capacity_ids(ledger: MetricsLedger, fraction: float = TOP_FRACTION) -> set:
    cut = top_capacity_threshold(ledger, fraction)
    return {r.id for r in ledger.peers.values() if r.is_contributor and r.capacity >= cut and cut > 0}


def top_capacity_unchoke_share(ledger: MetricsLedger, top_fraction: float = TOP_FRACTION) -> float:
    """Share of unchoke slot-ticks granted by top-capacity leechers that went to
    other top-capacity leechers."""
    top = top_capacity_ids(ledger, top_fraction)
    granted = 0
    inside = 0
    for _, peer, ids in ledger.unchokes:
        if peer in top:
            granted += len(ids)
            inside += sum(1 for i in ids if i in top)
    return inside / granted if granted else 0.0


@dataclass
class FairnessPoint:
    id: int
    download_rate: float
    upload_rate: int
    ratio: float | None


def fairness_ratios(ledger: MetricsLedger, first_lifetime: bool = True) -> dict:
    """Per leecher: lifetime-average download rate (bytes per tick) against its
    configured upload capacity. ``ratio`` is ``None`` for capacity-0 peers."""
    down = ledger.downloaded()
    out = {}
    for rec in ledger.peers.values():
        if not rec.is_leecher or (first_lifetime and rec.generation != 0):
            continue
        end = rec.complete_tick if rec.complete_tick is not None else ledger.ticks
        duration = end - rec.join_tick
        if duration <= 0:
            continue
        rate = down.get(rec.id, 0) / duration
        ratio = rate / rec.capacity if rec.capacity > 0 else None
        out[rec.id] = FairnessPoint(rec.id, rate, rec.capacity, ratio)
    return out


@dataclass
class Exposure:
    leecher_share: float
    from_seeds: float
    from_leechers: float
    freerider_bytes: int = 0
    leecher_upload_bytes: int = 0


def freerider_exposure(ledger: MetricsLedger) -> Exposure:
    """Share of contributing-leecher upload that went to free-riders, and where
    free-riders' downloads came from."""
    peers = ledger.peers
    leech_total = 0
    to_fr = 0
    fr_from_seed = 0
    fr_from_leech = 0
    for _, src, dst, b in ledger.transfers:
        s, d = peers[src], peers[dst]
        if s.is_contributor:
            leech_total += b
            if d.is_freerider:
                to_fr += b
        if d.is_freerider:
            if s.kind == "seed":
                fr_from_seed += b
            else:
                fr_from_leech += b
    fr_total = fr_from_seed + fr_from_leech
    return Exposure(
        leecher_share=to_fr / leech_total if leech_total else 0.0,
        from_seeds=fr_from_seed / fr_total if fr_total else 0.0,
        from_leechers=fr_from_leech / fr_total if fr_total else 0.0,
        freerider_bytes=to_fr,
        leecher_upload_bytes=leech_total,
    )


# -- summaries ----------------------------------------------------------------


def _groups(ledger: MetricsLedger) -> dict:
    top = top_capacity_ids(ledger)
    groups = {
        "all": lambda r: r.is_contributor,
        "top20": lambda r: r.id in top,
        "bottom80": lambda r: r.is_contributor and r.id not in top,
        "freeriders": lambda r: r.is_freerider,
    }
    for cap in sorted({r.capacity for r in ledger.peers.values() if r.is_contributor}):
        groups[f"capacity={cap}"] = lambda r, cap=cap: r.is_contributor and r.capacity == cap
    return groups


def trial_summary(ledger: MetricsLedger) -> dict:
    """Everything reported for a single trial, as plain JSON-able data."""
    exp = freerider_exposure(ledger)
    fair = fairness_ratios(ledger)
    return {
        "ticks": ledger.ticks,
        "completion": {name: completion_times(ledger, g) for name, g in _groups(ledger).items()},
        "fluctuation": mean_fluctuation(ledger),
        "top_unchoke_share": top_capacity_unchoke_share(ledger),
        "exposure": asdict(exp),
        "fairness": {str(k): [v.download_rate, v.upload_rate] for k, v in sorted(fair.items())},
    }


def variant_summary(trials: list[dict]) -> dict:
    """Pool per-trial summaries of one variant into box statistics and means."""
    names = sorted({name for t in trials for name in t["completion"]})
    completion = {}
    for name in names:
        pooled = [v for t in trials for v in t["completion"].get(name, [])]
        completion[name] = summarize(pooled).to_dict()
    fr_bytes = sum(t["exposure"]["freerider_bytes"] for t in trials)
    up_bytes = sum(t["exposure"]["leecher_upload_bytes"] for t in trials)
    min_ratio = None
    for t in trials:
        for dl, ul in t["fairness"].values():
            if ul > 0:
                r = dl / ul
                min_ratio = r if min_ratio is None else min(min_ratio, r)
    return {
        "trials": len(trials),
        "completion": completion,
        "fluctuation_mean": sum(t["fluctuation"] for t in trials) / len(trials),
        "top_unchoke_share": [t["top_unchoke_share"] for t in trials],
        "freerider_upload_share": fr_bytes / up_bytes if up_bytes else 0.0,
        "min_contributor_dl_ul_ratio": min_ratio,
    }


def dumps(obj) -> str:
    """Canonical JSON used for every written summary (byte-stable)."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
