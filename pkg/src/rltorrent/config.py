"""Swarm and experiment configuration, with strict JSON loading.

Rates in configuration files are in KB/s; the engine works in bytes per
rechoke period (one tick).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from rltorrent.errors import ConfigError

KB = 1024
STRATEGY_KINDS = ("regular", "rl")

# Synthetic five-bucket upload-capacity distribution in KB/s. The top 20% sit
# at or above 18 KB/s; the rest form a heavy low-capacity tail.
DEFAULT_CAPACITY_DISTRIBUTION = [
    [40.0, 0.1],
    [20.0, 0.1],
    [4.0, 0.2],
    [3.0, 0.3],
    [2.0, 0.3],
]


@dataclass
class SwarmConfig:
    n_leechers: int = 50
    n_seeds: int = 2
    seed_capacity_total: float = 64.0
    capacity_distribution: list = field(default_factory=lambda: [list(b) for b in DEFAULT_CAPACITY_DISTRIBUTION])
    file_size: int = 20 * KB * KB
    piece_size: int = 128 * KB
    rechoke_period: float = 10.0
    strategy_mix: dict = field(default_factory=lambda: {"regular": 50})
    n_freeriders: int = 0
    churn_enabled: bool = True
    rng_seed: int = 0
    max_ticks: int = 3000
    l_max: float | None = None
    alpha: float = 0.5
    gamma: float = 0.9
    eps: float = 1e-6
    T: int = 7
    c1: int = 4
    c2: int = 2
    policy_validity: int = 3
    theta_mode: str = "median"
    theta_value: float = 0.0
    nu_min: int = 4
    nu_max: int = 7
    switch_mode: str = "at_most_one"
    seed_slots: int = 4
    regular_max_slots: int = 7
    saturation: float = 0.9
    ramp_ticks: int = 3

    @property
    def n_pieces(self) -> int:
        return -(-self.file_size // self.piece_size)

    def bytes_per_tick(self, kb_per_s: float) -> int:
        return int(round(kb_per_s * KB * self.rechoke_period))

    def validate(self) -> "SwarmConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}", field=name)

        for name in ("n_leechers", "n_seeds", "n_freeriders", "max_ticks", "rng_seed"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 0, name, "must be a non-negative integer")
        need(self.rng_seed < 2**64, "rng_seed", "must fit in 64 bits")
        need(self.file_size > 0, "file_size", "must be positive")
        need(self.piece_size > 0, "piece_size", "must be positive")
        need(self.rechoke_period > 0, "rechoke_period", "must be positive")
        need(self.seed_capacity_total >= 0, "seed_capacity_total", "must be non-negative")
        need(self.n_seeds == 0 or self.seed_capacity_total > 0, "seed_capacity_total", "seeds need capacity")
        buckets = self.capacity_distribution
        need(isinstance(buckets, list) and len(buckets) > 0, "capacity_distribution", "must be a non-empty list")
        for b in buckets:
            need(isinstance(b, (list, tuple)) and len(b) == 2, "capacity_distribution", "buckets are [rate, fraction] pairs")
            need(b[0] > 0 and b[1] >= 0, "capacity_distribution", "rates must be positive, fractions non-negative")
        total = sum(b[1] for b in buckets)
        need(abs(total - 1.0) <= 1e-9, "capacity_distribution", f"fractions sum to {total}, not 1")
        need(isinstance(self.strategy_mix, dict), "strategy_mix", "must map strategy kind to count")
        for kind, count in self.strategy_mix.items():
            need(kind in STRATEGY_KINDS, "strategy_mix", f"unknown strategy kind {kind!r}")
            need(isinstance(count, int) and count >= 0, "strategy_mix", "counts must be non-negative integers")
        need(
            sum(self.strategy_mix.values()) + self.n_freeriders == self.n_leechers,
            "strategy_mix",
            "strategy counts plus n_freeriders must equal n_leechers",
        )
        need(0.0 < self.alpha < 1.0, "alpha", "must lie in (0, 1)")
        need(0.0 <= self.gamma < 1.0, "gamma", "must lie in [0, 1)")
        need(self.eps > 0, "eps", "must be positive")
        need(self.T >= 1, "T", "must be >= 1")
        need(self.c1 > self.c2 >= 1, "c1", "need c1 > c2 >= 1")
        need(self.policy_validity >= 0, "policy_validity", "must be non-negative")
        need(self.theta_mode in ("median", "fixed"), "theta_mode", "must be 'median' or 'fixed'")
        need(self.theta_value >= 0, "theta_value", "must be non-negative")
        need(1 <= self.nu_min <= self.nu_max, "nu_min", "need 1 <= nu_min <= nu_max")
        need(self.switch_mode in ("at_most_one", "exactly_one"), "switch_mode", "must be 'at_most_one' or 'exactly_one'")
        need(self.seed_slots >= 1, "seed_slots", "must be >= 1")
        need(self.regular_max_slots >= 2, "regular_max_slots", "must be >= 2")
        need(0.0 < self.saturation <= 1.0, "saturation", "must lie in (0, 1]")
        need(self.ramp_ticks >= 1, "ramp_ticks", "must be >= 1")
        need(self.l_max is None or self.l_max > 0, "l_max", "must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def swarm_from_dict(data: dict, base: SwarmConfig | None = None, where: str = "swarm") -> SwarmConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: must be an object", field=where)
    unknown = sorted(set(data) - _field_names(SwarmConfig))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}", field=f"{where}.{unknown[0]}")
    merged = dataclasses.asdict(base) if base is not None else {}
    merged.update(data)
    try:
        cfg = SwarmConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}", field=where) from exc
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{where}.{exc}", field=f"{where}.{exc.field}") from None


@dataclass
class Variant:
    name: str
    swarm: SwarmConfig


@dataclass
class ExperimentSpec:
    name: str
    base: SwarmConfig
    variants: list
    trials: int = 7
    output_dir: str = "results"
    master_seed: int = 0

    @property
    def seeds(self) -> list[int]:
        return [trial_seed(self.master_seed, k) for k in range(self.trials)]

    def validate(self) -> "ExperimentSpec":
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ConfigError("trials: must be an integer >= 1", field="trials")
        names = [v.name for v in self.variants]
        if not names:
            raise ConfigError("variants: at least one variant is required", field="variants")
        if len(set(names)) != len(names):
            raise ConfigError("variants: names must be unique", field="variants")
        return self


_SPEC_FIELDS = {"name", "trials", "output_dir", "master_seed", "swarm", "variants"}
_VARIANT_FIELDS = {"name", "swarm"}


def spec_from_dict(data: dict, source: str = "<dict>") -> ExperimentSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be an object")
    unknown = sorted(set(data) - _SPEC_FIELDS)
    if unknown:
        raise ConfigError(f"unknown field(s) {', '.join(unknown)}", field=unknown[0])
    base = swarm_from_dict(data.get("swarm", {}))
    variants = []
    raw_variants = data.get("variants") or [{"name": "default"}]
    if not isinstance(raw_variants, list):
        raise ConfigError("variants: must be a list", field="variants")
    for k, raw in enumerate(raw_variants):
        where = f"variants[{k}]"
        if not isinstance(raw, dict):
            raise ConfigError(f"{where}: must be an object", field=where)
        extra = sorted(set(raw) - _VARIANT_FIELDS)
        if extra:
            raise ConfigError(f"{where}: unknown field(s) {', '.join(extra)}", field=f"{where}.{extra[0]}")
        if not isinstance(raw.get("name"), str) or not raw["name"]:
            raise ConfigError(f"{where}.name: required", field=f"{where}.name")
        variants.append(Variant(raw["name"], swarm_from_dict(raw.get("swarm", {}), base, f"{where}.swarm")))
    master = data.get("master_seed", 0)
    if not isinstance(master, int) or master < 0:
        raise ConfigError("master_seed: must be a non-negative integer", field="master_seed")
    spec = ExperimentSpec(
        name=str(data.get("name", "experiment")),
        base=base,
        variants=variants,
        trials=data.get("trials", 7),
        output_dir=str(data.get("output_dir", "results")),
        master_seed=master,
    )
    return spec.validate()


def load_config(path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file", field="path") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return spec_from_dict(data, str(path))


def bundled_config(name: str = "default") -> Path:
    """Path of a config shipped with the package (``default``, ``desk``, ``freeriders``)."""
    ref = resources.files("rltorrent") / "configs" / f"{name}.json"
    with resources.as_file(ref) as p:
        return Path(p)


_MASK64 = (1 << 64) - 1


def trial_seed(master_seed: int, trial: int) -> int:
    """Per-trial RNG seed: splitmix64 finalizer applied to ``master_seed + trial``."""
    z = (master_seed + trial + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stratified_counts(fractions, n: int) -> list[int]:
    """Split ``n`` into integer counts proportional to ``fractions`` (largest remainder)."""
    raw = [f * n for f in fractions]
    counts = [math.floor(r) for r in raw]
    short = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:short]:
        counts[k] += 1
    return counts
