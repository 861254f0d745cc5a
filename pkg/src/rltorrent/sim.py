"""Discrete-time swarm engine: one tick is one rechoke period.

Each tick runs, in order: unchoke decisions, transfer materialization with an
even capacity split and a linear warm-up ramp, rarest-first piece delivery,
learning updates, and departures of completed leechers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from rltorrent.config import SwarmConfig, stratified_counts
from rltorrent.errors import ContractError
from rltorrent.metrics import MetricsLedger, PeerRecord
from rltorrent.strategies import (
    ChokeDecision,
    DecisionContext,
    FreeRider,
    Kind,
    RegularLeecher,
    RLLeecher,
    RLParams,
    Seed,
)


def interest(a, b) -> bool:
    """True iff ``b`` holds at least one piece ``a`` lacks.

    Accepts peers (anything with a ``bitfield``) or boolean piece arrays.
    """
    a_bits = np.asarray(getattr(a, "bitfield", a), dtype=bool)
    b_bits = np.asarray(getattr(b, "bitfield", b), dtype=bool)
    return bool(np.any(b_bits & ~a_bits))


def pick_piece(receiver, sender, availability, tie_rank=None) -> int:
    """Rarest candidate piece the sender has and the receiver lacks.

    Ties go to the lowest index, or to the lowest ``tie_rank`` entry when a
    per-receiver ranking is given.
    """
    r = np.asarray(getattr(receiver, "bitfield", receiver), dtype=bool)
    s = np.asarray(getattr(sender, "bitfield", sender), dtype=bool)
    cand = np.flatnonzero(s & ~r)
    if cand.size == 0:
        raise ContractError("sender has nothing the receiver lacks")
    avail = np.asarray(availability)
    if tie_rank is None:
        return int(cand[np.argmin(avail[cand])])
    return int(cand[np.lexsort((np.asarray(tie_rank)[cand], avail[cand]))[0]])


@dataclass
class PeerNode:
    id: int
    slot: int
    capacity: int
    kind: Kind
    strategy: object
    join_tick: int
    world: "World" = field(repr=False, default=None)
    generation: int = 0
    complete_tick: int | None = None
    bytes_up: int = 0
    bytes_down: int = 0

    @property
    def bitfield(self) -> np.ndarray:
        return self.world.have[self.slot]

    @property
    def complete(self) -> bool:
        return bool(self.world.have[self.slot].all())

    @property
    def is_seed(self) -> bool:
        return self.kind is Kind.SEED


@dataclass
class Transfer:
    src: int
    dst: int
    nominal: int
    streak: int
    effective: int = 0


@dataclass
class World:
    config: SwarmConfig
    rng: np.random.Generator
    l_max: int
    have: np.ndarray
    progress: np.ndarray
    piece_len: np.ndarray
    tie_rank: np.ndarray = None  # per-slot random piece order used to break availability ties
    peers: dict = field(default_factory=dict)
    ledger: MetricsLedger = field(default_factory=MetricsLedger)
    tick: int = 0
    next_id: int = 0
    last_down: dict = field(default_factory=dict)  # receiver -> {sender: bytes}
    streaks: dict = field(default_factory=dict)  # (sender, receiver) -> consecutive unchoked ticks
    decisions: dict = field(default_factory=dict)

    @property
    def done(self) -> bool:
        if self.tick >= self.config.max_ticks:
            return True
        return all(
            p.complete_tick is not None
            for p in self.ledger.peers.values()
            if p.generation == 0 and p.kind != Kind.SEED.value
        )

    def present(self) -> list:
        return sorted(self.peers)

    def snapshot(self) -> dict:
        """Comparable state digest used by determinism checks."""
        return {
            "tick": self.tick,
            "have": self.have.tobytes(),
            "progress": self.progress.tobytes(),
            "peers": [(p.id, p.slot, p.capacity, p.kind.value, p.join_tick) for p in self.peers.values()],
        }


def _make_strategy(kind: Kind, capacity: int, cfg: SwarmConfig, l_max: int):
    if kind is Kind.SEED:
        return Seed(cfg.seed_slots)
    if kind is Kind.FREERIDER:
        return FreeRider()
    regular = RegularLeecher(capacity, cfg.nu_min, cfg.regular_max_slots, cfg.saturation)
    if kind is Kind.REGULAR:
        return regular
    params = RLParams(
        alpha=cfg.alpha,
        gamma=cfg.gamma,
        eps=cfg.eps,
        T=cfg.T,
        c1=cfg.c1,
        c2=cfg.c2,
        validity=cfg.policy_validity,
        theta_mode=cfg.theta_mode,
        theta_value=cfg.bytes_per_tick(cfg.theta_value) if cfg.theta_mode == "fixed" else 0.0,
        nu_min=cfg.nu_min,
        nu_max=cfg.nu_max,
        switch_mode=cfg.switch_mode,
    )
    return RLLeecher(capacity, l_max, params, regular)


def _add_peer(world: World, slot: int, kind: Kind, capacity: int, generation: int) -> PeerNode:
    pid = world.next_id
    world.next_id += 1
    node = PeerNode(
        id=pid,
        slot=slot,
        capacity=capacity,
        kind=kind,
        strategy=_make_strategy(kind, capacity, world.config, world.l_max),
        join_tick=world.tick,
        world=world,
        generation=generation,
    )
    world.peers[pid] = node
    world.tie_rank[slot] = world.rng.permutation(world.piece_len.size)
    world.ledger.add_peer(PeerRecord(pid, slot, kind.value, capacity, world.tick, None, generation))
    return node


def init_world(config: SwarmConfig) -> World:
    cfg = config.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    n_l, n_s = cfg.n_leechers, cfg.n_seeds
    n_pieces = cfg.n_pieces
    piece_len = np.full(n_pieces, cfg.piece_size, dtype=np.int64)
    piece_len[-1] = cfg.file_size - cfg.piece_size * (n_pieces - 1)

    kinds = [Kind(k) for k in sorted(cfg.strategy_mix) for _ in range(cfg.strategy_mix[k])]
    kinds += [Kind.FREERIDER] * cfg.n_freeriders
    kinds = [kinds[k] for k in rng.permutation(len(kinds))]
    n_contrib = n_l - cfg.n_freeriders
    rates = [b[0] for b in cfg.capacity_distribution]
    counts = stratified_counts([b[1] for b in cfg.capacity_distribution], n_contrib)
    caps = [cfg.bytes_per_tick(r) for r, c in zip(rates, counts) for _ in range(c)]
    caps = [caps[k] for k in rng.permutation(len(caps))]
    seed_cap = cfg.bytes_per_tick(cfg.seed_capacity_total / n_s) if n_s else 0
    l_max = cfg.bytes_per_tick(cfg.l_max) if cfg.l_max is not None else max(caps + [seed_cap, 1])

    world = World(
        config=cfg,
        rng=rng,
        l_max=l_max,
        have=np.zeros((n_l + n_s, n_pieces), dtype=bool),
        progress=np.zeros((n_l + n_s, n_pieces), dtype=np.int64),
        piece_len=piece_len,
        tie_rank=np.empty((n_l + n_s, n_pieces), dtype=np.int64),
    )
    world.ledger.file_size = cfg.file_size
    contrib = iter(caps)
    for slot, kind in enumerate(kinds):
        _add_peer(world, slot, kind, 0 if kind is Kind.FREERIDER else next(contrib), 0)
    for k in range(n_s):
        slot = n_l + k
        world.have[slot] = True
        world.progress[slot] = piece_len
        _add_peer(world, slot, Kind.SEED, seed_cap, 0)
    return world


def _interest_matrix(have: np.ndarray) -> np.ndarray:
    # wants[a, b]: slot a lacks some piece slot b holds.
    h = have.astype(np.float32)
    return ((1.0 - h) @ h.T) > 0.5


@njit(cache=True)
def _fill(src_have, dst_have, progress, piece_len, tie_rank, avail, budget):
    n = piece_len.size
    keys = np.empty(n, dtype=np.int64)
    pieces = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        if src_have[i] and not dst_have[i]:
            # tie_rank is a permutation of 0..n-1, so this key orders by
            # availability first, then by the receiver's tie rank
            keys[k] = avail[i] * n + tie_rank[i]
            pieces[k] = i
            k += 1
    left = budget
    for j in np.argsort(keys[:k]):
        piece = pieces[j]
        need = piece_len[piece] - progress[piece]
        take = need if need < left else left
        progress[piece] += take
        left -= take
        if take == need:
            dst_have[piece] = True
        if left == 0:
            break
    return budget - left


def _deliver(world: World, src_slot: int, dst_slot: int, budget: int, have_snap, avail) -> int:
    # Rarest first. A partial piece keeps its progress, so a rare piece started
    # by one sender is naturally continued by the next sender holding it.
    if budget <= 0:
        return 0
    return int(_fill(have_snap[src_slot], world.have[dst_slot], world.progress[dst_slot],
                     world.piece_len, world.tie_rank[dst_slot], avail, budget))


def step(world: World) -> World:
    if world.done:
        return world
    cfg = world.config
    t = world.tick
    ledger = world.ledger
    ids = world.present()
    nodes = [world.peers[i] for i in ids]
    slot_of = {n.id: n.slot for n in nodes}
    have_snap = world.have.copy()
    live_slots = np.array([n.slot for n in nodes], dtype=np.intp)
    avail = have_snap[live_slots].sum(axis=0).astype(np.int64)
    wants = _interest_matrix(have_snap)
    id_of_slot = {n.slot: n.id for n in nodes}

    # (1) decisions
    decisions: dict = {}
    for node in nodes:
        col = wants[live_slots, node.slot]
        interested = [id_of_slot[s] for s in live_slots[col] if s != node.slot]
        ctx = DecisionContext(t, interested, world.last_down.get(node.id, {}), node.capacity, world.rng)
        decision = node.strategy.decide(ctx)
        if not decision.unchoked <= set(interested):
            raise ContractError(f"peer {node.id} unchoked a peer that is not interested at tick {t}")
        decisions[node.id] = decision
        ledger.record_unchokes(t, node.id, decision.unchoked)

    # (2)+(3) transfers and piece movement
    ramp = cfg.ramp_ticks
    streaks: dict = {}
    down: dict = {i: {} for i in ids}
    up: dict = {i: {} for i in ids}
    for node in nodes:
        receivers = sorted(decisions[node.id].unchoked)
        if not receivers or node.capacity <= 0:
            continue
        share = len(receivers)
        for dst in receivers:
            run = world.streaks.get((node.id, dst), 0) + 1
            streaks[(node.id, dst)] = run
            budget = node.capacity * min(run, ramp) // (ramp * share)
            sent = _deliver(world, node.slot, slot_of[dst], budget, have_snap, avail)
            if sent:
                ledger.record_transfer(t, node.id, dst, sent)
                up[node.id][dst] = sent
                down[dst][node.id] = sent
                node.bytes_up += sent
                world.peers[dst].bytes_down += sent
    world.streaks = streaks
    world.last_down = down
    world.decisions = decisions

    # (4) learning
    leechers = [n.id for n in nodes if not n.is_seed]
    for node in nodes:
        if node.is_seed:
            continue
        associated = [i for i in leechers if i != node.id]
        node.strategy.observe(t, down[node.id], up[node.id], decisions[node.id], associated)

    # (5) completion and churn
    world.tick = t + 1
    for node in nodes:
        if node.is_seed or node.complete_tick is not None or not world.have[node.slot].all():
            continue
        node.complete_tick = world.tick
        ledger.peers[node.id].complete_tick = world.tick
        if cfg.churn_enabled:
            del world.peers[node.id]
            world.have[node.slot] = False
            world.progress[node.slot] = 0
            _add_peer(world, node.slot, node.kind, node.capacity, node.generation + 1)
        else:
            node.kind = Kind.SEED
            node.strategy = Seed(cfg.seed_slots)
    ledger.ticks = world.tick
    return world


def run(config: SwarmConfig, progress=None) -> World:
    world = init_world(config)
    while not world.done:
        step(world)
        if progress is not None:
            progress(world)
    world.ledger.ticks = world.tick
    return world
