"""Per-peer unchoke decision logic.

Each strategy object belongs to one simulated peer. The engine calls
``decide`` at the start of a rechoke period and ``observe`` once that period's
transfers are known.
"""

from __future__ import annotations

import statistics
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from rltorrent.errors import ContractError, ConvergenceError
from rltorrent.learning import (
    RateEstimate,
    TransitionTable,
    binarize_state,
    penalize_no_reciprocation,
    update_rate_estimate,
)
from rltorrent.mdp import (
    DEFAULT_EPS,
    DEFAULT_GAMMA,
    DEFAULT_VALIDITY,
    Policy,
    bits_to_index,
    build_mdp,
    policy_lookup,
    reduce_peer_set,
    strength_rank,
    value_iteration,
)

MIN_SLOTS = 4
OPTIMISTIC_PERIOD = 3
SWITCH_WINDOW = 3
_IDLE = (0, 0, False)


class Kind(str, Enum):
    REGULAR = "regular"
    RL = "rl"
    SEED = "seed"
    FREERIDER = "freerider"


@dataclass(frozen=True)
class ChokeDecision:
    unchoked: frozenset
    tick: int
    optimistic: object = None


@dataclass
class DecisionContext:
    """What a peer can see when it decides: who wants its data and how fast
    each associated peer uploaded to it during the previous period."""

    tick: int
    interested: Sequence
    last_down: Mapping
    capacity: int
    rng: object


def regular_leecher_select(
    observed_rates: Mapping,
    tick: int,
    rng,
    n_slots: int = MIN_SLOTS,
    optimistic=None,
) -> ChokeDecision:
    """Tit-for-tat over ``n_slots - 1`` slots plus one optimistic unchoke.

    ``observed_rates`` maps every interested peer to its last-period upload
    rate towards us. The optimistic peer is kept from the previous call unless
    the tick is a multiple of three or it is no longer eligible.
    """
    ranked = sorted(observed_rates, key=lambda p: (-observed_rates[p], p))
    if len(ranked) <= n_slots:
        return ChokeDecision(frozenset(ranked), tick, None)
    regular = ranked[: n_slots - 1]
    choked = sorted(ranked[n_slots - 1:])
    if optimistic not in choked or tick % OPTIMISTIC_PERIOD == 0:
        optimistic = choked[int(rng.integers(len(choked)))]
    return ChokeDecision(frozenset(regular) | {optimistic}, tick, optimistic)


def seed_select(interested: Sequence, tick: int, n_slots: int = MIN_SLOTS, cursor=None) -> ChokeDecision:
    """Round-robin over the identifier-sorted ring of interested peers.

    Without an explicit ``cursor`` the ring is assumed stable since tick 0.
    """
    ring = sorted(interested)
    if len(ring) <= n_slots:
        return ChokeDecision(frozenset(ring), tick)
    start = (tick * n_slots if cursor is None else cursor) % len(ring)
    picked = [ring[(start + k) % len(ring)] for k in range(n_slots)]
    return ChokeDecision(frozenset(picked), tick)


def freerider_select(tick: int = 0) -> ChokeDecision:
    return ChokeDecision(frozenset(), tick)


def phase_switch_check(counts: Sequence[int], mode: str = "at_most_one") -> bool:
    """Whether peer discovery has slowed enough to leave the initialization phase.

    Looks at the last six per-period counts of peers without reciprocation
    history as two disjoint three-period windows; in each, the count must drop
    by at most one (``mode="exactly_one"``: by exactly one).
    """
    if len(counts) < 2 * SWITCH_WINDOW:
        raise ContractError("need at least six recorded counts")
    c = list(counts)[-2 * SWITCH_WINDOW:]
    drops = (c[0] - c[SWITCH_WINDOW - 1], c[SWITCH_WINDOW] - c[-1])
    if mode == "exactly_one":
        return all(d == 1 for d in drops)
    if mode != "at_most_one":
        raise ValueError(f"unknown switch mode {mode!r}")
    return all(d <= 1 for d in drops)


class FreeRider:
    kind = Kind.FREERIDER

    def decide(self, ctx: DecisionContext) -> ChokeDecision:
        return freerider_select(ctx.tick)

    def observe(self, tick, down, up, decision, associated):
        pass


class Seed:
    kind = Kind.SEED

    def __init__(self, n_slots: int = MIN_SLOTS):
        self.n_slots = n_slots
        self.cursor = 0

    def decide(self, ctx: DecisionContext) -> ChokeDecision:
        ring = sorted(ctx.interested)
        decision = seed_select(ring, ctx.tick, self.n_slots, cursor=self.cursor)
        if ring:
            self.cursor = (self.cursor % len(ring) + self.n_slots) % len(ring)
        return decision

    def observe(self, tick, down, up, decision, associated):
        pass


class RegularLeecher:
    """Tit-for-tat plus optimistic unchoke; gains a slot whenever the previous
    period left upload capacity unused and more peers are waiting."""

    kind = Kind.REGULAR

    def __init__(self, capacity: int, min_slots: int = MIN_SLOTS, max_slots: int = 7, saturation: float = 0.9):
        self.capacity = capacity
        self.n_slots = min_slots
        self.max_slots = max(min_slots, max_slots)
        self.saturation = saturation
        self.optimistic = None
        self._waiting = 0

    def decide(self, ctx: DecisionContext) -> ChokeDecision:
        rates = {p: ctx.last_down.get(p, 0) for p in ctx.interested}
        decision = regular_leecher_select(rates, ctx.tick, ctx.rng, self.n_slots, self.optimistic)
        self.optimistic = decision.optimistic
        self._waiting = len(rates)
        return decision

    def observe(self, tick, down, up, decision, associated):
        sent = sum(up.values())
        unsaturated = sent < self.saturation * self.capacity
        if unsaturated and self._waiting > self.n_slots and self.n_slots < self.max_slots:
            self.n_slots += 1


@dataclass
class RLParams:
    alpha: float = 0.5
    gamma: float = DEFAULT_GAMMA
    eps: float = DEFAULT_EPS
    T: int = 7
    c1: int = 4
    c2: int = 2
    validity: int = DEFAULT_VALIDITY
    theta_mode: str = "median"
    theta_value: float = 0.0
    nu_min: int = MIN_SLOTS
    nu_max: int | None = None
    switch_mode: str = "at_most_one"


class Phase(str, Enum):
    INIT = "initialization"
    RL = "rl"


@dataclass
class PhaseState:
    phase: Phase = Phase.INIT
    no_history_counts: deque = field(default_factory=lambda: deque(maxlen=2 * SWITCH_WINDOW))
    discovered_any: bool = False
    switched_at: int | None = None


class RLLeecher:
    """Learns reciprocation behaviour of associated peers and, once discovery
    has slowed down, unchokes according to a value-iteration policy over a
    reduced peer set."""

    kind = Kind.RL

    def __init__(self, capacity: int, l_max: float, params: RLParams | None = None, regular: RegularLeecher | None = None):
        self.capacity = capacity
        self.l_max = float(l_max)
        self.params = params or RLParams()
        self.bootstrap = regular or RegularLeecher(capacity)
        self.state = PhaseState()
        self.estimates: dict = {}
        self.table = TransitionTable()
        self.policy: Policy | None = None
        self.reduced: tuple = ()
        self.n_unchoke = self.params.nu_min
        self.theta = 0.0
        self.diagnostics: list = []
        self.policies_built = 0
        # peer -> (state bit, action, uploaded to us) of the last completed period
        self._prev: dict = {}
        self._busy: set = set()  # peers whose last observation was not _IDLE
        self._silent: set = set()  # peers with an estimate but no history
        self._associated: list = []
        self._assoc_set: set = set()
        self._last_decision: ChokeDecision | None = None

    # -- learning -----------------------------------------------------------

    def estimate_for(self, peer) -> RateEstimate:
        est = self.estimates.get(peer)
        if est is None:
            est = self.estimates[peer] = RateEstimate(peer, self.l_max, self.params.alpha)
            self._silent.add(peer)
        return est

    def current_theta(self) -> float:
        if self.params.theta_mode == "fixed":
            return self.params.theta_value
        rates = [e.estimate for e in self.estimates.values() if e.has_history]
        return statistics.median(rates) if rates else 0.0

    def observe(self, tick, down: Mapping, up: Mapping, decision: ChokeDecision, associated: Sequence):
        """Fold one period of transfers into estimates and transition counts.

        A peer that sent nothing, received nothing, was not unchoked, is not in
        the reduced set and was idle in the previous period needs no work: its
        observation stays (state 0, choked, no upload) and no triplet is due.
        """
        theta = self.theta = self.current_theta()
        unchoked = decision.unchoked
        reduced = self.reduced if self.state.phase is Phase.RL else ()
        prev_obs = self._prev
        touched = set(down)
        touched.update(up, unchoked, reduced, self._busy)
        if associated != self._associated:
            self._associated = list(associated)
            self._assoc_set = present = set(associated)
            for gone in [p for p in set(self.estimates) | set(prev_obs) if p not in present]:
                self.forget(gone)
            touched.update(p for p in associated if p not in prev_obs)
        assoc = self._assoc_set
        record = self.table.record
        busy = set()
        for peer in sorted(touched):
            if peer not in assoc:
                continue
            got = down.get(peer, 0)
            est = self.estimate_for(peer)
            bit = 1 if got > theta else 0
            prev = prev_obs.get(peer)
            if prev is not None and (got > 0 or prev[2] or peer in reduced):
                record(peer, prev[0], prev[1], bit)
            if got > 0:
                update_rate_estimate(est, got)
                self._silent.discard(peer)
            elif not est.has_history and up.get(peer, 0) > 0:
                penalize_no_reciprocation(est)
            obs = (bit, 1 if peer in unchoked else 0, got > 0)
            prev_obs[peer] = obs
            if obs != _IDLE:
                busy.add(peer)
        self._busy = busy
        self._record_count(tick, len(self._silent))

    def prev_bit(self, peer):
        prev = self._prev.get(peer)
        return None if prev is None else prev[0]

    def forget(self, peer):
        self.estimates.pop(peer, None)
        self.table.forget(peer)
        self._prev.pop(peer, None)
        self._silent.discard(peer)
        self._busy.discard(peer)

    def _record_count(self, tick, count):
        st = self.state
        counts = st.no_history_counts
        if counts and count < counts[-1]:
            st.discovered_any = True
        counts.append(count)
        if (
            st.phase is Phase.INIT
            and st.discovered_any
            and len(counts) == counts.maxlen
            and phase_switch_check(counts, self.params.switch_mode)
        ):
            st.phase = Phase.RL
            st.switched_at = tick

    # -- decisions ----------------------------------------------------------

    def decide(self, ctx: DecisionContext) -> ChokeDecision:
        if self.state.phase is Phase.INIT:
            decision = self.bootstrap.decide(ctx)
        else:
            decision = self.rl_decide(ctx)
        self._last_decision = decision
        return decision

    def slot_count(self) -> int:
        p = self.params
        cap = p.T if p.nu_max is None else min(p.T, p.nu_max)
        rates = [e.estimate for e in self.estimates.values() if e.has_history]
        if not rates:
            return p.nu_min
        target = statistics.median(rates)
        if target <= 0:
            return cap
        return max(p.nu_min, min(cap, round(self.capacity / target)))

    def find_policy(self, candidates: Sequence, tick: int) -> Policy | None:
        p = self.params
        for peer in candidates:
            self.estimate_for(peer)
        reduced = reduce_peer_set(
            list(candidates), p.T, p.c1, p.c2, self.table, self.estimates, gamma=p.gamma, eps=p.eps
        )
        self.reduced = reduced.members
        if not reduced.members:
            return None
        self.n_unchoke = self.slot_count()
        nu = min(self.n_unchoke, len(reduced.members))
        # Strongest member first, so value ties go to the more promising peers.
        ests = [self.estimates[m] for m in reduced.members]
        rank = strength_rank(reduced.expected, [e.estimate for e in ests], reduced.members, [e.has_history for e in ests])
        members = [reduced.members[i] for i in np.argsort(rank)]
        model = build_mdp(members, nu, self.table, self.estimates, reward_scale=self.l_max or 1.0)
        self.policies_built += 1
        return value_iteration(model, p.gamma, p.eps, created_at=tick, validity=p.validity)

    def rl_decide(self, ctx: DecisionContext) -> ChokeDecision:
        candidates = sorted(ctx.interested)
        live = set(candidates)
        policy = self.policy
        if policy is None or policy.is_stale(ctx.tick) or not self._action_feasible(policy, live, ctx.last_down):
            try:
                policy = self.policy = self.find_policy(candidates, ctx.tick)
            except ConvergenceError as exc:
                self.diagnostics.append((ctx.tick, str(exc)))
                prev = self._last_decision.unchoked if self._last_decision else frozenset()
                self.policy = None
                return ChokeDecision(frozenset(p for p in prev if p in live), ctx.tick)
        if policy is None:
            return ChokeDecision(frozenset(), ctx.tick)
        action = policy_lookup(policy, self._observed_state(policy, ctx.last_down), ctx.tick)
        unchoked = frozenset(m for m, bit in zip(policy.members, action) if bit)
        return ChokeDecision(unchoked, ctx.tick)

    def _observed_state(self, policy: Policy, last_down: Mapping) -> list:
        theta = self.theta
        prev = self._prev
        return [prev[m][0] if m in prev else binarize_state(last_down.get(m, 0), theta) for m in policy.members]

    def _action_feasible(self, policy: Policy, live: set, last_down: Mapping) -> bool:
        # A member that lost interest only forces a new policy if the current
        # action would unchoke it.
        if all(m in live for m in policy.members):
            return True
        action = policy.action_for(bits_to_index(self._observed_state(policy, last_down)))
        return all(m in live for m, bit in zip(policy.members, action) if bit)


def rl_decide(learner: RLLeecher, ctx: DecisionContext) -> ChokeDecision:
    return learner.rl_decide(ctx)
