"""Per-peer MDP over a reduced set of associated peers, its value-iteration
solver, and the iterative peer-set reduction that picks the set.

State and action bit-vectors map to integer indices little-endian: member
``i`` is bit ``i`` of a state index. Actions are the exactly-``n_unchoke``
subsets of members, indexed in ``itertools.combinations`` order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from rltorrent.errors import ContractError, ConvergenceError, InvalidInputError
from rltorrent.learning import TransitionTable

DEFAULT_GAMMA = 0.9
DEFAULT_EPS = 1e-6
MAX_SWEEPS = 1000
DEFAULT_VALIDITY = 3
TIE_RTOL = 1e-12
# Reassociation lets the kernels vectorize; inf/nan semantics stay strict.
_FAST = {"reassoc", "contract", "nsz", "arcp"}


def expected_reward(rate: float, p: float) -> float:
    if rate < 0 or not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"need rate >= 0 and p in [0, 1], got {rate!r}, {p!r}")
    return rate * p


def _rate_of(est) -> float:
    return float(getattr(est, "estimate", est))


@lru_cache(maxsize=None)
def action_bits(m: int, n_unchoke: int) -> np.ndarray:
    """All m-bit vectors with exactly ``n_unchoke`` ones, shape (A, m)."""
    combos = list(itertools.combinations(range(m), n_unchoke))
    out = np.zeros((len(combos), m), dtype=np.uint8)
    for row, combo in enumerate(combos):
        out[row, list(combo)] = 1
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def state_bits(m: int) -> np.ndarray:
    idx = np.arange(1 << m)
    out = ((idx[:, None] >> np.arange(m)[None, :]) & 1).astype(np.uint8)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def _joint_index(m: int, n_unchoke: int) -> np.ndarray:
    # Position of each (state, action) pair in the kernel's 4**m table, where
    # member i contributes digit 2*s_i + a_i in base 4.
    s = state_bits(m).astype(np.int64)
    a = action_bits(m, n_unchoke).astype(np.int64)
    digits = 2 * s[:, None, :] + a[None, :, :]
    out = (digits * (4 ** np.arange(m, dtype=np.int64))).sum(axis=2)
    out.setflags(write=False)
    return out


def bits_to_index(bits: Sequence[int]) -> int:
    return sum(int(b) << i for i, b in enumerate(bits))


def index_to_bits(idx: int, m: int) -> tuple[int, ...]:
    return tuple((idx >> i) & 1 for i in range(m))


@njit(cache=True, fastmath=_FAST)
def _expected_next(q, w, n_fold, buf_a, buf_b):
    # Multilinear expectation of w over independent per-member transitions, for
    # every joint (s_i, a_i) digit assignment of the first n_fold members at
    # once. Member k's next-state bit is folded into digit k; the innermost
    # loop runs over already-folded digits. The result is indexed
    # ``rest * 4**n_fold + digits`` where ``rest`` holds the unfolded next-state bits.
    m = q.shape[0]
    cur = buf_a
    nxt = buf_b
    for j in range(1 << m):
        cur[j] = w[j]
    folded = 1
    for k in range(n_fold):
        n_high = 1 << (m - k - 1)
        for h in range(n_high):
            src0 = (2 * h) * folded
            src1 = src0 + folded
            for x in range(4):
                p1 = q[k, x]
                p0 = 1.0 - p1
                dst = (4 * h + x) * folded
                if folded < 64:
                    for c in range(folded):
                        nxt[dst + c] = p0 * cur[src0 + c] + p1 * cur[src1 + c]
                else:
                    # Slices let the compiler see the ranges as disjoint and vectorize.
                    lo = cur[src0 : src0 + folded]
                    hi = cur[src1 : src1 + folded]
                    out = nxt[dst : dst + folded]
                    for c in range(folded):
                        out[c] = p0 * lo[c] + p1 * hi[c]
        folded *= 4
        cur, nxt = nxt, cur
    return cur


@njit(cache=True)
def _evaluate(q, r, abits, greedy, gamma):
    # Exact value of a fixed policy: (I - gamma P) v = P r, with P built row by
    # row as the product of the members' Bernoulli next-state laws.
    m = q.shape[0]
    n = 1 << m
    A = np.zeros((n, n))
    for s in range(n):
        row = A[s]
        row[0] = 1.0
        for i in range(m):
            p1 = q[i, 2 * ((s >> i) & 1) + abits[greedy[s], i]]
            step = 1 << i
            for t in range(step):
                row[t + step] = row[t] * p1
                row[t] *= 1.0 - p1
    b = A @ r
    for s in range(n):
        for t in range(n):
            A[s, t] *= -gamma
        A[s, s] += 1.0
    return np.linalg.solve(A, b)


@njit(cache=True, fastmath=_FAST)
def _solve(q, rewards, joint_index, abits, gamma, eps, max_sweeps, v0, jump):
    m = q.shape[0]
    n_states = 1 << m
    n_actions = joint_index.shape[1]
    r = np.zeros(n_states)
    for s in range(n_states):
        acc = 0.0
        for i in range(m):
            if (s >> i) & 1:
                acc += rewards[i]
        r[s] = acc
    # The last member is folded on the fly, only for the (state, action) pairs
    # that exist, instead of over all 4**m digit assignments.
    last = m - 1
    half = 4**last
    low = np.empty((n_states, n_actions), dtype=np.int64)
    p_hi = np.empty((n_states, n_actions))
    for s in range(n_states):
        for a in range(n_actions):
            j = joint_index[s, a]
            low[s, a] = j % half
            p_hi[s, a] = q[last, j // half]
    size = max(2 * half, n_states)
    buf_a = np.empty(size)
    buf_b = np.empty(size)
    v = v0.copy()
    v_new = np.empty(n_states)
    greedy = np.zeros(n_states, dtype=np.int64)
    choice = np.zeros(n_states, dtype=np.int64)
    w = np.empty(n_states)
    delta = np.inf
    sweeps = 0
    table = buf_a
    while sweeps < max_sweeps:
        for s in range(n_states):
            w[s] = r[s] + gamma * v[s]
        table = _expected_next(q, w, last, buf_a, buf_b)
        delta = 0.0
        for s in range(n_states):
            best = -np.inf
            arg = 0
            for a in range(n_actions):
                c = low[s, a]
                p1 = p_hi[s, a]
                val = (1.0 - p1) * table[c] + p1 * table[c + half]
                if val > best:
                    best = val
                    arg = a
            v_new[s] = best
            greedy[s] = arg
            delta = max(delta, abs(best - v[s]))
        sweeps += 1
        if delta < eps:
            for s in range(n_states):
                v[s] = v_new[s]
            break
        if jump:
            # Jump to the exact value of the greedy policy. Only a few sweeps
            # are then needed; the stopping test and the fixed point are those
            # of plain value iteration.
            v = _evaluate(q, r, abits, greedy, gamma)
        else:
            for s in range(n_states):
                v[s] = v_new[s]
    # Greedy action from the last backup; near-ties go to the lowest index.
    for s in range(n_states):
        best = v_new[s]
        tol = TIE_RTOL * max(1.0, abs(best))
        for a in range(n_actions):
            c = low[s, a]
            p1 = p_hi[s, a]
            if (1.0 - p1) * table[c] + p1 * table[c + half] >= best - tol:
                choice[s] = a
                break
    return v, choice, delta, sweeps


@dataclass
class ReducedPeerSet:
    members: tuple
    expected: tuple = ()
    recip: tuple = ()

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


@dataclass
class MdpModel:
    members: tuple
    n_unchoke: int
    next_one: np.ndarray  # (m, 2, 2): Pr(s'_i = 1 | s_i, a_i)
    rewards: np.ndarray  # (m,)

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def n_states(self) -> int:
        return 1 << self.m

    @property
    def actions(self) -> np.ndarray:
        return action_bits(self.m, self.n_unchoke)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def reward(self, state: int) -> float:
        return float(state_bits(self.m)[state] @ self.rewards)

    def joint_transition(self) -> np.ndarray:
        """Dense ``P[a, s, s']`` as the product of per-member rows, shape (A, S, S)."""
        s = state_bits(self.m).astype(np.intp)
        a = self.actions.astype(np.intp)
        members = np.arange(self.m)
        # p1[a, s, i] = Pr(s'_i = 1 | s_i, a_i)
        p1 = self.next_one[members[None, None, :], s[None, :, :], a[:, None, :]]
        nxt = s[None, None, :, :].astype(bool)
        per_member = np.where(nxt, p1[:, :, None, :], 1.0 - p1[:, :, None, :])
        return per_member.prod(axis=3)


def build_mdp(
    peer_set,
    n_unchoke: int,
    table: TransitionTable,
    estimates: Mapping,
    reward_scale: float = 1.0,
) -> MdpModel:
    members = tuple(getattr(peer_set, "members", peer_set))
    m = len(members)
    if not 1 <= n_unchoke <= m:
        raise InvalidInputError(f"n_unchoke={n_unchoke} must lie in [1, {m}]")
    next_one = np.empty((m, 2, 2))
    rewards = np.empty(m)
    for i, peer in enumerate(members):
        next_one[i] = table.next_one_matrix(peer)
        rewards[i] = _rate_of(estimates[peer]) / reward_scale
    return MdpModel(members, n_unchoke, next_one, rewards)


@dataclass
class Policy:
    members: tuple
    n_unchoke: int
    choice: np.ndarray  # state index -> action index
    values: np.ndarray
    created_at: int = 0
    validity: int = DEFAULT_VALIDITY
    sweeps: int = 0
    residual: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def actions(self) -> np.ndarray:
        return action_bits(len(self.members), self.n_unchoke)

    def action_for(self, state: int) -> tuple[int, ...]:
        return tuple(int(b) for b in self.actions[self.choice[state]])

    def is_stale(self, now: int) -> bool:
        return now - self.created_at > self.validity


def value_iteration(
    model: MdpModel,
    gamma: float = DEFAULT_GAMMA,
    eps: float = DEFAULT_EPS,
    max_sweeps: int = MAX_SWEEPS,
    v0=None,
    created_at: int = 0,
    validity: int = DEFAULT_VALIDITY,
    jump: bool = True,
) -> Policy:
    """Solve the discounted objective whose reward stream starts at the next state.

    Sweeps ``V(s) <- max_a sum_s' P_a(s, s') [R(s') + gamma V(s')]`` until the
    sup-norm change drops below ``eps``. With ``jump`` (the default) the values
    move to those of the current greedy policy between sweeps, which cuts the
    sweep count from over a hundred to a handful; ``jump=False`` runs plain
    sweeps. Near-equal action values resolve to the lowest action index.
    """
    if not 0.0 <= gamma < 1.0:
        raise InvalidInputError(f"gamma must lie in [0, 1), got {gamma!r}")
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    m = model.m
    q = np.ascontiguousarray(model.next_one.reshape(m, 4), dtype=np.float64)
    init = np.zeros(1 << m) if v0 is None else np.asarray(v0, dtype=np.float64)
    values, choice, residual, sweeps = _solve(
        q,
        np.ascontiguousarray(model.rewards, dtype=np.float64),
        _joint_index(m, model.n_unchoke),
        action_bits(m, model.n_unchoke),
        float(gamma),
        float(eps),
        int(max_sweeps),
        init,
        bool(jump),
    )
    if residual >= eps:
        raise ConvergenceError(residual, sweeps)
    return Policy(
        members=model.members,
        n_unchoke=model.n_unchoke,
        choice=choice,
        values=values,
        created_at=created_at,
        validity=validity,
        sweeps=int(sweeps),
        residual=float(residual),
    )


def bellman_residual(model: MdpModel, values, gamma: float) -> float:
    """Sup-norm of ``T V - V`` computed from the dense joint transition."""
    P = model.joint_transition()
    r = state_bits(model.m) @ model.rewards
    backed = (P @ (r + gamma * np.asarray(values))).max(axis=0)
    return float(np.max(np.abs(backed - values)))


def policy_lookup(policy: Policy, state: Sequence[int], now: int):
    """Action bits for ``state``, or ``None`` once the policy has outlived its validity."""
    if len(state) != len(policy.members):
        raise ContractError(f"state has {len(state)} bits, policy covers {len(policy.members)} members")
    if policy.is_stale(now):
        return None
    return policy.action_for(bits_to_index(state))


def unchoke_probabilities(policy: Policy, state_probs: Sequence[tuple[float, float]]) -> np.ndarray:
    """Probability the policy unchokes each member when members' states are
    independent with the given ``(Pr(s=0), Pr(s=1))`` marginals."""
    m = len(policy.members)
    bits = state_bits(m)
    p1 = np.array([sp[1] for sp in state_probs])
    mass = np.where(bits == 1, p1[None, :], 1.0 - p1[None, :]).prod(axis=1)
    chosen = policy.actions[policy.choice]  # (S, m)
    return mass @ chosen


def reduce_peer_set(
    peers: Sequence,
    T: int,
    c1: int,
    c2: int,
    table: TransitionTable,
    estimates: Mapping,
    *,
    restricted_unchoke: int | None = None,
    gamma: float = DEFAULT_GAMMA,
    eps: float = DEFAULT_EPS,
) -> ReducedPeerSet:
    """Shrink ``peers`` to at most ``T`` members.

    Candidates are ordered by expected reward (estimated rate times
    reciprocation probability), ascending, ties by identifier. While too many
    remain, the ``c1`` weakest form a group, a policy is solved over that group
    alone, and up to ``c2`` of its members least likely to be unchoked under
    that policy are dropped (ties keep the candidate order). The group policy
    fills ``restricted_unchoke`` slots (default ``c1 - c2``). Inside each
    group model members are indexed by :func:`strength_rank`, so a group in
    which no action is better than another (typically all members silent)
    keeps peers that have reciprocated before, then those with the higher
    rate estimates.
    """
    if T < 1:
        raise InvalidInputError("T must be >= 1")
    if not c1 > c2 >= 1:
        raise InvalidInputError(f"need c1 > c2 >= 1, got c1={c1}, c2={c2}")
    peers = list(peers)
    rates = np.array([_rate_of(estimates[p]) for p in peers], dtype=np.float64)
    stats = [table.stats(p) for p in peers]
    recip = np.array([st[1] for st in stats], dtype=np.float64)
    expected = [expected_reward(r, q) for r, q in zip(rates.tolist(), recip.tolist())]
    next_one = np.array([st[0] for st in stats], dtype=np.float64).reshape(len(peers), 2, 2)
    p_one = np.array([st[2] for st in stats], dtype=np.float64)
    order = np.array(sorted(range(len(peers)), key=lambda i: (expected[i], peers[i])), dtype=np.int64)
    known = [bool(getattr(estimates[p], "has_history", True)) for p in peers]
    rank = strength_rank(expected, rates.tolist(), peers, known)
    slots = restricted_unchoke if restricted_unchoke is not None else c1 - c2
    q = np.ascontiguousarray(next_one.reshape(len(peers), 4))
    kept = order
    if len(kept) > T and len(kept) >= c1:
        k = max(1, min(slots, c1))
        kept, residual = _reduce_full_groups(
            q, rates, p_one, rank, order, T, c1, c2, _joint_index(c1, k), action_bits(c1, k), gamma, eps, MAX_SWEEPS
        )
        if residual >= eps:
            raise ConvergenceError(residual, MAX_SWEEPS)
    kept = kept.tolist()
    # Only reached when c1 exceeds the pool: the last groups are smaller.
    while len(kept) > T:
        group = np.array(kept[:c1])
        unchoke_p = group_unchoke_probs(q[group], rates[group], p_one[group], max(1, min(slots, len(group))), gamma, eps, rank[group])
        ranked = sorted(range(len(group)), key=lambda j: unchoke_p[j])
        dropped = {int(group[j]) for j in ranked[: min(c2, len(kept) - T)]}
        kept = [i for i in kept if i not in dropped]
    return ReducedPeerSet(
        members=tuple(peers[i] for i in kept),
        expected=tuple(expected[i] for i in kept),
        recip=tuple(float(recip[i]) for i in kept),
    )


def strength_rank(expected, rates, peers, known=None) -> np.ndarray:
    """Position of each candidate when sorted strongest first: higher expected
    reward, then peers that have uploaded to us at some point (``known``),
    then higher estimated rate, then lower identifier."""
    known = [True] * len(peers) if known is None else known
    order = sorted(range(len(peers)), key=lambda i: (-expected[i], not known[i], -rates[i], peers[i]))
    rank = np.empty(len(peers), dtype=np.int64)
    rank[np.array(order, dtype=np.int64)] = np.arange(len(peers))
    return rank


@njit(cache=True)
def _group_probs(q, rates, p_one, rank, joint_index, abits, gamma, eps, max_sweeps):
    # Unchoke probability of each group member under the group's own policy.
    # Members are indexed strongest first inside the model, so value ties
    # between actions favour the stronger members; results come back in the
    # caller's order.
    g = q.shape[0]
    pos = np.argsort(rank)
    qr = q[pos]
    rr = rates[pos]
    top = rr.max()
    rewards = rr / top if top > 0 else rr.copy()
    _, choice, residual, _ = _solve(qr, rewards, joint_index, abits, gamma, eps, max_sweeps, np.zeros(1 << g), True)
    probs = np.zeros(g)
    for s in range(1 << g):
        mass = 1.0
        for i in range(g):
            p = p_one[pos[i]]
            mass *= p if (s >> i) & 1 else 1.0 - p
        for i in range(g):
            if abits[choice[s], i]:
                probs[pos[i]] += mass
    return probs, residual


@njit(cache=True)
def _reduce_full_groups(q, rates, p_one, rank, order, T, c1, c2, joint_index, abits, gamma, eps, max_sweeps):
    kept = order.copy()
    n = kept.shape[0]
    while n > T and n >= c1:
        group = kept[:c1].copy()
        probs, residual = _group_probs(q[group], rates[group], p_one[group], rank[group], joint_index, abits, gamma, eps, max_sweeps)
        if residual >= eps:
            return kept[:n], residual
        # Stable sort keeps the candidate order among equal probabilities.
        ranked = np.argsort(probs, kind="mergesort")
        n_drop = min(c2, n - T)
        out = 0
        for i in range(n):
            drop = False
            for j in range(n_drop):
                if kept[i] == group[ranked[j]]:
                    drop = True
            if not drop:
                kept[out] = kept[i]
                out += 1
        n = out
    return kept[:n], 0.0


def group_unchoke_probs(q, rates, p_one, n_unchoke, gamma=DEFAULT_GAMMA, eps=DEFAULT_EPS, rank=None) -> np.ndarray:
    """Unchoke probability of each member of a group under the group's own
    policy. ``q`` holds rows ``[Pr(1|0,0), Pr(1|0,1), Pr(1|1,0), Pr(1|1,1)]``;
    ``rank`` orders members inside the model (default: as given)."""
    g = len(rates)
    rank = np.arange(g, dtype=np.int64) if rank is None else np.asarray(rank, dtype=np.int64)
    probs, residual = _group_probs(
        np.ascontiguousarray(q, dtype=np.float64).reshape(g, 4),
        np.asarray(rates, dtype=np.float64),
        np.asarray(p_one, dtype=np.float64),
        rank,
        _joint_index(g, n_unchoke),
        action_bits(g, n_unchoke),
        gamma,
        eps,
        MAX_SWEEPS,
    )
    if residual >= eps:
        raise ConvergenceError(residual, MAX_SWEEPS)
    return probs


def n_actions(m: int, n_unchoke: int) -> int:
    return math.comb(m, n_unchoke)
