"""Per-peer observation history: rate estimates, non-reciprocation decay and
empirical transition statistics over binary upload states.

Everything here is owned by a single simulated peer and mutated in place.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, NamedTuple

from rltorrent.errors import ContractError, InvalidInputError

DEFAULT_ALPHA = 0.5
DECAY_BASE = 0.95


def binarize_state(rate: float, theta: float) -> int:
    """1 if the observed upload rate is strictly above the threshold."""
    return 1 if rate > theta else 0


def decay(n: int) -> float:
    """Fraction of the maximum rate presumed after ``n`` unanswered uploads.

    ``0.95 ** (2 ** n)``: super-exponential, so the ratio between consecutive
    values grows with ``n``.
    """
    if n < 0:
        raise InvalidInputError("n must be non-negative")
    return DECAY_BASE ** (2 ** n)


@dataclass(slots=True)
class RateEstimate:
    peer_id: Hashable
    l_max: float
    alpha: float = DEFAULT_ALPHA
    estimate: float = -1.0
    has_history: bool = False
    nonrecip_count: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidInputError("alpha must lie in (0, 1)")
        if self.l_max < 0:
            raise InvalidInputError("l_max must be non-negative")
        # Optimistic start: a newcomer is presumed to upload at the network maximum.
        if self.estimate < 0:
            self.estimate = float(self.l_max)


def update_rate_estimate(est: RateEstimate, sample: float) -> RateEstimate:
    """Fold one reciprocated upload sample into the moving average.

    Mutates and returns ``est``. The first sample of a peer without history is
    blended with its (optimistic) prior like any other.
    """
    if sample < 0:
        raise InvalidInputError(f"negative rate sample {sample!r}")
    value = est.alpha * sample + (1.0 - est.alpha) * est.estimate
    est.estimate = min(max(value, 0.0), est.l_max)
    est.has_history = True
    est.nonrecip_count = 0
    return est


def penalize_no_reciprocation(est: RateEstimate) -> RateEstimate:
    if est.has_history:
        raise ContractError(f"peer {est.peer_id!r} already has reciprocation history")
    est.nonrecip_count += 1
    est.estimate = decay(est.nonrecip_count) * est.l_max
    return est


class ObservationTriplet(NamedTuple):
    s_prev: int
    action: int
    s_next: int

    @classmethod
    def of(cls, s_prev, action, s_next) -> "ObservationTriplet":
        for name, bit in (("s_prev", s_prev), ("action", action), ("s_next", s_next)):
            if bit not in (0, 1):
                raise InvalidInputError(f"{name} must be 0 or 1, got {bit!r}")
        return cls(int(s_prev), int(action), int(s_next))


class TransitionTable:
    """Empirical counts ``c[s][a][s']`` and next-state marginals, per peer.

    Counts are stored flat as ``counts[4*s + 2*a + s_next]``.
    """

    def __init__(self):
        self._counts: dict = {}
        self._marginals: dict = {}
        self._stats: dict = {}

    def __contains__(self, peer) -> bool:
        return peer in self._counts

    def __len__(self) -> int:
        return len(self._counts)

    def peers(self):
        return list(self._counts)

    def record(self, peer, s_prev: int, action: int, s_next: int) -> None:
        counts = self._counts.get(peer)
        if counts is None:
            counts = self._counts[peer] = [0] * 8
            self._marginals[peer] = [0, 0]
        counts[4 * s_prev + 2 * action + s_next] += 1
        self._marginals[peer][s_next] += 1
        self._stats.pop(peer, None)

    def forget(self, peer) -> None:
        self._counts.pop(peer, None)
        self._marginals.pop(peer, None)
        self._stats.pop(peer, None)

    def count(self, peer, s: int, a: int, s_next: int) -> int:
        counts = self._counts.get(peer)
        return 0 if counts is None else counts[4 * s + 2 * a + s_next]

    def marginal_counts(self, peer) -> tuple[int, int]:
        m = self._marginals.get(peer)
        return (0, 0) if m is None else (m[0], m[1])

    def prob_next_one(self, peer, s: int, a: int) -> float:
        """``Pr(s'=1 | s, a)``, falling back to the optimistic prior on empty rows."""
        counts = self._counts.get(peer)
        if counts is not None:
            base = 4 * s + 2 * a
            total = counts[base] + counts[base + 1]
            if total:
                return counts[base + 1] / total
        return 1.0 if a == 1 else 0.0

    def transition_prob(self, peer, s: int, a: int, s_next: int) -> float:
        p1 = self.prob_next_one(peer, s, a)
        return p1 if s_next == 1 else 1.0 - p1

    def state_probs(self, peer) -> tuple[float, float]:
        """Empirical ``(Pr(s=0), Pr(s=1))``; a peer never observed is presumed in state 1."""
        m0, m1 = self.marginal_counts(peer)
        total = m0 + m1
        if total == 0:
            return 0.0, 1.0
        return m0 / total, m1 / total

    def reciprocation_prob(self, peer) -> float:
        m0, m1 = self.marginal_counts(peer)
        total = m0 + m1
        if total == 0:
            return 1.0
        return (m0 * self.prob_next_one(peer, 0, 1) + m1 * self.prob_next_one(peer, 1, 1)) / total

    def next_one_matrix(self, peer) -> list[list[float]]:
        """``[[Pr(1|0,0), Pr(1|0,1)], [Pr(1|1,0), Pr(1|1,1)]]``."""
        counts = self._counts.get(peer)
        if counts is None:
            return [[0.0, 1.0], [0.0, 1.0]]
        out = [[0.0, 1.0], [0.0, 1.0]]
        for base in range(0, 8, 2):
            total = counts[base] + counts[base + 1]
            if total:
                out[base >> 2][(base >> 1) & 1] = counts[base + 1] / total
        return out


    def stats(self, peer) -> tuple:
        """``(next_one_matrix, reciprocation_prob, Pr(s=1))`` for ``peer``, cached until its next record."""
        out = self._stats.get(peer)
        if out is None:
            out = self._stats[peer] = (self.next_one_matrix(peer), self.reciprocation_prob(peer), self.state_probs(peer)[1])
        return out


def record_triplet(table: TransitionTable, peer, t: ObservationTriplet) -> TransitionTable:
    table.record(peer, t.s_prev, t.action, t.s_next)
    return table


def transition_prob(table: TransitionTable, peer, s: int, a: int, s_next: int) -> float:
    return table.transition_prob(peer, s, a, s_next)


def reciprocation_prob(table: TransitionTable, peer) -> float:
    """Marginal-weighted probability that ``peer`` answers an unchoke with a high-rate upload."""
    return table.reciprocation_prob(peer)
