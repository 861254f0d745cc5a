import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rltorrent.errors import ContractError, ConvergenceError, InvalidInputError
from rltorrent.learning import RateEstimate, TransitionTable
from rltorrent.mdp import (
    MdpModel,
    bellman_residual,
    build_mdp,
    expected_reward,
    group_unchoke_probs,
    n_actions,
    policy_lookup,
    reduce_peer_set,
    state_bits,
    unchoke_probabilities,
    value_iteration,
)

from oracles import actions, expectimax, joint_prob, states, unchoke_mass


def random_model(rng, m, nu=None):
    nu = nu if nu is not None else int(rng.integers(1, m + 1))
    q = rng.random((m, 2, 2))
    # some deterministic rows, like the optimistic priors
    q[rng.random((m, 2, 2)) < 0.2] = rng.integers(0, 2)
    return MdpModel(tuple(range(m)), nu, q, rng.random(m) * 10)


def lookup(policy, s):
    return policy_lookup(policy, s, policy.created_at)


@st.composite
def models(draw, max_m=4):
    m = draw(st.integers(1, max_m))
    nu = draw(st.integers(1, m))
    probs = st.one_of(st.sampled_from([0.0, 1.0]), st.floats(0, 1))
    q = draw(arrays(np.float64, (m, 2, 2), elements=probs))
    r = draw(arrays(np.float64, (m,), elements=st.floats(0, 100)))
    return MdpModel(tuple(range(m)), nu, q, r)


@pytest.mark.parametrize("rate,p,out", [(20, 1, 20), (20, 0, 0), (15, 0.5, 7.5)])
def test_expected_reward(rate, p, out):
    assert expected_reward(rate, p) == out


def test_expected_reward_domain():
    with pytest.raises(InvalidInputError):
        expected_reward(10, 1.5)


def test_model_sizes():
    est = {i: RateEstimate(i, 100) for i in range(7)}
    model = build_mdp(list(range(7)), 4, TransitionTable(), est)
    assert (model.n_states, model.n_actions) == (128, 35)
    assert n_actions(7, 4) == 35
    one = build_mdp([0], 1, TransitionTable(), est)
    assert (one.n_states, one.n_actions) == (2, 1)


def test_too_many_unchokes_rejected():
    est = {i: RateEstimate(i, 100) for i in range(3)}
    with pytest.raises(InvalidInputError):
        build_mdp([0, 1, 2], 4, TransitionTable(), est)


def test_build_reads_table_and_estimates():
    table = TransitionTable()
    table.record("a", 1, 1, 0)
    est = {"a": RateEstimate("a", 100, estimate=30.0)}
    model = build_mdp(["a"], 1, table, est, reward_scale=10)
    assert model.next_one[0].tolist() == [[0.0, 1.0], [0.0, 0.0]]
    assert model.rewards.tolist() == [3.0]


@given(models(max_m=3))
def test_joint_transition_is_the_product(model):
    P = model.joint_transition()
    m = model.m
    q = model.next_one.tolist()
    for ai, a in enumerate(actions(m, model.n_unchoke)):
        for s in states(m):
            si = sum(b << i for i, b in enumerate(s))
            for s2 in states(m):
                s2i = sum(b << i for i, b in enumerate(s2))
                assert abs(P[ai, si, s2i] - joint_prob(q, s, a, s2)) <= 1e-12
    assert np.allclose(P.sum(axis=2), 1.0, atol=1e-9)


def test_single_peer_geometric_series():
    est = {"a": RateEstimate("a", 100, estimate=10.0)}
    model = build_mdp(["a"], 1, TransitionTable(), est)
    pol = value_iteration(model, gamma=0.5, eps=1e-10)
    assert lookup(pol, [0]) == (1,) and lookup(pol, [1]) == (1,)
    assert pol.values[1] == pytest.approx(20.0, abs=1e-8)


def test_gamma_domain():
    model = random_model(np.random.default_rng(0), 2)
    with pytest.raises(InvalidInputError):
        value_iteration(model, gamma=1.0)
    with pytest.raises(InvalidInputError):
        value_iteration(model, eps=0)


def test_sweep_cap_reports_residual():
    model = random_model(np.random.default_rng(1), 3)
    with pytest.raises(ConvergenceError) as info:
        value_iteration(model, gamma=0.99, eps=1e-12, max_sweeps=3, jump=False)
    assert info.value.residual > 1e-12 and info.value.sweeps == 3


@pytest.mark.parametrize("seed", range(25))
def test_matches_expectimax(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, int(rng.integers(1, 3)))
    pol = value_iteration(model, 0.9, 1e-6)
    _, Q, _ = expectimax(model.next_one.tolist(), model.rewards.tolist(), model.n_unchoke, 0.9, 20)
    for s in states(model.m):
        best = max(Q[s].values())
        assert Q[s][lookup(pol, list(s))] >= best - 1e-9 * max(1.0, best)


@given(models())
def test_residual_below_eps(model):
    pol = value_iteration(model, 0.9, 1e-6)
    assert bellman_residual(model, pol.values, 0.9) < 1e-6


@given(models())
def test_jump_and_plain_sweeps_agree(model):
    fast = value_iteration(model, 0.9, 1e-8)
    slow = value_iteration(model, 0.9, 1e-8, jump=False)
    assert np.allclose(fast.values, slow.values, atol=1e-6)
    # identical up to near-ties in action value
    P = model.joint_transition()
    reward = state_bits(model.m) @ model.rewards
    q = P @ (reward + 0.9 * fast.values)  # (A, S)
    for s in range(model.n_states):
        assert abs(q[fast.choice[s], s] - q[slow.choice[s], s]) <= 1e-6 * max(1.0, abs(q[:, s].max()))


@given(models(max_m=3))
def test_gamma_zero_is_one_step_greedy(model):
    pol = value_iteration(model, 0.0, 1e-9)
    m = model.m
    q = model.next_one.tolist()
    r = model.rewards.tolist()
    for s in states(m):
        one_step = {a: sum(joint_prob(q, s, a, s2) * sum(b * x for b, x in zip(s2, r)) for s2 in states(m)) for a in actions(m, model.n_unchoke)}
        best = max(one_step.values())
        assert one_step[lookup(pol, list(s))] >= best - 1e-9 * max(1.0, best)


@given(models(), st.data())
def test_raising_a_rate_never_lowers_values(model, data):
    i = data.draw(st.integers(0, model.m - 1))
    bump = data.draw(st.floats(0, 50))
    base = value_iteration(model, 0.9, 1e-9)
    rewards = model.rewards.copy()
    rewards[i] += bump
    higher = value_iteration(MdpModel(model.members, model.n_unchoke, model.next_one, rewards), 0.9, 1e-9)
    assert np.all(higher.values >= base.values - 1e-6)


def test_identical_peers_permute():
    rng = np.random.default_rng(3)
    q = rng.random((2, 2))
    third = rng.random((2, 2))
    model = MdpModel((0, 1, 2), 1, np.array([q, q, third]), np.array([5.0, 5.0, 3.0]))
    swapped = MdpModel((1, 0, 2), 1, np.array([q, q, third]), np.array([5.0, 5.0, 3.0]))
    a = value_iteration(model)
    b = value_iteration(swapped)
    for s in states(3):
        t = (s[1], s[0], s[2])
        assert a.values[sum(x << k for k, x in enumerate(s))] == pytest.approx(b.values[sum(x << k for k, x in enumerate(t))], abs=1e-9)


def test_policy_validity_window():
    model = random_model(np.random.default_rng(4), 3, nu=2)
    pol = value_iteration(model, created_at=10)
    assert policy_lookup(pol, [0, 1, 0], 13) is not None
    assert sum(policy_lookup(pol, [0, 1, 0], 13)) == 2
    assert policy_lookup(pol, [0, 1, 0], 14) is None
    with pytest.raises(ContractError):
        policy_lookup(pol, [0, 1], 10)


def test_unchoke_probabilities_match_enumeration():
    rng = np.random.default_rng(5)
    model = random_model(rng, 3, nu=1)
    pol = value_iteration(model)
    marg = [(1 - p, p) for p in (0.2, 0.7, 0.5)]
    got = unchoke_probabilities(pol, marg)
    choice = {s: lookup(pol, list(s)) for s in states(3)}
    assert np.allclose(got, unchoke_mass(choice, [0.2, 0.7, 0.5]), atol=1e-12)


def test_group_probs_sum_to_slots():
    rng = np.random.default_rng(6)
    probs = group_unchoke_probs(rng.random((4, 4)), rng.random(4) * 10, rng.random(4), 2)
    assert probs.sum() == pytest.approx(2.0, abs=1e-12)


# -- peer-set reduction --------------------------------------------------------


def peers_with_rates(rates, table=None):
    table = table or TransitionTable()
    est = {}
    for pid, rate in enumerate(rates):
        est[pid] = RateEstimate(pid, 100)
        est[pid].estimate = float(rate)
        est[pid].has_history = True
    return list(est), table, est


def test_small_pool_kept_whole():
    peers, table, est = peers_with_rates([5, 1, 3, 2, 4])
    out = reduce_peer_set(peers, 7, 4, 2, table, est)
    assert sorted(out.members) == peers
    # ascending expected reward
    assert list(out.expected) == sorted(out.expected)


def test_removed_peers_come_from_the_weakest():
    rates = [100 - 10 * k for k in range(10)]  # strictly decreasing
    peers, table, est = peers_with_rates(rates)
    out = reduce_peer_set(peers, 7, 4, 2, table, est)
    removed = set(peers) - set(out.members)
    assert len(out) == 7 and len(removed) == 3
    weakest4 = set(sorted(peers, key=lambda p: rates[p])[:4])
    assert removed <= weakest4


def test_identical_peers_deterministic():
    peers, table, est = peers_with_rates([10] * 10)
    first = reduce_peer_set(peers, 7, 4, 2, table, est)
    again = reduce_peer_set(list(reversed(peers)), 7, 4, 2, table, est)
    assert len(first) == 7 and first.members == again.members


def test_empty_pool():
    assert len(reduce_peer_set([], 7, 4, 2, TransitionTable(), {})) == 0


def test_bad_group_sizes():
    with pytest.raises(InvalidInputError):
        reduce_peer_set([1], 7, 2, 2, TransitionTable(), {1: RateEstimate(1, 10)})


def test_top_t_survive_with_separable_behaviour():
    # Strong peers reciprocate reliably; weak ones never answer an unchoke.
    table = TransitionTable()
    rates = [90, 80, 70, 60, 50, 40, 30, 8, 6, 4, 2]
    for p, rate in enumerate(rates):
        good = rate >= 30
        for s in (0, 1):
            for _ in range(5):
                table.record(p, s, 1, 1 if good else 0)
                table.record(p, s, 0, 0)
    peers, table, est = peers_with_rates(rates, table)
    out = reduce_peer_set(peers, 7, 4, 2, table, est)
    assert set(out.members) == set(range(7))


@given(st.lists(st.integers(0, 100), max_size=16), st.integers(1, 9), st.data())
def test_reduction_contract(rates, T, data):
    c2 = data.draw(st.integers(1, 3))
    c1 = data.draw(st.integers(c2 + 1, 5))
    peers, table, est = peers_with_rates(rates)
    rng = np.random.default_rng(len(rates))
    for p in peers:
        for _ in range(int(rng.integers(0, 4))):
            table.record(p, int(rng.integers(2)), int(rng.integers(2)), int(rng.integers(2)))
    out = reduce_peer_set(peers, T, c1, c2, table, est)
    assert len(out) == min(len(peers), T)
    assert set(out.members) <= set(peers) and len(set(out.members)) == len(out)
    assert reduce_peer_set(peers, T, c1, c2, table, est).members == out.members
    keys = list(zip(out.expected, out.members))
    assert keys == sorted(keys)


def test_all_action_subsets_have_nu_bits():
    model = random_model(np.random.default_rng(8), 5, nu=3)
    pol = value_iteration(model)
    for s in itertools.product((0, 1), repeat=5):
        assert sum(lookup(pol, list(s))) == 3
