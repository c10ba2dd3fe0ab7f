import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from cpqlbench import InvariantError
from cpqlbench.mdp_core import (
    FiniteMdp,
    TabularPolicy,
    expected_return,
    greedy_policy,
    horizon_for,
    mixture_policy,
    optimal_policy,
    policy_evaluation_exact,
    random_mdp,
    random_policy,
    state_values,
    total_variation,
    value_iteration,
    visitation_distribution,
)

from conftest import make_instance

STAY, TOGGLE = 0, 1


def always(action, S=2, A=2):
    return TabularPolicy.deterministic([action] * S, A)


class TestValidation:
    def test_rows_must_sum_to_one(self, toggle):
        P = toggle.P.copy()
        P[0, 0, 0] = 0.9
        with pytest.raises(InvariantError):
            FiniteMdp(P, toggle.r, 0.5, toggle.d0)

    def test_rows_are_not_renormalized(self, toggle):
        P = toggle.P.copy()
        P[0, 0] = [1.0 - 5e-10, 5e-10]
        mdp = FiniteMdp(P, toggle.r, 0.5, toggle.d0)
        assert mdp.P[0, 0, 1] == 5e-10

    @pytest.mark.parametrize("gamma", [-0.1, 1.0])
    def test_gamma_range(self, toggle, gamma):
        with pytest.raises(InvariantError):
            FiniteMdp(toggle.P, toggle.r, gamma, toggle.d0)

    def test_reward_bound(self, toggle):
        with pytest.raises(InvariantError):
            FiniteMdp(toggle.P, toggle.r * 3, 0.5, toggle.d0, r_max=1.0)

    def test_negative_policy(self):
        with pytest.raises(InvariantError):
            TabularPolicy(np.array([[1.5, -0.5]]))

    def test_json_round_trip(self, instance, tmp_path):
        mdp = instance[0]
        path = tmp_path / "mdp.json"
        mdp.save(path)
        back = FiniteMdp.load(path)
        assert_array_equal(back.P, mdp.P)
        assert_array_equal(back.r, mdp.r)
        assert back.sha256() == mdp.sha256()
        assert set(json.loads(path.read_text())) == {"S", "A", "gamma", "r_max", "d0", "r", "P"}


class TestToggleValues:
    def test_always_stay(self, toggle):
        q = policy_evaluation_exact(toggle, always(STAY))
        assert q[1, STAY] == pytest.approx(2.0, abs=1e-12)
        assert q[0, TOGGLE] == pytest.approx(1.0, abs=1e-12)
        assert expected_return(toggle, always(STAY)) == pytest.approx(0.0, abs=1e-12)

    def test_value_iteration(self, toggle):
        q, pi = value_iteration(toggle, tol=1e-12)
        v = q.max(axis=1)
        assert_allclose(v, [1.0, 2.0], atol=1e-10)
        assert_array_equal(pi.probs.argmax(axis=1), [TOGGLE, STAY])
        assert expected_return(toggle, pi) == pytest.approx(1.0, abs=1e-12)

    def test_visitation_absorbing_start(self, toggle):
        d = visitation_distribution(toggle, always(STAY)).state_probs
        assert_array_equal(d, [1.0, 0.0])


def test_gamma_zero_values_are_rewards():
    rng = np.random.default_rng(3)
    mdp = random_mdp(5, 3, 0.0, rng)
    q, _ = value_iteration(mdp)
    assert_array_equal(q, mdp.r)
    d = visitation_distribution(mdp, random_policy(5, 3, rng)).state_probs
    assert_allclose(d, mdp.d0, atol=1e-15)


def test_policy_evaluation_matches_iterated_backup():
    mdp, _, pi = make_instance(11, S=6, A=3, gamma=0.9)
    q = np.zeros((6, 3))
    for _ in range(10_000):
        q = mdp.r + mdp.gamma * mdp.P @ state_values(q, pi)
    assert_allclose(policy_evaluation_exact(mdp, pi), q, atol=1e-8, rtol=0)


def test_optimal_policy_dominates_random_policies():
    rng = np.random.default_rng(5)
    mdp = random_mdp(8, 3, 0.9, rng)
    _, pi_star = value_iteration(mdp)
    q_star = policy_evaluation_exact(mdp, pi_star)
    j_star = expected_return(mdp, pi_star)
    for _ in range(100):
        pi = random_policy(8, 3, rng)
        assert j_star >= expected_return(mdp, pi) - 1e-9
        assert np.all(q_star >= policy_evaluation_exact(mdp, pi) - 1e-6)
    assert_array_equal(optimal_policy(mdp).probs, pi_star.probs)


def test_visitation_matches_truncated_series():
    mdp, _, pi = make_instance(2, S=7, A=3, gamma=0.9)
    chain = mdp.state_chain(pi)
    T = horizon_for(mdp.gamma, 1e-10)
    d, p = np.zeros(7), mdp.d0.copy()
    for t in range(T + 1):
        d += (1 - mdp.gamma) * mdp.gamma**t * p
        p = p @ chain
    assert_allclose(visitation_distribution(mdp, pi).state_probs, d, atol=1e-8)


class TestGreedy:
    def test_strict_argmax_one_hot(self):
        q = np.array([[0.0, 2.0, 1.0], [3.0, 1.0, 0.0]])
        assert_array_equal(greedy_policy(q).probs, [[0, 1, 0], [1, 0, 0]])

    def test_constant_row_tie_rules(self):
        q = np.zeros((1, 4))
        assert_array_equal(greedy_policy(q).probs, [[1, 0, 0, 0]])
        assert_array_equal(greedy_policy(q, tie_break="uniform").probs, [[0.25] * 4])

    def test_allowed_mask(self):
        q = np.array([[5.0, 1.0, 2.0]])
        assert greedy_policy(q, allowed=np.array([[False, True, True]])).probs[0].argmax() == 2


class TestMixture:
    def test_endpoints_exact(self, instance):
        _, pib, pi = instance
        assert mixture_policy(pib, pi, 0.0) is pi
        assert mixture_policy(pib, pi, 1.0) is pib

    def test_convex_combination(self):
        pib = TabularPolicy(np.array([[0.5, 0.5], [0.5, 0.5]]))
        assert mixture_policy(pib, always(STAY), 0.5).probs[0, STAY] == 0.75


class TestTotalVariation:
    def test_equal(self, instance):
        assert_array_equal(total_variation(instance[1], instance[1]), 0.0)

    def test_disjoint(self):
        assert_array_equal(total_variation(always(STAY), always(TOGGLE)), 1.0)

    def test_uniform_vs_one_hot(self):
        assert_allclose(total_variation(TabularPolicy.uniform(2, 2), always(STAY)), 0.5)


@given(seed=st.integers(0, 2**31), gamma=st.sampled_from([0.0, 0.5, 0.9, 0.99]))
def test_values_bounded_and_return_forms_agree(seed, gamma):
    rng = np.random.default_rng(seed)
    S, A = rng.integers(1, 7), rng.integers(1, 4)
    mdp = random_mdp(S, A, gamma, rng)
    pi = random_policy(S, A, rng)
    q = policy_evaluation_exact(mdp, pi)
    assert np.max(np.abs(q)) <= mdp.r_max / (1 - gamma) + 1e-6
    expected_return(mdp, pi)  # raises if the two forms disagree by more than 1e-8
