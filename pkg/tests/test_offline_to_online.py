from dataclasses import replace

import numpy as np
import pytest

from cpqlbench import InvariantError
from cpqlbench.cpql import CpqlConfig, TabularLearner
from cpqlbench.datasets import collect_trajectories
from cpqlbench.mdp_core import TabularPolicy, optimal_policy, policy_evaluation_exact
from cpqlbench.offline_to_online import (
    O2oConfig,
    Replay,
    compare_transition_baselines,
    online_phase,
    paired_avg_q_csv,
    run_offline_to_online,
    sample_probe,
)

OFFLINE = CpqlConfig(alpha=1.0, lam=0.7, iters=60, batch=32, improvement="greedy")


@pytest.fixture
def setup(toggle):
    ds = collect_trajectories(toggle, TabularPolicy.uniform(2, 2), 10, 10, seed=0)
    return toggle, ds


def cfg(**kw):
    base = dict(offline=OFFLINE, online_steps=50, eval_every=10, horizon=5, probe_size=32, seed=3)
    base.update(kw)
    return O2oConfig(**base)


def test_no_online_budget_is_offline_run(setup):
    mdp, ds = setup
    tr = run_offline_to_online(mdp, ds, cfg(online_steps=0))
    assert tr.online == [] and len(tr.offline) == OFFLINE.iters
    assert all(r.phase == "offline" for r in tr.records)


def test_carry_over_is_exact(setup):
    mdp, ds = setup
    tr = run_offline_to_online(mdp, ds, cfg())
    assert tr.online[0].avg_q == tr.offline[-1].avg_q
    assert tr.online[0].step == 0


def test_greedy_fixed_point_is_invariant(toggle):
    q_star = policy_evaluation_exact(toggle, optimal_policy(toggle))
    ds = collect_trajectories(toggle, optimal_policy(toggle), 1, 5, seed=0)
    learner = TabularLearner(2, 2, toggle.gamma, TabularPolicy.uniform(2, 2),
                             CpqlConfig(alpha=0.0, lam=0.7, batch=16, improvement="greedy"), q_init=[q_star])
    c = cfg(online_steps=100, exploration_param=0.0, eval_every=1)
    probe = sample_probe(ds, 16, np.random.default_rng(0))
    recs, _ = online_phase(toggle, learner, c, np.random.default_rng(1), probe, Replay(50), 0.7)
    assert len(recs) == 101
    assert max(abs(r.avg_q - recs[0].avg_q) for r in recs) <= 1e-6


def test_replay_provenance(setup):
    mdp, ds = setup
    fresh = run_offline_to_online(mdp, ds, cfg(online_steps=40, horizon=5, replay_capacity=3))
    assert fresh.replay_tags == ("online",) * 3
    kept = run_offline_to_online(mdp, ds, cfg(online_steps=40, horizon=5, retain_offline=True))
    assert kept.replay_tags == ("offline",) * len(ds) + ("online",) * 8


def test_replay_contents_come_from_actor_or_data(setup):
    mdp, ds = setup
    replay = Replay(10, ds.episodes)
    learner = TabularLearner(2, 2, mdp.gamma, TabularPolicy.uniform(2, 2), OFFLINE)
    online_phase(mdp, learner, cfg(online_steps=20), np.random.default_rng(0), sample_probe(ds, 8, np.random.default_rng(0)),
                 replay, 0.7)
    assert replay.episodes[: len(ds)] == list(ds.episodes)
    for ep in replay.online:
        assert len(ep) == 5
        # every online transition is possible in the true MDP with its true reward
        for s, a, r, s2 in zip(ep.states[:-1], ep.actions, ep.rewards, ep.states[1:]):
            assert mdp.P[s, a, s2] > 0 and r == mdp.r[s, a]


def test_deterministic_and_paired(setup):
    mdp, ds = setup
    a = compare_transition_baselines(mdp, ds, cfg())
    b = compare_transition_baselines(mdp, ds, cfg())
    assert a.cpql_to_pql.to_csv() == b.cpql_to_pql.to_csv()
    assert a.baseline.to_csv() == b.baseline.to_csv()
    control = compare_transition_baselines(mdp, ds, cfg(), baseline="cpql_to_pql")
    assert control.cpql_to_pql.to_csv() == control.baseline.to_csv()
    assert a.manifest(cfg())["arms"]["cql_to_qlearning"]["offline"]["lam"] == 0.0


def test_alpha_grid_csv(setup):
    mdp, ds = setup
    runs = {al: compare_transition_baselines(mdp, ds, cfg(offline=replace(OFFLINE, alpha=al)))
            for al in (1.0, 5.0)}
    rows = paired_avg_q_csv(runs).splitlines()
    assert rows[0] == "arm,alpha,phase,step,avg_q"
    arms = {tuple(r.split(",")[:2]) for r in rows[1:]}
    assert len(arms) == 4


def test_scratch_arm_has_no_offline_phase(setup):
    mdp, ds = setup
    tr = run_offline_to_online(mdp, ds, cfg(), pretrain=False)
    assert tr.transition_index == 0 and tr.offline == []
    assert tr.online[0].avg_q == 0.0


def test_config_validation():
    with pytest.raises(InvariantError):
        O2oConfig(exploration="boltzmann")
    with pytest.raises(InvariantError):
        O2oConfig.from_dict({"budget": 3})
    c = cfg()
    assert O2oConfig.from_dict(c.to_dict()) == c
