"""The twelve acceptance criteria at their stated tolerances.

Each test records a ``criterion N: PASS|FAIL ...`` line that is printed in
the terminal summary.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from cpqlbench.cli import cli_main
from cpqlbench.cpql import CpqlConfig, cpql_exact_iterate, lambda_return_targets
from cpqlbench.datasets import Segment, build_empirical_model, collect_trajectories
from cpqlbench.envs import HOPPER, EnvSpec, dataset_recipe, make_env, normalized_score
from cpqlbench.mdp_core import TabularPolicy, random_mdp, random_policy, state_values
from cpqlbench.offline_to_online import O2oConfig, run_offline_to_online
from cpqlbench.operators import (
    bellman_backup,
    nstep_backup,
    pql_backup_closed_form,
    pql_backup_series,
)
from cpqlbench.runner import ExperimentConfig, run_sweep, score_spread
from cpqlbench.theory_suite import (
    InstanceGrid,
    _instance,
    check_prop1_fixed_point,
    cql_reference_evaluation,
    run_full_suite,
)

from conftest import ACCEPTANCE_LINES, CHAIN, CHAIN_DATA

GRID = InstanceGrid()


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def suite():
    return run_full_suite(seed=1)


def by_name(reports, *names):
    return [r for r in reports if r.name in names]


def test_criterion_01_pql_fixed_point_is_mixture_value():
    start = time.perf_counter()
    worst, cells = 0.0, 0
    for idx in range(GRID.num_instances):
        for gamma in GRID.gammas:
            mdp, pib, pi, _ = _instance(1, idx, GRID, gamma)
            for lam in GRID.prop_lambdas:
                rep = check_prop1_fixed_point(mdp, pib, pi, lam)
                worst = max(worst, rep.residual)
                cells += 1
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-8 and elapsed < 10.0, f"{cells} cells, max residual {worst:.2e}, {elapsed:.2f}s")


def test_criterion_02_contraction_rate(suite):
    reps = by_name(suite, "prop2_contraction")
    bad = [r for r in reps if not r.passed]
    target = [r for r in reps if r.instance["gamma"] == 0.99 and r.instance["lam"] == 0.7]
    beta = target[0].details["beta"]
    asym = [r.details["asymptotic_ratio"] for r in target]
    ok = not bad and len(reps) == 160 and all(0.95 <= a <= beta + 1e-6 for a in asym)
    record(2, ok, f"{len(reps)} cells, ratio and envelope failures {len(bad)}; "
                  f"asymptotic ratio at (0.99, 0.7) in [{min(asym):.7f}, {max(asym):.7f}], beta={beta:.7f}")


@pytest.mark.xfail(strict=True, reason="upper end 0.9674+1e-6 lies below beta=0.9674267; see decisions ledger")
def test_criterion_02_literal_asymptotic_window(suite):
    target = [r for r in by_name(suite, "prop2_contraction")
              if r.instance["gamma"] == 0.99 and r.instance["lam"] == 0.7]
    hi = max(r.details["asymptotic_ratio"] for r in target)
    ACCEPTANCE_LINES.append(f"criterion 2/literal: {'PASS' if hi <= 0.9674 + 1e-6 else 'FAIL'} "
                            f"max asymptotic ratio {hi:.7f} vs literal bound 0.9674010 (expected failure)")
    assert hi <= 0.9674 + 1e-6


def test_criterion_03_thm1_pessimism_and_gap(suite):
    lb = by_name(suite, "thm1_lower_bound")
    gap = by_name(suite, "thm1_closed_form_gap")
    ok = len(lb) == 60 and len(gap) == 60 and all(r.passed for r in lb + gap)
    record(3, ok, f"{len(lb)} lower-bound cells (max excess {max(r.lhs for r in lb):.2e}), "
                  f"{len(gap)} closed-form gap cells (max dev {max(r.residual for r in gap):.2e})")


def test_criterion_04_thm2_improvement(suite):
    reps = by_name(suite, "thm2_improvement")
    ok = len(reps) == 120 and all(r.passed for r in reps)
    record(4, ok, f"{len(reps)} cells, max (rhs - lhs) {max(r.residual for r in reps):.2e}")


def test_criterion_05_thm3_gap(suite):
    reps = by_name(suite, "thm3_gap")
    ok = len(reps) == 120 and all(r.passed for r in reps)
    record(5, ok, f"{len(reps)} cells, max (lhs - rhs) {max(r.residual for r in reps):.2e}")


def test_criterion_06_supporting_lemmas(suite):
    ratio = by_name(suite, "ratio_nonneg")[0]
    ident = by_name(suite, "visitation_identity")
    bound = by_name(suite, "visitation_bound")
    samp = by_name(suite, "sampling_error_lemma", "return_difference")
    steps = sorted({r.instance["steps"] for r in samp})
    ok = (ratio.passed and ratio.lhs >= -1e-12 and ratio.instance["trials"] == 10_000
          and all(r.passed for r in ident + bound + samp) and max(r.residual for r in ident) <= 1e-10
          and steps == [500, 10_000])
    record(6, ok, f"ratio min {ratio.lhs:.3e}; identity max {max(r.residual for r in ident):.1e}; "
                  f"{len(bound)} bound cells; {len(samp)} sampling cells at steps {steps}")


def test_criterion_07_reductions():
    rng = np.random.default_rng(7)
    mdp = random_mdp(6, 3, 0.9, rng)
    pib, pi = random_policy(6, 3, rng, floor=0.1), random_policy(6, 3, rng)
    q = rng.uniform(-5, 5, (6, 3))
    d_bellman = float(np.max(np.abs(pql_backup_closed_form(mdp, pib, pi, 0.0, q) - bellman_backup(mdp, pi, q))))
    d_nstep = float(np.max(np.abs(nstep_backup(mdp, pib, pi, 1, q) - bellman_backup(mdp, pi, q))))
    n_max = math.ceil(math.log(1e-12) / math.log(0.7))
    series, _ = pql_backup_series(mdp, pib, pi, 0.7, q, n_max)
    d_series = float(np.max(np.abs(series - pql_backup_closed_form(mdp, pib, pi, 0.7, q))))
    ds = collect_trajectories(mdp, pib, 200, 30, seed=3)
    emp = build_empirical_model(ds)
    q_hat, _, _ = cpql_exact_iterate(emp, emp.behavior_policy, CpqlConfig(alpha=0.7, lam=0.0, improvement="none"),
                                     initial_policy=pi)
    d_cql = float(np.max(np.abs(q_hat - cql_reference_evaluation(ds, pi, 0.7, mdp.gamma, iters=2000))))
    ok = (d_bellman <= 1e-12 and d_nstep <= 1e-12 and d_series <= 1e-8 and 0.7**n_max <= 1e-12
          and emp.observed_pairs.all() and d_cql <= 1e-10)
    record(7, ok, f"pql(0)-bellman {d_bellman:.1e}, cpql(0)-cql {d_cql:.1e}, series {d_series:.1e} "
                  f"(n_max={n_max}), nstep(1)-bellman {d_nstep:.1e}")


def test_criterion_08_lambda_return_targets():
    rng = np.random.default_rng(8)
    seg = Segment(rng.integers(3, size=6), rng.integers(2, size=5), rng.uniform(size=5))
    q = rng.uniform(-1, 1, (3, 2))
    pi = random_policy(3, 2, rng)
    g = 0.9
    v = state_values(q, pi)
    one_step = seg.rewards + g * v[seg.states[1:]]
    eq0 = bool(np.array_equal(lambda_return_targets(seg, q, pi, 0.0, g), one_step))
    first = Segment(seg.states[:2], seg.actions[:1], seg.rewards[:1])
    eq1 = lambda_return_targets(first, q, pi, 0.9, g)[0] == one_step[0]

    def nstep(k):
        return sum(g**i * seg.rewards[i] for i in range(k)) + g**k * v[seg.states[k]]

    lam = 0.9
    expanded = sum((1 - lam) * lam ** (k - 1) * nstep(k) for k in range(1, 5)) + lam**4 * nstep(5)
    dev = abs(lambda_return_targets(seg, q, pi, lam, g)[0] - expanded)
    record(8, eq0 and eq1 and dev <= 1e-12, f"lambda=0 exact {eq0}, n=1 exact {eq1}, expansion dev {dev:.1e}")


def chain_sweep_config(tmp_path, **kw):
    data = {
        "env": CHAIN,
        "dataset": CHAIN_DATA,
        "train": {"iters": 1000},
        "alpha_grid": [0.1, 1.0, 5.0, 10.0],
        "lambda_grid": [0.7],
        "operators": ["cpql", "cql"],
        "repeats": 5,
        "output_dir": str(tmp_path),
    }
    data.update(kw)
    return ExperimentConfig.from_dict(data)


def test_criterion_09_alpha_sensitivity(tmp_path):
    start = time.perf_counter()
    results = run_sweep(chain_sweep_config(tmp_path))
    elapsed = time.perf_counter() - start
    cpql, cql = score_spread(results, "cpql", 0.7), score_spread(results, "cql")
    ok = all(r.error is None for r in results) and cpql <= cql and elapsed < 300
    record(9, ok, f"score spread over alpha: CPQL(0.7) {cpql:.3g} vs CQL {cql:.3g}; {elapsed:.1f}s")


def test_criterion_10_offline_to_online():
    mdp = make_env(EnvSpec(**CHAIN))
    offline = CpqlConfig(alpha=1.0, lam=0.7, iters=1000)
    carried, pre, scratch = [], [], []
    for seed in range(5):
        ds = dataset_recipe(mdp, seed=seed, **CHAIN_DATA)
        cfg = O2oConfig(offline=replace(offline, seed=seed), online_steps=2000, seed=seed)
        a = run_offline_to_online(mdp, ds, cfg)
        b = run_offline_to_online(mdp, ds, cfg, pretrain=False)
        carried.append(a.online[0].avg_q == a.offline[-1].avg_q)
        pre.append(a.final_j)
        scratch.append(b.final_j)
    ok = all(carried) and np.mean(pre) >= np.mean(scratch)
    record(10, ok, f"carry-over exact {all(carried)}; final J pretrained {np.round(pre, 4).tolist()} "
                   f"(mean {np.mean(pre):.4f}) vs scratch {np.round(scratch, 4).tolist()} (mean {np.mean(scratch):.4f})")


def test_criterion_11_determinism(tmp_path):
    for workers in ("1", "4"):
        assert cli_main(["verify", "--seed", "1", "--workers", workers, "--out", str(tmp_path / f"v{workers}")]) == 0
    same_verify = (tmp_path / "v1" / "verify_report.json").read_bytes() == \
        (tmp_path / "v4" / "verify_report.json").read_bytes()
    cfg = {**json.loads(json.dumps(chain_sweep_config(tmp_path).to_dict())),
           "train": {"iters": 100}, "repeats": 2}
    (tmp_path / "sweep.json").write_text(json.dumps(cfg))
    for workers in ("1", "3"):
        assert cli_main(["sweep", "--config", str(tmp_path / "sweep.json"), "--workers", workers,
                         "--out", str(tmp_path / f"s{workers}")]) == 0
    files = sorted(p.relative_to(tmp_path / "s1") for p in (tmp_path / "s1").rglob("*") if p.is_file())
    same_sweep = all((tmp_path / "s1" / f).read_bytes() == (tmp_path / "s3" / f).read_bytes() for f in files)
    record(11, same_verify and same_sweep and len(files) > 4,
           f"verify report identical across workers {same_verify}; {len(files)} sweep files identical {same_sweep}")


def test_criterion_12_normalized_score():
    top = normalized_score(HOPPER.ref_max, HOPPER)
    bottom = normalized_score(HOPPER.ref_min, HOPPER)
    rng = np.random.default_rng(12)
    xs, ys, ts = rng.uniform(-1e4, 1e4, 100), rng.uniform(-1e4, 1e4, 100), rng.uniform(0, 1, 100)
    dev = max(abs(normalized_score(t * x + (1 - t) * y, HOPPER)
                  - (t * normalized_score(x, HOPPER) + (1 - t) * normalized_score(y, HOPPER)))
              for x, y, t in zip(xs, ys, ts))
    record(12, top == 100.0 and bottom == 0.0 and dev <= 1e-10,
           f"ref_max -> {top!r}, ref_min -> {bottom!r}, affine dev {dev:.1e}")
