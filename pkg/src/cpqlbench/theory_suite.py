"""Executable checks of the PQL/CPQL fixed-point, contraction and bound results.

Every check returns a :class:`CheckReport` with both sides of the relation,
the residual and the tolerance.  Equality checks pass when
``residual <= tolerance``; inequality checks compute the residual as
``lhs - rhs`` (so a negative residual means slack) and pass when
``residual <= tolerance``.

Sampling-error results are checked with measured model deviations in place
of the unknowable concentration constants; the remaining inequality chain is
deterministic.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from cpqlbench.cpql import CpqlConfig, cpql_exact_iterate, expected_ratio_gap, penalized_objective
from cpqlbench.datasets import EmpiricalModel, collect_trajectories, build_empirical_model
from cpqlbench.errors import SupportViolation
from cpqlbench.mdp_core import (
    FiniteMdp,
    TabularPolicy,
    expected_return,
    greedy_policy,
    mixture_policy,
    optimal_policy,
    policy_evaluation_exact,
    random_mdp,
    random_policy,
    state_values,
    total_variation,
    two_state_toggle,
    visitation_distribution,
)
from cpqlbench.operators import BackupOperator, as_mdp, propagate_error, solve_fixed_point


@dataclass
class CheckReport:
    name: str
    instance: dict
    lhs: float
    rhs: float
    residual: float
    tolerance: float
    passed: bool
    relation: str = "eq"
    trivial: bool = False
    asserted: bool = True
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _report(name, instance, lhs, rhs, residual, tol, relation="eq", trivial=False, asserted=True, **details):
    lhs, rhs, residual = float(lhs), float(rhs), float(residual)
    passed = bool(residual <= tol)
    if lhs == 0.0 and rhs == 0.0 and not trivial:
        passed = False
        details["vacuous"] = True
    return CheckReport(name, instance, lhs, rhs, residual, tol, passed, relation, trivial, asserted, details)


def _describe(mdp: FiniteMdp, **kw) -> dict:
    out = {"S": mdp.num_states, "A": mdp.num_actions, "gamma": mdp.gamma}
    out.update(kw)
    return out


def _inf(x) -> float:
    return float(np.max(np.abs(x)))


# --------------------------------------------------------------------------
# operator results


def check_prop1_fixed_point(mdp, pi_beta, pi, lam, tol=1e-8, instance=None) -> CheckReport:
    """PQL fixed point (by iteration) against the mixture-policy linear solve."""
    trace = solve_fixed_point(BackupOperator.pql(mdp, pi_beta, pi, lam), tol=1e-11)
    direct = policy_evaluation_exact(mdp, mixture_policy(pi_beta, pi, lam))
    res = _inf(trace.q_final - direct)
    inst = instance or _describe(mdp, lam=lam)
    return _report(
        "prop1_fixed_point", inst, _inf(trace.q_final), _inf(direct), res, tol,
        iterations=trace.iterations, converged=trace.converged,
    )


def pql_rate(gamma: float, lam: float) -> float:
    return gamma * (1.0 - lam) / (1.0 - gamma * lam)


def check_prop2_contraction(mdp, pi_beta, pi, lam, q0=None, iters=None, instance=None) -> CheckReport:
    """Error envelope ``e_k <= beta^k e_0`` and per-step ratio ``<= beta``.

    The envelope is checked on the actual iterates; the per-step ratio is
    checked on the error propagated through the operator's linear part, which
    is free of the cancellation noise (~1e-13) that dominates the ratio of two
    iterate errors once they fall below ~1e-4.
    """
    op = BackupOperator.pql(mdp, pi_beta, pi, lam)
    beta = op.modulus
    S, A = mdp.num_states, mdp.num_actions
    q0 = np.zeros((S, A)) if q0 is None else np.asarray(q0, dtype=float)
    if iters is None:
        iters = 3 if beta == 0 else max(3, int(math.ceil(math.log(1e-13) / math.log(beta))))
    ref = op.fixed_point()
    actual = solve_fixed_point(op, q0, tol=0.0, max_iter=iters).errors
    prop = propagate_error(op, q0 - ref, iters)
    e0 = actual[0]
    env_excess = max(actual[k] - (beta**k * e0 + 1e-9) for k in range(len(actual)))
    env_excess = max(env_excess, max(prop[k] - (beta**k * prop[0] + 1e-9) for k in range(len(prop))))
    ratios = [prop[k + 1] / prop[k] for k in range(len(prop) - 1) if prop[k] > 1e-12]
    ratio_excess = max((r - (beta + 1e-9) for r in ratios), default=-math.inf)
    tail = [k for k in range(len(prop)) if prop[k] > 1e-12]
    if len(tail) >= 11:
        k1 = tail[-1]
        asym = (prop[k1] / prop[k1 - 10]) ** 0.1
    else:
        asym = max(ratios, default=0.0)
    residual = max(env_excess, ratio_excess)
    inst = instance or _describe(mdp, lam=lam)
    return _report(
        "prop2_contraction", inst, max(ratios, default=0.0), beta, max(residual, -1.0), 0.0,
        relation="le", beta=beta, asymptotic_ratio=asym, iterations=iters,
    )


# --------------------------------------------------------------------------
# CPQL results in the exact regime


def check_thm1_lower_bound(mdp, pi_beta_hat, cfg: CpqlConfig, alphas=(0.0, 0.1, 1.0, 10.0), frozen_policy=None,
                           observed=None, instance=None) -> CheckReport:
    """Pessimism of ``V_hat^{mix}`` on S(D) for each alpha, frozen and improving policies."""
    S = mdp.num_states
    observed = np.ones(S, bool) if observed is None else np.asarray(observed, bool)
    if frozen_policy is None:
        frozen_policy = greedy_policy(policy_evaluation_exact(mdp, optimal_policy(mdp)),
                                      allowed=pi_beta_hat.probs > 0)
    worst = -math.inf
    eq_dev = 0.0
    gaps = []
    for alpha in alphas:
        runs = [
            CpqlConfig(alpha=alpha, lam=cfg.lam, improvement="none", temperature=cfg.temperature),
            CpqlConfig(alpha=alpha, lam=cfg.lam, improvement=cfg.improvement if cfg.improvement != "none" else "greedy",
                       temperature=cfg.temperature),
        ]
        for run in runs:
            # greedy improvement can cycle; the returned Q is exact for whatever policy it ends on
            frozen = run.improvement == "none"
            q_hat, pi, _ = cpql_exact_iterate(mdp, pi_beta_hat, run, observed=observed,
                                              initial_policy=frozen_policy if frozen else None,
                                              tol=1e-9, max_iter=5_000 if frozen else 300)
            mix = mixture_policy(pi_beta_hat, pi, cfg.lam)
            v_true = state_values(policy_evaluation_exact(mdp, mix), mix)
            v_hat = state_values(q_hat, mix)
            diff = (v_hat - v_true)[observed]
            if alpha == 0.0:
                eq_dev = max(eq_dev, float(np.abs(diff).max()))
            else:
                worst = max(worst, float(diff.max()))
                gaps.append(float(-diff.min()))
    trivial = not gaps
    worst = 0.0 if trivial else worst
    residual = max(worst, eq_dev)
    inst = instance or _describe(mdp, lam=cfg.lam, alphas=list(alphas))
    return _report("thm1_lower_bound", inst, worst, 0.0, residual, 1e-9, relation="le", trivial=trivial,
                   alpha0_equality_dev=eq_dev, max_gap=max(gaps, default=0.0))


def check_thm1_gap(mdp, lam, alpha, pi: TabularPolicy, instance=None) -> CheckReport:
    """Frozen deterministic ``pi`` with uniform behavior: constant gap ``alpha (1-lam)(|A|-1)/(1-gamma)``."""
    S, A = mdp.num_states, mdp.num_actions
    uniform = TabularPolicy.uniform(S, A)
    q_hat, _, _ = cpql_exact_iterate(mdp, uniform, CpqlConfig(alpha=alpha, lam=lam, improvement="none"),
                                     initial_policy=pi, tol=1e-9, max_iter=20_000)
    mix = mixture_policy(uniform, pi, lam)
    gap = state_values(policy_evaluation_exact(mdp, mix), mix) - state_values(q_hat, mix)
    expected = alpha * (1.0 - lam) * (A - 1) / (1.0 - mdp.gamma)
    res = float(np.max(np.abs(gap - expected)))
    inst = instance or _describe(mdp, lam=lam, alpha=alpha)
    return _report("thm1_closed_form_gap", inst, float(gap.mean()), expected, res, 1e-8, trivial=alpha == 0.0)


def check_thm2_improvement(mdp, pi_beta_hat, cfg: CpqlConfig, empirical: EmpiricalModel | None = None,
                           instance=None) -> CheckReport:
    """``J(mix) >= J(pi_beta) + alpha (1-lam)/(1-gamma) E_{d^mix} E_pi[ratio - 1]`` after hill-climbing.

    With ``empirical`` given the optimizer runs on the empirical model and the
    report is informational only (sampling terms are not modeled).
    """
    model = mdp if empirical is None else empirical
    run = CpqlConfig(alpha=cfg.alpha, lam=cfg.lam, improvement="penalized-hill-climb")
    _, pi_hat, trace = cpql_exact_iterate(model, pi_beta_hat, run)
    mix = mixture_policy(pi_beta_hat, pi_hat, cfg.lam)
    g = mdp.gamma
    lhs = expected_return(mdp, mix)
    d_mix = visitation_distribution(mdp, mix).state_probs
    gap = expected_ratio_gap(pi_hat, pi_beta_hat)
    penalty_term = cfg.alpha * (1.0 - cfg.lam) / (1.0 - g) * float(d_mix @ gap)
    rhs = expected_return(mdp, pi_beta_hat) + penalty_term
    same = bool(np.allclose(pi_hat.probs, pi_beta_hat.probs, atol=0, rtol=0))
    inst = instance or _describe(mdp, lam=cfg.lam, alpha=cfg.alpha)
    rep = _report("thm2_improvement", inst, rhs, lhs, rhs - lhs, 1e-8, relation="le", trivial=same,
                  asserted=empirical is None, penalty_term=penalty_term, hill_climb_steps=len(trace) - 1)
    if not rep.asserted:
        rep.passed = True
    return rep


def thm3_rhs(mdp, pi_beta_hat, pi_hat, pi_star, lam, alpha) -> tuple[float, float]:
    """The two sampling-free terms of the sub-optimality bound."""
    g, R = mdp.gamma, mdp.r_max
    b = pi_beta_hat.probs
    mass = pi_star.probs + pi_hat.probs
    if np.any((b <= 0) & (mass > 0)):
        raise SupportViolation("support violation: pi_star or pi_hat leaves the support of pi_beta_hat")
    d = visitation_distribution(mdp, mixture_policy(pi_beta_hat, pi_star, lam)).state_probs
    term1 = 2.0 * lam * R / (1.0 - g) ** 2 * float(d @ total_variation(pi_star, pi_beta_hat))
    xi = np.sum(np.where(b > 0, mass / np.where(b > 0, b, 1.0), 0.0), axis=1)
    inner = total_variation(pi_star, pi_hat) * (xi + g / (1.0 - g) * expected_ratio_gap(pi_hat, pi_beta_hat))
    term2 = 2.0 * alpha * (1.0 - lam) / (1.0 - g) * float(d @ inner)
    return term1, term2


def check_thm3_gap(mdp, pi_beta_hat, pi_hat, lam, alpha, instance=None) -> CheckReport:
    """Sub-optimality of the learned mixture against the sampling-free bound.

    ``pi_star`` is the policy-iteration optimum; ties are broken toward the
    lowest action index, so a different optimal policy would change the RHS.
    """
    pi_star = optimal_policy(mdp)
    lhs = expected_return(mdp, pi_star) - expected_return(mdp, mixture_policy(pi_beta_hat, pi_hat, lam))
    t1, t2 = thm3_rhs(mdp, pi_beta_hat, pi_hat, pi_star, lam, alpha)
    rhs = t1 + t2
    inst = instance or _describe(mdp, lam=lam, alpha=alpha)
    trivial = bool(np.array_equal(pi_star.probs, pi_beta_hat.probs)) and bool(np.array_equal(pi_hat.probs, pi_star.probs))
    return _report("thm3_gap", inst, lhs, rhs, lhs - rhs, 1e-8, relation="le", trivial=trivial,
                   tv_term=t1, ratio_term=t2)


# --------------------------------------------------------------------------
# supporting lemmas


def _deviations(true_mdp: FiniteMdp, emp: EmpiricalModel):
    dr = np.abs(emp.r_hat - true_mdp.r)
    dp = np.abs(emp.P_hat - true_mdp.P).sum(axis=2)
    return dr, dp


def check_sampling_error_lemma(true_mdp, empirical_model: EmpiricalModel, q, lam, pi=None,
                               instance=None) -> CheckReport:
    """``|T_lam Q - T_hat_lam Q| <= (dr_max + gamma dP_max R/(1-gamma)) / (1 - gamma lam)`` on observed pairs."""
    emp = empirical_model
    obs = emp.observed_pairs
    pib = emp.behavior_policy
    q = np.asarray(q, dtype=float)
    pi = greedy_policy(q) if pi is None else pi
    g = true_mdp.gamma
    R = max(true_mdp.r_max, emp.r_max)
    if _inf(q) > R / (1.0 - g) + 1e-12:
        raise ValueError("q exceeds the value bound R_max / (1 - gamma)")
    t_true = BackupOperator.pql(true_mdp, pib, pi, lam).apply(q)
    t_emp = BackupOperator.pql(emp.to_mdp(), pib, pi, lam).apply(q)
    lhs = float(np.max(np.abs(t_true - t_emp)[obs]))
    dr, dp = _deviations(true_mdp, emp)
    rhs = (dr[obs].max() + g * dp[obs].max() * R / (1.0 - g)) / (1.0 - g * lam)
    inst = instance or _describe(true_mdp, lam=lam, steps=int(emp.counts.sum()))
    trivial = lhs == 0.0 and rhs == 0.0
    return _report("sampling_error_lemma", inst, lhs, rhs, lhs - rhs, 1e-9, relation="le", trivial=trivial)


def check_ratio_nonneg(num_trials: int, seed: int) -> CheckReport:
    """``E_{pi1}[pi1/pi2 - 1] >= 0`` on random full-support rows; zero exactly on equal rows."""
    if num_trials < 1:
        raise ValueError("num_trials must be >= 1")
    rng = np.random.default_rng(seed)
    A = rng.integers(2, 7, size=num_trials)
    vals = np.empty(num_trials)
    equal_dev = 0.0
    for i, a in enumerate(A):
        p1 = rng.dirichlet(np.ones(a)) + 1e-3
        p1 /= p1.sum()
        p2 = rng.dirichlet(np.ones(a)) + 1e-3
        p2 /= p2.sum()
        vals[i] = float(np.sum(p1 * (p1 / p2 - 1.0)))
        equal_dev = max(equal_dev, abs(float(np.sum(p2 * (p2 / p2 - 1.0)))))
    min_val = float(vals.min())
    strict = bool(np.all(vals > 0))
    residual = max(-min_val - 1e-12, equal_dev - 1e-12, 0.0 if strict else 1.0)
    return _report("ratio_nonneg", {"trials": num_trials, "seed": seed}, min_val, 0.0, residual, 0.0,
                   relation="ge", equal_pair_dev=equal_dev, all_strict=strict)


def check_visitation_identity(mdp, pi1, pi2, instance=None) -> CheckReport:
    """``d1 - d2 = gamma (I - gamma P1)^-1 (P1 - P2) d2`` in column (distribution) form."""
    g = mdp.gamma
    S = mdp.num_states
    d1 = visitation_distribution(mdp, pi1).state_probs
    d2 = visitation_distribution(mdp, pi2).state_probs
    P1, P2 = mdp.state_chain(pi1).T, mdp.state_chain(pi2).T
    rhs_vec = g * np.linalg.solve(np.eye(S) - g * P1, (P1 - P2) @ d2)
    res = float(np.abs((d1 - d2) - rhs_vec).sum())
    trivial = bool(np.array_equal(pi1.probs, pi2.probs))
    inst = instance or _describe(mdp)
    return _report("visitation_identity", inst, float(np.abs(d1 - d2).sum()), float(np.abs(rhs_vec).sum()),
                   res, 1e-10, trivial=trivial)


def check_visitation_bound(mdp, pi1, pi2, instance=None) -> CheckReport:
    g = mdp.gamma
    d1 = visitation_distribution(mdp, pi1).state_probs
    d2 = visitation_distribution(mdp, pi2).state_probs
    lhs = float(np.abs(d1 - d2).sum())
    rhs = 2.0 * g / (1.0 - g) * float(d2 @ total_variation(pi1, pi2)) if g > 0 else 0.0
    trivial = bool(np.array_equal(pi1.probs, pi2.probs)) or g == 0.0
    inst = instance or _describe(mdp)
    return _report("visitation_bound", inst, lhs, rhs, lhs - rhs, 1e-9, relation="le", trivial=trivial)


def return_difference_bound(true_mdp, emp: EmpiricalModel, pi: TabularPolicy, lam: float) -> tuple[float, float]:
    """``(|J_M(mix) - J_Mhat(mix)|, bound)`` with measured per-state deviation constants."""
    pib = emp.behavior_policy
    mix = mixture_policy(pib, pi, lam)
    emp_mdp = emp.to_mdp(d0=true_mdp.d0)
    lhs = abs(expected_return(true_mdp, mix) - expected_return(emp_mdp, mix))
    g = true_mdp.gamma
    d_hat = visitation_distribution(emp_mdp, mix).state_probs
    b = pib.probs
    support = d_hat > 0
    if np.any(support & ~emp.observed_states) or np.any(b[support] <= 0):
        raise SupportViolation("support violation: behavior policy must cover every action on reachable states")
    dr, dp = _deviations(true_mdp, emp)
    e = dr + g * true_mdp.r_max * dp / (1.0 - g)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(b > 0, e * np.sqrt(b), 0.0).max(axis=1)
    ratio = np.where(b > 0, pi.probs**2 / np.where(b > 0, b, 1.0), 0.0).sum(axis=1)
    A = true_mdp.num_actions
    per_state = c * math.sqrt(A) * (lam + (1.0 - lam) * np.sqrt(ratio))
    bound = float(d_hat[support] @ per_state[support]) / (1.0 - g)
    return float(lhs), bound


def check_return_difference(true_mdp, empirical_model: EmpiricalModel, pi, lam, instance=None) -> CheckReport:
    lhs, rhs = return_difference_bound(true_mdp, empirical_model, pi, lam)
    inst = instance or _describe(true_mdp, lam=lam, steps=int(empirical_model.counts.sum()))
    trivial = lhs == 0.0 and rhs == 0.0
    return _report("return_difference", inst, lhs, rhs, lhs - rhs, 1e-9, relation="le", trivial=trivial)


# --------------------------------------------------------------------------
# CQL reference recursion built from raw transitions


def cql_reference_evaluation(ds, pi: TabularPolicy, alpha: float, gamma: float, iters: int = 3000) -> np.ndarray:
    """Frozen-policy CQL evaluation computed straight from dataset transitions.

    Each iteration minimizes, pair by pair, the sample objective
    ``1/2 sum_i (Q - y_i)^2 + alpha (N(s) pi(a|s) - N(s,a)) Q`` with
    ``y_i = r_i + gamma sum_a' pi(a'|s'_i) Q_k(s'_i, a')``.  Pairs absent from
    the data keep a zero-reward self-loop, matching the empirical model.
    """
    S, A = pi.probs.shape
    s = np.concatenate([ep.states[:-1] for ep in ds.episodes])
    a = np.concatenate([ep.actions for ep in ds.episodes])
    s2 = np.concatenate([ep.states[1:] for ep in ds.episodes])
    rw = np.concatenate([ep.rewards for ep in ds.episodes])
    n_sa = np.zeros((S, A))
    np.add.at(n_sa, (s, a), 1.0)
    n_s = n_sa.sum(axis=1)
    q = np.zeros((S, A))
    seen = n_sa > 0
    lin = np.where(seen, alpha * (n_s[:, None] * pi.probs - n_sa), 0.0)
    idx_s, idx_a = np.nonzero(~seen)
    for _ in range(iters):
        v = np.sum(pi.probs * q, axis=1)
        y_sum = np.zeros((S, A))
        np.add.at(y_sum, (s, a), rw + gamma * v[s2])
        nxt = np.zeros((S, A))
        # stationarity of the per-pair quadratic: N (Q - mean y) + lin = 0
        nxt[seen] = (y_sum[seen] - lin[seen]) / n_sa[seen]
        nxt[idx_s, idx_a] = gamma * v[idx_s]
        q = nxt
    return q


# --------------------------------------------------------------------------
# the suite


@dataclass(frozen=True)
class InstanceGrid:
    num_instances: int = 20
    max_states: int = 10
    max_actions: int = 4
    gammas: tuple = (0.9, 0.99)
    prop_lambdas: tuple = (0.0, 0.3, 0.7, 0.95)
    thm1_lambdas: tuple = (0.0, 0.5, 0.9)
    thm1_alphas: tuple = (0.0, 0.1, 1.0, 10.0)
    thm3_lambdas: tuple = (0.0, 0.3, 0.7)
    thm3_alphas: tuple = (0.1, 1.0)
    ratio_trials: int = 10_000
    dataset_steps: tuple = (500, 10_000)

    def __post_init__(self):
        if self.num_instances < 1:
            raise ValueError("instance grid must be non-empty")


def _instance(seed: int, idx: int, grid: InstanceGrid, gamma: float):
    rng = np.random.default_rng([seed, idx])
    S = int(rng.integers(2, grid.max_states + 1))
    A = int(rng.integers(2, grid.max_actions + 1))
    mdp = random_mdp(S, A, gamma, rng)
    pi_beta = random_policy(S, A, rng, floor=0.05)
    pi = random_policy(S, A, rng)
    return mdp, pi_beta, pi, rng


def _instance_checks(seed: int, idx: int, grid: InstanceGrid) -> list[CheckReport]:
    out = []
    for gamma in grid.gammas:
        mdp, pib, pi, rng = _instance(seed, idx, grid, gamma)
        base = {"seed": seed, "instance": idx, "S": mdp.num_states, "A": mdp.num_actions, "gamma": gamma}
        for lam in grid.prop_lambdas:
            out.append(check_prop1_fixed_point(mdp, pib, pi, lam, instance={**base, "lam": lam}))
            out.append(check_prop2_contraction(mdp, pib, pi, lam, instance={**base, "lam": lam}))
        out.append(check_visitation_identity(mdp, pi, pib, instance=base))
        out.append(check_visitation_bound(mdp, pi, pib, instance=base))
        if gamma != grid.gammas[0]:
            continue
        for lam in grid.thm1_lambdas:
            cfg = CpqlConfig(alpha=1.0, lam=lam, improvement="greedy")
            out.append(check_thm1_lower_bound(mdp, pib, cfg, alphas=grid.thm1_alphas,
                                              instance={**base, "lam": lam, "alphas": list(grid.thm1_alphas)}))
            det = TabularPolicy.deterministic(rng.integers(mdp.num_actions, size=mdp.num_states), mdp.num_actions)
            out.append(check_thm1_gap(mdp, lam, 10.0, det, instance={**base, "lam": lam, "alpha": 10.0}))
        for lam in grid.thm3_lambdas:
            for alpha in grid.thm3_alphas:
                cfg = CpqlConfig(alpha=alpha, lam=lam, improvement="penalized-hill-climb")
                inst = {**base, "lam": lam, "alpha": alpha}
                out.append(check_thm2_improvement(mdp, pib, cfg, instance=inst))
                _, pi_hat, _ = cpql_exact_iterate(mdp, pib, cfg)
                out.append(check_thm3_gap(mdp, pib, pi_hat, lam, alpha, instance=inst))
    return out


def _dataset_checks(seed: int, grid: InstanceGrid) -> list[CheckReport]:
    out = []
    toggle = two_state_toggle()
    uniform = TabularPolicy.uniform(2, 2)
    rng = np.random.default_rng([seed, 10_000])
    for steps in grid.dataset_steps:
        horizon = 20
        ds = collect_trajectories(toggle, uniform, steps // horizon, horizon, seed=int(rng.integers(2**31)),
                                  reward_noise=0.1)
        emp = build_empirical_model(ds)
        pi = greedy_policy(policy_evaluation_exact(toggle, optimal_policy(toggle)))
        R = max(toggle.r_max, emp.r_max)
        q = np.clip(policy_evaluation_exact(toggle, pi), -R / (1 - toggle.gamma), R / (1 - toggle.gamma))
        for lam in (0.0, 0.5, 0.9):
            inst = {"seed": seed, "fixture": "two_state_toggle", "steps": steps, "lam": lam}
            out.append(check_sampling_error_lemma(toggle, emp, q, lam, pi=pi, instance=inst))
            out.append(check_return_difference(toggle, emp, pi, lam, instance=inst))
    return out


def default_grid() -> InstanceGrid:
    return InstanceGrid()


def run_full_suite(seed: int = 1, grid: InstanceGrid | None = None, workers: int = 1) -> list[CheckReport]:
    """Run every check over the grid; report order is independent of ``workers``."""
    grid = default_grid() if grid is None else grid
    jobs = list(range(grid.num_instances))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda i: _instance_checks(seed, i, grid), jobs))
    else:
        chunks = [_instance_checks(seed, i, grid) for i in jobs]
    reports = [r for chunk in chunks for r in chunk]
    reports.append(check_ratio_nonneg(grid.ratio_trials, seed))
    reports.extend(_dataset_checks(seed, grid))
    return reports


def suite_passed(reports) -> bool:
    return all(r.passed for r in reports if r.asserted)


def report_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True)
