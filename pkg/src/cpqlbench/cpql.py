"""Conservative Peng's Q(lambda): exact penalized recursion and a sampled tabular learner.

Two learners share this module:

* ``cpql_exact_iterate`` runs the closed-form recursion
  ``Q_{k+1}(s,a) = T_lam Q_k(s,a) - alpha * (pi_k(a|s) / pi_beta(a|s) - 1)``
  on a known (true or empirical) model.  The theory checks use this path.
* ``cpql_sgd_train`` is the tabular rendering of the practical algorithm:
  sampled length-n segments, lambda-return targets, a log-sum-exp
  conservative loss and soft target updates.  Entropy bonuses are not used.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import logsumexp, softmax

from cpqlbench.datasets import EmpiricalModel, SegmentSampler, TrajectoryDataset, build_empirical_model
from cpqlbench.errors import InvariantError, SupportViolation
from cpqlbench.mdp_core import (
    FiniteMdp,
    TabularPolicy,
    expected_return,
    greedy_policy,
    mixture_policy,
    softmax_policy,
)
from cpqlbench.operators import as_mdp

IMPROVEMENTS = ("greedy", "softmax", "penalized-hill-climb", "none")
RETURNS = ("pql", "nstep", "retrace", "treebackup")


@dataclass(frozen=True)
class CpqlConfig:
    alpha: float = 1.0
    lam: float = 0.7
    segment_len: int = 5
    batch: int = 256
    lr: float = 0.5
    tau: float = 5e-3
    iters: int = 2000
    improvement: str = "softmax"
    temperature: float = 0.01
    twin_tables: bool = False
    returns: str = "pql"
    seed: int = 0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise InvariantError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.lam < 1.0:
            raise InvariantError(f"lam must lie in [0, 1), got {self.lam}")
        if self.segment_len < 1 or self.batch < 1:
            raise InvariantError("segment_len and batch must be >= 1")
        if not self.lr > 0:
            raise InvariantError("lr must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise InvariantError("tau must lie in (0, 1]")
        if self.iters < 0:
            raise InvariantError("iters must be >= 0")
        if self.improvement not in IMPROVEMENTS:
            raise InvariantError(f"improvement must be one of {IMPROVEMENTS}, got {self.improvement!r}")
        if self.returns not in RETURNS:
            raise InvariantError(f"returns must be one of {RETURNS}, got {self.returns!r}")
        if not self.temperature > 0:
            raise InvariantError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CpqlConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvariantError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    td_loss: float
    penalty: float
    avg_q: float
    j_eval: float = math.nan


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)
    q_tables: list[np.ndarray] = field(default_factory=list)
    policy: TabularPolicy | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def q(self) -> np.ndarray:
        """Pessimistic combination (pointwise min) of the final tables."""
        return np.minimum.reduce(self.q_tables)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "td_loss", "penalty", "avg_q", "j_eval"])
        for rec in self.records:
            w.writerow([rec.iter, repr(rec.td_loss), repr(rec.penalty), repr(rec.avg_q), repr(rec.j_eval)])
        return buf.getvalue()


# --------------------------------------------------------------------------
# ratio penalty and the exact recursion


def conservative_ratio_penalty(pi: TabularPolicy, pi_beta_hat: TabularPolicy, s: int, a: int) -> float:
    """``pi(a|s) / pi_beta_hat(a|s) - 1``; the caller multiplies by alpha."""
    b = pi_beta_hat.probs[s, a]
    if b <= 0.0:
        raise SupportViolation(f"support violation: pi_beta_hat({a}|{s}) = 0")
    return float(pi.probs[s, a] / b - 1.0)


def penalty_table(pi: TabularPolicy, pi_beta_hat: TabularPolicy, observed: np.ndarray | None = None) -> np.ndarray:
    """Ratio penalty on every in-data pair, zero elsewhere.

    In-data pairs are those at observed states with ``pi_beta_hat > 0``.
    Raises when ``pi`` puts mass on an out-of-data action at an observed state.
    """
    p, b = pi.probs, pi_beta_hat.probs
    if observed is None:
        observed = np.ones(p.shape[0], dtype=bool)
    in_data = observed[:, None] & (b > 0)
    bad = observed[:, None] & (b == 0) & (p > 0)
    if np.any(bad):
        s, a = np.argwhere(bad)[0]
        raise SupportViolation(f"support violation: pi({a}|{s}) > 0 but pi_beta_hat({a}|{s}) = 0")
    out = np.zeros_like(p)
    out[in_data] = p[in_data] / b[in_data] - 1.0
    return out


def expected_ratio_gap(pi: TabularPolicy, pi_beta_hat: TabularPolicy) -> np.ndarray:
    """Per-state ``E_{a~pi}[pi/pi_beta - 1] = sum_a (pi - pi_beta)^2 / pi_beta`` (full support)."""
    p, b = pi.probs, pi_beta_hat.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * p / b, 0.0)
    return terms.sum(axis=1) - 1.0


def _allowed_actions(pi_beta_hat: TabularPolicy, observed: np.ndarray) -> np.ndarray:
    return np.where(observed[:, None], pi_beta_hat.probs > 0, True)


@dataclass
class _ExactSystem:
    """Factorized pieces shared by every iteration of the exact recursion."""

    mdp: FiniteMdp
    pi_beta: TabularPolicy
    lam: float
    alpha: float
    observed: np.ndarray

    def __post_init__(self):
        S, A = self.mdp.num_states, self.mdp.num_actions
        g = self.mdp.gamma
        self.P_beta = self.mdp.sa_transition(self.pi_beta)
        self.B = np.eye(S * A) - g * self.lam * self.P_beta
        self.lu = scipy.linalg.lu_factor(self.B)

    def backup(self, q: np.ndarray, pi: TabularPolicy) -> np.ndarray:
        """One penalized PQL step."""
        mdp = self.mdp
        S, A = mdp.num_states, mdp.num_actions
        rhs = mdp.r + mdp.gamma * (1.0 - self.lam) * (mdp.P @ np.sum(pi.probs * q, axis=1))
        tq = scipy.linalg.lu_solve(self.lu, rhs.ravel()).reshape(S, A)
        return tq - self.alpha * penalty_table(pi, self.pi_beta, self.observed)

    def fixed_point(self, pi: TabularPolicy) -> np.ndarray:
        """Exact fixed point of the penalized recursion for a frozen ``pi``."""
        mdp = self.mdp
        S, A = mdp.num_states, mdp.num_actions
        u = penalty_table(pi, self.pi_beta, self.observed).ravel()
        lhs = self.B - mdp.gamma * (1.0 - self.lam) * mdp.sa_transition(pi)
        rhs = mdp.r.ravel() - self.alpha * (self.B @ u)
        return scipy.linalg.solve(lhs, rhs).reshape(S, A)

    def mixture_values(self, q: np.ndarray, pi: TabularPolicy) -> np.ndarray:
        mix = mixture_policy(self.pi_beta, pi, self.lam)
        return np.sum(mix.probs * q, axis=1)

    def objective(self, pi: TabularPolicy) -> tuple[float, np.ndarray]:
        q = self.fixed_point(pi)
        return float(self.mdp.d0 @ self.mixture_values(q, pi)), q


def _regularized_improvement(x: np.ndarray, b: np.ndarray, alpha: float, allowed: np.ndarray, penalized: np.ndarray):
    """Per-state maximizer of ``sum_a pi_a x_a - alpha sum_a pi_a^2 / b_a`` over the simplex.

    States outside ``penalized`` (or alpha == 0) reduce to the argmax of ``x``.
    """
    S, A = x.shape
    out = np.zeros((S, A))
    for s in range(S):
        acts = np.flatnonzero(allowed[s])
        xs = x[s, acts]
        if alpha == 0.0 or not penalized[s]:
            out[s, acts[np.argmax(xs)]] = 1.0
            continue
        bs = b[s, acts]
        order = np.argsort(-xs, kind="stable")
        xs_o, bs_o = xs[order], bs[order]
        # KKT: pi_a = b_a (x_a - nu)_+ / (2 alpha); pick the active set by water-filling
        nu = None
        for k in range(1, acts.size + 1):
            cand = (np.dot(bs_o[:k], xs_o[:k]) - 2.0 * alpha) / bs_o[:k].sum()
            if xs_o[k - 1] > cand and (k == acts.size or xs_o[k] <= cand):
                nu = cand
                break
        if nu is None:
            nu = (np.dot(bs_o, xs_o) - 2.0 * alpha) / bs_o.sum()
        probs = bs * np.maximum(xs - nu, 0.0) / (2.0 * alpha)
        out[s, acts] = probs / probs.sum()
    return TabularPolicy(out)


def cpql_exact_iterate(
    model,
    pi_beta_hat: TabularPolicy,
    cfg: CpqlConfig,
    observed: np.ndarray | None = None,
    initial_policy: TabularPolicy | None = None,
    tol: float = 1e-12,
    max_iter: int = 100_000,
    eval_mdp: FiniteMdp | None = None,
) -> tuple[np.ndarray, TabularPolicy, TrainTrace]:
    """Alternate the penalized PQL recursion with policy improvement.

    ``model`` is the true MDP or an empirical model.  ``observed`` marks S(D)
    (defaults to the empirical model's observed states, or all states).
    The returned Q is the exact fixed point of the penalized recursion for
    the returned policy, i.e. the iterate re-polished by a direct solve.

    With ``cfg.improvement == "penalized-hill-climb"`` the policy starts at
    ``pi_beta_hat`` and each accepted step strictly increases
    ``E_{d0}[V_hat^{mix}]``; the step is a regularized policy-improvement
    step computed in closed form per state.
    """
    mdp = as_mdp(model)
    if observed is None:
        observed = model.observed_states if isinstance(model, EmpiricalModel) else np.ones(mdp.num_states, bool)
    observed = np.asarray(observed, dtype=bool)
    system = _ExactSystem(mdp, pi_beta_hat, cfg.lam, cfg.alpha, observed)
    allowed = _allowed_actions(pi_beta_hat, observed)
    trace = TrainTrace()

    def record(k, step, q, pi):
        gap = expected_ratio_gap(pi, pi_beta_hat)
        pen = float(np.max(np.where(observed, gap, -np.inf))) if observed.any() else 0.0
        j = expected_return(eval_mdp, mixture_policy(pi_beta_hat, pi, cfg.lam)) if eval_mdp is not None else math.nan
        trace.records.append(TraceRecord(k, float(step), pen, float(np.mean(q[allowed])), j))

    if cfg.improvement == "penalized-hill-climb":
        pi = pi_beta_hat if initial_policy is None else initial_policy
        best, q = system.objective(pi)
        record(0, 0.0, q, pi)
        for k in range(1, max_iter + 1):
            x = mdp.r + mdp.gamma * mdp.P @ system.mixture_values(q, pi)
            cand = _regularized_improvement(x, pi_beta_hat.probs, cfg.alpha, allowed, observed)
            val, q_c = system.objective(cand)
            if not val > best + 1e-13 * max(1.0, abs(best)):
                break
            step = float(np.max(np.abs(q_c - q)))
            pi, q, best = cand, q_c, val
            record(k, step, q, pi)
        trace.q_tables = [q]
        trace.policy = pi
        return q, pi, trace

    pi = pi_beta_hat if initial_policy is None else initial_policy
    q = np.zeros((mdp.num_states, mdp.num_actions))
    g = mdp.gamma
    beta = g * (1 - cfg.lam) / (1 - g * cfg.lam)
    threshold = np.inf if beta == 0 else tol * (1 - beta) / beta
    for k in range(1, max_iter + 1):
        nxt = system.backup(q, pi)
        step = float(np.max(np.abs(nxt - q)))
        q = nxt
        new_pi = _improve(q, cfg, allowed) if cfg.improvement != "none" else pi
        record(k, step, q, new_pi)
        stable = float(np.max(np.abs(new_pi.probs - pi.probs))) <= tol
        pi = new_pi
        if step <= threshold and stable:
            break
    q = system.fixed_point(pi)
    trace.q_tables = [q]
    trace.policy = pi
    return q, pi, trace


def _improve(q: np.ndarray, cfg: CpqlConfig, allowed: np.ndarray) -> TabularPolicy:
    if cfg.improvement == "greedy":
        return greedy_policy(q, allowed=allowed)
    return softmax_policy(q, cfg.temperature, allowed=allowed)


def penalized_residual(model, pi_beta_hat, pi, cfg, q, observed=None) -> float:
    """``||T_lam Q - alpha * penalty - Q||_inf`` for a frozen policy."""
    mdp = as_mdp(model)
    if observed is None:
        observed = model.observed_states if isinstance(model, EmpiricalModel) else np.ones(mdp.num_states, bool)
    system = _ExactSystem(mdp, pi_beta_hat, cfg.lam, cfg.alpha, np.asarray(observed, bool))
    return float(np.max(np.abs(system.backup(q, pi) - q)))


def penalized_objective(model, pi_beta_hat, pi, lam, alpha, observed=None) -> float:
    """``E_{d0}[V_hat^{mix}]`` at the exact fixed point for policy ``pi``."""
    mdp = as_mdp(model)
    if observed is None:
        observed = np.ones(mdp.num_states, bool)
    return _ExactSystem(mdp, pi_beta_hat, lam, alpha, np.asarray(observed, bool)).objective(pi)[0]


# --------------------------------------------------------------------------
# alpha threshold


def alpha_threshold(
    model: EmpiricalModel,
    pi: TabularPolicy,
    lam: float,
    c_r: float,
    c_p: float,
    gamma: float | None = None,
    r_max: float | None = None,
) -> float:
    """Smallest conservatism weight that keeps the estimate pessimistic on S(D).

    Returns ``inf`` when ``pi`` matches the behavior policy at some observed
    state (the bound imposes no finite constraint there) and ``0`` when both
    concentration constants vanish.
    """
    gamma = model.gamma if gamma is None else gamma
    r_max = model.r_max if r_max is None else r_max
    numer = c_r + gamma * c_p * r_max / (1.0 - gamma)
    if numer == 0.0:
        return 0.0
    denom = (1.0 - gamma * lam) * (1.0 - lam) * (1.0 - gamma)
    counts = model.counts[model.counts > 0]
    count_term = float(np.max(1.0 / np.sqrt(counts)))
    gap = expected_ratio_gap(pi, model.behavior_policy)[model.observed_states]
    if np.any(gap <= 0.0):
        return math.inf
    return numer / denom * count_term * float(np.max(1.0 / gap))


# --------------------------------------------------------------------------
# lambda-return targets and the sampled learner


def lambda_return_targets(segment, q_target, pi: TabularPolicy, lam: float, gamma: float) -> np.ndarray:
    """Backward recursion for the uncorrected lambda-return of one segment.

    ``Q^i = r_i + gamma V(s_{i+1}) + gamma lam (Q^{i+1} - V(s_{i+1}))`` with
    ``V(s) = E_{a~pi} q_target(s, a)`` and boundary ``Q^n = V(s_n)``.  When
    ``q_target`` is a sequence of tables the recursion runs per table and
    the pointwise minimum is returned.
    """
    tables = [q_target] if isinstance(q_target, np.ndarray) and q_target.ndim == 2 else list(q_target)
    states = np.asarray(segment.states)
    rewards = np.asarray(segment.rewards, dtype=float)
    n = rewards.size
    outs = []
    for table in tables:
        v = np.sum(pi.probs * table, axis=1)
        out = np.empty(n)
        g = v[states[n]]
        for i in range(n - 1, -1, -1):
            boot = v[states[i + 1]]
            g = rewards[i] + gamma * boot + gamma * lam * (g - boot)
            out[i] = g
        outs.append(out)
    return np.minimum.reduce(outs)


def batch_lambda_returns(batch, v: np.ndarray, lam: float, gamma: float) -> np.ndarray:
    """Vectorized ``Q^0`` for a padded ``SegmentBatch`` given state values ``v``."""
    B, n = batch.actions.shape
    rows = np.arange(B)
    g = v[batch.states[rows, batch.lengths]]
    for i in range(n - 1, -1, -1):
        boot = v[batch.states[:, i + 1]]
        new = batch.rewards[:, i] + gamma * boot + gamma * lam * (g - boot)
        g = np.where(i < batch.lengths, new, g)
    return g


def batch_trace_returns(batch, q: np.ndarray, pi: TabularPolicy, mu: TabularPolicy, lam: float, gamma: float,
                        kind: str) -> np.ndarray:
    """Off-policy corrected segment returns (Retrace or tree-backup traces).

    ``G_i = r_i + gamma V(s_{i+1}) + gamma c_{i+1} (G_{i+1} - Q(s_{i+1}, a_{i+1}))``
    with ``c = lam min(1, pi/mu)`` or ``c = lam pi``; the last step bootstraps on V.
    """
    B, n = batch.actions.shape
    v = np.sum(pi.probs * q, axis=1)
    g = np.zeros(B)
    for i in range(n - 1, -1, -1):
        new = batch.rewards[:, i] + gamma * v[batch.states[:, i + 1]]
        if i + 1 < n:
            s1, a1 = batch.states[:, i + 1], batch.actions[:, i + 1]
            p = pi.probs[s1, a1]
            c = lam * (np.minimum(1.0, p / mu.probs[s1, a1]) if kind == "retrace" else p)
            new = new + np.where(i + 1 < batch.lengths, gamma * c * (g - q[s1, a1]), 0.0)
        g = np.where(i < batch.lengths, new, g)
    return g


class TabularLearner:
    """Mutable state of one sampled training run (tables, targets, RNG)."""

    def __init__(
        self,
        num_states: int,
        num_actions: int,
        gamma: float,
        pi_beta_hat: TabularPolicy,
        cfg: CpqlConfig,
        q_init: Sequence[np.ndarray] | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.cfg = cfg
        self.gamma = gamma
        self.pi_beta_hat = pi_beta_hat
        self.rng = np.random.default_rng(cfg.seed) if rng is None else rng
        n_tables = 2 if cfg.twin_tables else 1
        if q_init is not None:
            self.q = [np.array(t, dtype=float) for t in q_init]
        elif n_tables == 1:
            self.q = [np.zeros((num_states, num_actions))]
        else:
            children = np.random.SeedSequence(cfg.seed).spawn(n_tables)
            self.q = [np.random.default_rng(c).uniform(-1e-3, 1e-3, (num_states, num_actions)) for c in children]
        self.q_target = [t.copy() for t in self.q]
        self.policy = self._policy()

    def _policy(self) -> TabularPolicy:
        q = np.minimum.reduce(self.q)
        if self.cfg.improvement == "greedy":
            return greedy_policy(q)
        return softmax_policy(q, self.cfg.temperature)

    @property
    def q_min(self) -> np.ndarray:
        return np.minimum.reduce(self.q)

    def _targets(self, batch, table: np.ndarray, lam: float) -> np.ndarray:
        kind = self.cfg.returns
        if kind in ("retrace", "treebackup"):
            return batch_trace_returns(batch, table, self.policy, self.pi_beta_hat, lam, self.gamma, kind)
        v = np.sum(self.policy.probs * table, axis=1)
        return batch_lambda_returns(batch, v, 1.0 if kind == "nstep" else lam, self.gamma)

    def probe_average(self, states: np.ndarray, actions: np.ndarray) -> float:
        return float(np.mean(self.q_min[states, actions]))

    def step(self, batch, alpha: float | None = None, lam: float | None = None) -> tuple[float, float, float]:
        """One critic step, target soft update and policy refresh.

        Returns ``(td_loss, penalty, avg_q)`` measured before the update.
        """
        cfg = self.cfg
        alpha = cfg.alpha if alpha is None else alpha
        lam = cfg.lam if lam is None else lam
        B = len(batch)
        s0 = batch.states[:, 0]
        a0 = batch.actions[:, 0]
        targets = [self._targets(batch, t, lam) for t in self.q_target]
        y = np.minimum.reduce(targets)
        avg_q = float(np.mean(self.q_min[s0, a0]))
        td_total = pen_total = 0.0
        for q in self.q:
            td = q[s0, a0] - y
            grad = np.zeros_like(q)
            np.add.at(grad, (s0, a0), td / B)
            td_total += 0.5 * float(np.mean(td * td))
            if alpha > 0.0:
                rows = q[s0]
                pb = self.pi_beta_hat.probs[s0]
                pen_total += alpha * float(np.mean(logsumexp(rows, axis=1) - np.sum(pb * rows, axis=1)))
                np.add.at(grad, s0, alpha * (softmax(rows, axis=1) - pb) / B)
            q -= cfg.lr * grad
        tau = cfg.tau
        for q, tgt in zip(self.q, self.q_target):
            tgt *= 1.0 - tau
            tgt += tau * q
        self.policy = self._policy()
        n = len(self.q)
        return td_total / n, pen_total / n, avg_q


def cpql_sgd_train(
    ds: TrajectoryDataset,
    cfg: CpqlConfig,
    eval_mdp: FiniteMdp | None = None,
    eval_every: int = 0,
    learner: TabularLearner | None = None,
    probe: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainTrace:
    """Sampled tabular CPQL on an offline dataset; deterministic given ``cfg.seed``.

    ``j_eval`` is filled every ``eval_every`` iterations (and at the last one)
    when ``eval_mdp`` is given; otherwise it is NaN.  With a ``probe`` of
    ``(states, actions)`` the recorded ``avg_q`` is the probe average taken
    after the update instead of the training-batch average before it.
    """
    if len(ds) == 0:
        raise InvariantError("cannot train on an empty dataset")
    emp = build_empirical_model(ds)
    if learner is None:
        learner = TabularLearner(emp.num_states, emp.num_actions, ds.meta.gamma, emp.behavior_policy, cfg)
    sampler = SegmentSampler(list(ds.episodes), cfg.segment_len)
    trace = TrainTrace()
    for it in range(cfg.iters):
        batch = sampler.sample(cfg.batch, learner.rng)
        td, pen, avg_q = learner.step(batch)
        if probe is not None:
            avg_q = learner.probe_average(*probe)
        j = math.nan
        if eval_mdp is not None and ((eval_every and (it + 1) % eval_every == 0) or it == cfg.iters - 1):
            j = expected_return(eval_mdp, learner.policy)
        trace.records.append(TraceRecord(it, td, pen, avg_q, j))
    trace.q_tables = [t.copy() for t in learner.q]
    trace.policy = learner.policy
    return trace


def with_overrides(cfg: CpqlConfig, **kw) -> CpqlConfig:
    return replace(cfg, **kw)
