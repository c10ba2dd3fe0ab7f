"""Off-policy backup operators and a traced fixed-point solver.

Every operator here except the optimality backup is affine in ``Q``:
``O(Q) = b + L(Q)``.  ``BackupOperator.linear`` applies only ``L``, which lets
contraction checks propagate an error vector without the cancellation that
comes from subtracting two nearly equal iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.linalg

from cpqlbench.errors import InvariantError, SupportViolation
from cpqlbench.mdp_core import FiniteMdp, TabularPolicy, mixture_policy, policy_evaluation_exact

Kind = Literal["bellman", "bellman_optimal", "pql", "nstep", "retrace", "treebackup", "mixture"]
KINDS = ("bellman", "bellman_optimal", "pql", "nstep", "retrace", "treebackup", "mixture")


def as_mdp(model) -> FiniteMdp:
    """Accept a FiniteMdp or anything with ``to_mdp()`` (the empirical model)."""
    if isinstance(model, FiniteMdp):
        return model
    to_mdp = getattr(model, "to_mdp", None)
    if to_mdp is None:
        raise TypeError(f"expected a FiniteMdp or EmpiricalModel, got {type(model).__name__}")
    return to_mdp()


def _check_lambda(lam: float, closed: bool = False) -> None:
    hi_ok = lam <= 1.0 if closed else lam < 1.0
    if not (0.0 <= lam and hi_ok):
        bound = "[0, 1]" if closed else "[0, 1)"
        raise ValueError(f"lambda must lie in {bound}, got {lam}")


def _bellman(mdp: FiniteMdp, pi: TabularPolicy, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    v = np.sum(pi.probs * q, axis=1)
    return r + mdp.gamma * mdp.P @ v


def bellman_backup(model, pi: TabularPolicy, q) -> np.ndarray:
    """``T^pi Q = r + gamma P^pi Q``."""
    mdp = as_mdp(model)
    return _bellman(mdp, pi, np.asarray(q, dtype=float), mdp.r)


def _pql(mdp, pi_beta, pi, lam, q, r):
    S, A = mdp.num_states, mdp.num_actions
    rhs = r + mdp.gamma * (1.0 - lam) * (mdp.P @ np.sum(pi.probs * q, axis=1))
    if lam == 0.0:
        return rhs
    lhs = np.eye(S * A) - mdp.gamma * lam * mdp.sa_transition(pi_beta)
    return scipy.linalg.solve(lhs, rhs.ravel()).reshape(S, A)


def pql_backup_closed_form(model, pi_beta: TabularPolicy, pi: TabularPolicy, lam: float, q) -> np.ndarray:
    """``(I - gamma lam P^{pi_beta})^-1 (r + gamma (1-lam) P^pi Q)``."""
    _check_lambda(lam)
    mdp = as_mdp(model)
    return _pql(mdp, pi_beta, pi, lam, np.asarray(q, dtype=float), mdp.r)


def pql_backup_series(
    model, pi_beta: TabularPolicy, pi: TabularPolicy, lam: float, q, n_max: int
) -> tuple[np.ndarray, float]:
    """Truncated geometric mixture of uncorrected n-step backups.

    Returns the partial sum over ``n = 1..n_max`` and a bound on the omitted
    tail, ``2 lam^n_max (||q|| + R_max / (1-gamma))``.
    """
    _check_lambda(lam)
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    mdp = as_mdp(model)
    term = _bellman(mdp, pi, np.asarray(q, dtype=float), mdp.r)
    total = (1.0 - lam) * term
    weight = 1.0 - lam
    for _ in range(1, n_max):
        weight *= lam
        if weight == 0.0:
            break
        term = _bellman(mdp, pi_beta, term, mdp.r)
        total = total + weight * term
    tail = 2.0 * lam**n_max * (np.max(np.abs(q)) + mdp.value_bound)
    return total, float(tail)


def nstep_backup(model, pi_beta: TabularPolicy, pi: TabularPolicy, n: int, q) -> np.ndarray:
    """``(T^{pi_beta})^{n-1} T^pi Q``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mdp = as_mdp(model)
    out = _bellman(mdp, pi, np.asarray(q, dtype=float), mdp.r)
    for _ in range(n - 1):
        out = _bellman(mdp, pi_beta, out, mdp.r)
    return out


def _trace_weights(kind: str, pi_beta: TabularPolicy, pi: TabularPolicy, lam: float) -> np.ndarray:
    """Per-(s,a) product ``mu(a|s) c(s,a)`` of the expected trace operator."""
    mu, p = pi_beta.probs, pi.probs
    if kind == "retrace":
        bad = (p > 0) & (mu == 0)
        if np.any(bad):
            s, a = np.argwhere(bad)[0]
            raise SupportViolation(f"support violation: pi({a}|{s}) > 0 but pi_beta({a}|{s}) = 0")
        # mu * lam * min(1, pi/mu) == lam * min(mu, pi)
        return lam * np.minimum(mu, p)
    return lam * mu * p


def _trace_backup(mdp, pi_beta, pi, lam, q, r, kind):
    S, A = mdp.num_states, mdp.num_actions
    w = _trace_weights(kind, pi_beta, pi, lam)
    target = _bellman(mdp, pi, q, r)
    if lam == 0.0:
        return target
    expand = np.zeros((S, S * A))
    expand[np.repeat(np.arange(S), A), np.arange(S * A)] = w.ravel()
    chain = mdp.P.reshape(S * A, S) @ expand
    delta = (target - q).ravel()
    return q + scipy.linalg.solve(np.eye(S * A) - mdp.gamma * chain, delta).reshape(S, A)


def retrace_backup(model, pi_beta: TabularPolicy, pi: TabularPolicy, lam: float, q) -> np.ndarray:
    """Expected Retrace backup with traces ``lam * min(1, pi/pi_beta)``."""
    _check_lambda(lam, closed=True)
    mdp = as_mdp(model)
    return _trace_backup(mdp, pi_beta, pi, lam, np.asarray(q, dtype=float), mdp.r, "retrace")


def treebackup_backup(model, pi_beta: TabularPolicy, pi: TabularPolicy, lam: float, q) -> np.ndarray:
    """Expected Tree-backup with traces ``lam * pi(a|s)``."""
    _check_lambda(lam, closed=True)
    mdp = as_mdp(model)
    return _trace_backup(mdp, pi_beta, pi, lam, np.asarray(q, dtype=float), mdp.r, "treebackup")


def mixture_backup(model, pi_beta: TabularPolicy, pi: TabularPolicy, lam: float, q) -> np.ndarray:
    """``lam T^{pi_beta} Q + (1-lam) T^pi Q``."""
    _check_lambda(lam, closed=True)
    mdp = as_mdp(model)
    q = np.asarray(q, dtype=float)
    return lam * _bellman(mdp, pi_beta, q, mdp.r) + (1.0 - lam) * _bellman(mdp, pi, q, mdp.r)


@dataclass(frozen=True)
class BackupOperator:
    kind: str
    model: FiniteMdp
    pi: TabularPolicy | None = None
    pi_beta: TabularPolicy | None = None
    lam: float = 0.0
    n: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvariantError(f"unknown operator kind {self.kind!r}")
        object.__setattr__(self, "model", as_mdp(self.model))
        if self.kind != "bellman_optimal" and self.pi is None:
            raise InvariantError(f"{self.kind} needs a target policy")
        if self.kind in ("pql", "nstep", "retrace", "treebackup", "mixture") and self.pi_beta is None:
            raise InvariantError(f"{self.kind} needs a behavior policy")
        if self.kind in ("retrace", "treebackup"):
            _trace_weights(self.kind, self.pi_beta, self.pi, self.lam)
        if self.kind == "pql":
            _check_lambda(self.lam)
        elif self.kind in ("retrace", "treebackup", "mixture"):
            _check_lambda(self.lam, closed=True)
        if self.n < 1:
            raise InvariantError("n must be >= 1")
        object.__setattr__(self, "_lu", None)

    def _factor(self):
        """LU of the matrix inverted by the PQL and trace backups, built once."""
        if self._lu is None:
            mdp = self.model
            S, A = mdp.num_states, mdp.num_actions
            if self.kind == "pql":
                chain = self.lam * mdp.sa_transition(self.pi_beta)
            else:
                w = _trace_weights(self.kind, self.pi_beta, self.pi, self.lam)
                expand = np.zeros((S, S * A))
                expand[np.repeat(np.arange(S), A), np.arange(S * A)] = w.ravel()
                chain = mdp.P.reshape(S * A, S) @ expand
            object.__setattr__(self, "_lu", scipy.linalg.lu_factor(np.eye(S * A) - mdp.gamma * chain))
        return self._lu

    @classmethod
    def bellman(cls, model, pi):
        return cls("bellman", model, pi=pi)

    @classmethod
    def bellman_optimal(cls, model):
        return cls("bellman_optimal", model)

    @classmethod
    def pql(cls, model, pi_beta, pi, lam):
        return cls("pql", model, pi=pi, pi_beta=pi_beta, lam=lam)

    @classmethod
    def nstep(cls, model, pi_beta, pi, n):
        return cls("nstep", model, pi=pi, pi_beta=pi_beta, n=n)

    @classmethod
    def retrace(cls, model, pi_beta, pi, lam):
        return cls("retrace", model, pi=pi, pi_beta=pi_beta, lam=lam)

    @classmethod
    def treebackup(cls, model, pi_beta, pi, lam):
        return cls("treebackup", model, pi=pi, pi_beta=pi_beta, lam=lam)

    @classmethod
    def mixture(cls, model, pi_beta, pi, lam):
        return cls("mixture", model, pi=pi, pi_beta=pi_beta, lam=lam)

    @property
    def modulus(self) -> float:
        """Contraction modulus used by the stopping rule."""
        g = self.model.gamma
        if self.kind == "pql":
            return g * (1.0 - self.lam) / (1.0 - g * self.lam)
        if self.kind == "nstep":
            return g**self.n
        return g

    def _apply(self, q, r):
        mdp = self.model
        if self.kind == "bellman":
            return _bellman(mdp, self.pi, q, r)
        if self.kind == "bellman_optimal":
            return r + mdp.gamma * mdp.P @ q.max(axis=1)
        if self.kind == "pql":
            if self.lam == 0.0:
                return _pql(mdp, self.pi_beta, self.pi, 0.0, q, r)
            rhs = r + mdp.gamma * (1.0 - self.lam) * (mdp.P @ np.sum(self.pi.probs * q, axis=1))
            return scipy.linalg.lu_solve(self._factor(), rhs.ravel()).reshape(q.shape)
        if self.kind == "nstep":
            out = _bellman(mdp, self.pi, q, r)
            for _ in range(self.n - 1):
                out = _bellman(mdp, self.pi_beta, out, r)
            return out
        if self.kind in ("retrace", "treebackup"):
            target = _bellman(mdp, self.pi, q, r)
            if self.lam == 0.0:
                return target
            return q + scipy.linalg.lu_solve(self._factor(), (target - q).ravel()).reshape(q.shape)
        return self.lam * _bellman(mdp, self.pi_beta, q, r) + (1.0 - self.lam) * _bellman(mdp, self.pi, q, r)

    def apply(self, q) -> np.ndarray:
        return self._apply(np.asarray(q, dtype=float), self.model.r)

    def linear(self, dq) -> np.ndarray:
        """Homogeneous part ``L(dq) = O(dq) - O(0)`` of an affine operator."""
        if self.kind == "bellman_optimal":
            raise InvariantError("the optimality backup is not affine")
        return self._apply(np.asarray(dq, dtype=float), np.zeros_like(self.model.r))

    def fixed_point(self) -> np.ndarray:
        """Exact fixed point by a direct solve (policy iteration for the optimality backup)."""
        mdp = self.model
        if self.kind == "bellman":
            return policy_evaluation_exact(mdp, self.pi)
        if self.kind == "mixture":
            return policy_evaluation_exact(mdp, mixture_policy(self.pi_beta, self.pi, self.lam))
        if self.kind == "pql":
            # multiply Q = (I - g lam P_b)^-1 (r + g (1-lam) P_pi Q) through by (I - g lam P_b)
            S, A = mdp.num_states, mdp.num_actions
            g, lam = mdp.gamma, self.lam
            lhs = np.eye(S * A) - g * lam * mdp.sa_transition(self.pi_beta) - g * (1 - lam) * mdp.sa_transition(self.pi)
            return scipy.linalg.solve(lhs, mdp.r.ravel()).reshape(S, A)
        if self.kind == "bellman_optimal":
            from cpqlbench.mdp_core import optimal_policy

            return policy_evaluation_exact(mdp, optimal_policy(mdp))
        S, A = mdp.num_states, mdp.num_actions
        b = self._apply(np.zeros((S, A)), mdp.r).ravel()
        basis = np.eye(S * A)
        cols = [self.linear(basis[i].reshape(S, A)).ravel() for i in range(S * A)]
        M = np.column_stack(cols)
        return scipy.linalg.solve(np.eye(S * A) - M, b).reshape(S, A)


@dataclass
class FixedPointTrace:
    q_final: np.ndarray
    errors: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    reference: np.ndarray | None = None

    def rows(self):
        return [(k, e) for k, e in enumerate(self.errors)]


def solve_fixed_point(op: BackupOperator, q0=None, tol: float = 1e-10, max_iter: int = 100_000) -> FixedPointTrace:
    """Iterate ``Q_{k+1} = O(Q_k)``, recording ``||Q_k - Q_fp||_inf`` per step.

    Stops once ``||Q_{k+1} - Q_k|| <= tol (1 - m) / m`` for the operator's
    modulus ``m``, which bounds the distance to the fixed point by ``tol``.
    Non-convergence is reported through ``converged=False``.
    """
    S, A = op.model.num_states, op.model.num_actions
    q = np.zeros((S, A)) if q0 is None else np.array(q0, dtype=float)
    ref = op.fixed_point()
    m = op.modulus
    threshold = np.inf if m == 0.0 else tol * (1.0 - m) / m
    errors = [float(np.max(np.abs(q - ref)))]
    converged = False
    k = 0
    while k < max_iter:
        nxt = op.apply(q)
        k += 1
        step = float(np.max(np.abs(nxt - q)))
        q = nxt
        errors.append(float(np.max(np.abs(q - ref))))
        if step <= threshold:
            converged = True
            break
    return FixedPointTrace(q_final=q, errors=errors, iterations=k, converged=converged, reference=ref)


def propagate_error(op: BackupOperator, e0: np.ndarray, iters: int) -> list[float]:
    """``||L^k e0||_inf`` for ``k = 0..iters`` using the operator's linear part."""
    e = np.asarray(e0, dtype=float)
    out = [float(np.max(np.abs(e)))]
    for _ in range(iters):
        e = op.linear(e)
        out.append(float(np.max(np.abs(e))))
    return out
