"""Finite MDPs, tabular policies and exact dynamic-programming primitives.

Q-functions are plain ``(S, A)`` float arrays and V-functions ``(S,)`` arrays.
Whenever a state-action vector is flattened, the index of ``(s, a)`` is
``s * A + a``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.linalg

from cpqlbench.errors import ConvergenceError, InvariantError

STOCHASTIC_TOL = 1e-9


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_distribution_rows(rows: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(rows)):
        raise InvariantError(f"{what} contains non-finite entries")
    if np.any(rows < 0.0):
        raise InvariantError(f"{what} has negative entries")
    dev = np.max(np.abs(rows.sum(axis=-1) - 1.0))
    if dev > STOCHASTIC_TOL:
        raise InvariantError(f"{what} rows do not sum to 1 (max deviation {dev:.3e})")


@dataclass(frozen=True)
class TabularPolicy:
    """Row-stochastic ``(S, A)`` table of action probabilities."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise InvariantError(f"policy must be 2-D (S, A), got shape {probs.shape}")
        _check_distribution_rows(probs, "policy")
        object.__setattr__(self, "probs", probs)

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> TabularPolicy:
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> TabularPolicy:
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, num_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    def is_deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.probs.max(axis=1), 1.0, atol=0, rtol=0)))

    def sha256(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.probs).tobytes()).hexdigest()

    def expand(self) -> np.ndarray:
        """``(S, S*A)`` matrix mapping a flat Q vector to ``V(s) = sum_a pi(a|s) Q(s,a)``."""
        S, A = self.probs.shape
        out = np.zeros((S, S * A))
        rows = np.repeat(np.arange(S), A)
        out[rows, np.arange(S * A)] = self.probs.ravel()
        return out


@dataclass(frozen=True)
class FiniteMdp:
    """Known finite MDP ``(S, A, P, r, d0, gamma)`` with declared reward bound."""

    P: np.ndarray
    r: np.ndarray
    gamma: float
    d0: np.ndarray
    r_max: float = field(default=None)

    def __post_init__(self):
        P = _frozen(self.P)
        r = _frozen(self.r)
        d0 = _frozen(self.d0)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise InvariantError(f"P must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if r.shape != (S, A):
            raise InvariantError(f"r must have shape {(S, A)}, got {r.shape}")
        if d0.shape != (S,):
            raise InvariantError(f"d0 must have shape {(S,)}, got {d0.shape}")
        _check_distribution_rows(P, "transition")
        _check_distribution_rows(d0, "d0")
        if not np.all(np.isfinite(r)):
            raise InvariantError("reward contains non-finite entries")
        gamma = float(self.gamma)
        if not 0.0 <= gamma < 1.0:
            raise InvariantError(f"gamma must lie in [0, 1), got {gamma}")
        r_max = float(np.max(np.abs(r))) if self.r_max is None else float(self.r_max)
        if np.max(np.abs(r)) > r_max:
            raise InvariantError(f"|r| exceeds declared r_max={r_max}")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "d0", d0)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "r_max", r_max)

    @property
    def num_states(self) -> int:
        return self.P.shape[0]

    @property
    def num_actions(self) -> int:
        return self.P.shape[1]

    @property
    def value_bound(self) -> float:
        return self.r_max / (1.0 - self.gamma)

    def sa_transition(self, pi: TabularPolicy) -> np.ndarray:
        """``(SA, SA)`` matrix ``P^pi``: ``(s,a) -> (s',a')`` with ``P(s'|s,a) pi(a'|s')``."""
        S, A = self.num_states, self.num_actions
        return self.P.reshape(S * A, S) @ pi.expand()

    def state_chain(self, pi: TabularPolicy) -> np.ndarray:
        """``(S, S)`` state-to-state chain under ``pi``."""
        return np.einsum("sa,sat->st", pi.probs, self.P)

    def to_dict(self) -> dict:
        return {
            "S": self.num_states,
            "A": self.num_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "d0": self.d0.tolist(),
            "r": self.r.tolist(),
            "P": self.P.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> FiniteMdp:
        missing = {"S", "A", "gamma", "r_max", "d0", "r", "P"} - set(data)
        if missing:
            raise InvariantError(f"MDP JSON missing fields: {sorted(missing)}")
        mdp = cls(P=data["P"], r=data["r"], gamma=data["gamma"], d0=data["d0"], r_max=data["r_max"])
        if (mdp.num_states, mdp.num_actions) != (int(data["S"]), int(data["A"])):
            raise InvariantError("declared S/A do not match array shapes")
        return mdp

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> FiniteMdp:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass(frozen=True)
class VisitDist:
    state_probs: np.ndarray
    state_action_probs: np.ndarray | None = None


def two_state_toggle() -> FiniteMdp:
    """States ``{s0, s1}``, actions ``{stay, toggle}``; reward 1 only for staying in s1."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    P[0, 1, 1] = P[1, 1, 0] = 1.0
    r = np.array([[0.0, 0.0], [1.0, 0.0]])
    return FiniteMdp(P=P, r=r, gamma=0.5, d0=np.array([1.0, 0.0]), r_max=1.0)


def _check_pair(mdp: FiniteMdp, pi: TabularPolicy) -> None:
    if pi.probs.shape != (mdp.num_states, mdp.num_actions):
        raise InvariantError(
            f"policy shape {pi.probs.shape} does not match MDP ({mdp.num_states}, {mdp.num_actions})"
        )


def policy_evaluation_exact(mdp: FiniteMdp, pi: TabularPolicy) -> np.ndarray:
    """Solve ``Q = r + gamma P^pi Q`` by LU factorization."""
    _check_pair(mdp, pi)
    S, A = mdp.num_states, mdp.num_actions
    M = np.eye(S * A) - mdp.gamma * mdp.sa_transition(pi)
    try:
        q = scipy.linalg.solve(M, mdp.r.ravel())
    except scipy.linalg.LinAlgError as exc:
        raise InvariantError("singular policy-evaluation system") from exc
    return q.reshape(S, A)


def state_values(q: np.ndarray, pi: TabularPolicy) -> np.ndarray:
    return np.sum(pi.probs * q, axis=1)


def bellman_optimality(mdp: FiniteMdp, q: np.ndarray) -> np.ndarray:
    return mdp.r + mdp.gamma * mdp.P @ q.max(axis=1)


def value_iteration(
    mdp: FiniteMdp, tol: float = 1e-10, max_iter: int = 1_000_000
) -> tuple[np.ndarray, TabularPolicy]:
    """Iterate ``T*`` until ``||T*Q - Q||_inf <= tol``; return Q and its greedy policy."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.num_states, mdp.num_actions))
    for _ in range(max_iter):
        nxt = bellman_optimality(mdp, q)
        if np.max(np.abs(nxt - q)) <= tol:
            # one more backup keeps the returned Q consistent with the residual test
            return nxt, greedy_policy(nxt)
        q = nxt
    raise ConvergenceError(f"value iteration did not reach tol={tol} in {max_iter} iterations")


def optimal_policy(mdp: FiniteMdp) -> TabularPolicy:
    """Optimal deterministic policy by policy iteration seeded from value iteration."""
    _, pi = value_iteration(mdp, tol=1e-8)
    for _ in range(1000):
        q = policy_evaluation_exact(mdp, pi)
        improved = greedy_policy(q)
        # keep the current action where it is still (numerically) optimal
        cur = pi.probs.argmax(axis=1)
        idx = np.arange(mdp.num_states)
        keep = q[idx, cur] >= q.max(axis=1) - 1e-12
        actions = np.where(keep, cur, improved.probs.argmax(axis=1))
        if np.array_equal(actions, cur):
            return pi
        pi = TabularPolicy.deterministic(actions, mdp.num_actions)
    raise ConvergenceError("policy iteration did not stabilize")


def greedy_policy(
    q: np.ndarray,
    tie_break: Literal["lowest-index", "uniform"] = "lowest-index",
    allowed: np.ndarray | None = None,
) -> TabularPolicy:
    """Deterministic argmax policy of ``q``.

    ``allowed`` optionally masks actions per state; states with no allowed
    action fall back to all actions.
    """
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise InvariantError("q must be finite")
    masked = q
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        allowed = np.where(allowed.any(axis=1, keepdims=True), allowed, True)
        masked = np.where(allowed, q, -np.inf)
    best = masked.max(axis=1, keepdims=True)
    if tie_break == "lowest-index":
        probs = np.zeros_like(q)
        probs[np.arange(q.shape[0]), masked.argmax(axis=1)] = 1.0
    elif tie_break == "uniform":
        ties = masked == best
        probs = ties / ties.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown tie_break rule {tie_break!r}")
    return TabularPolicy(probs)


def softmax_policy(q: np.ndarray, temperature: float, allowed: np.ndarray | None = None) -> TabularPolicy:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(q, dtype=float) / temperature
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        allowed = np.where(allowed.any(axis=1, keepdims=True), allowed, True)
        z = np.where(allowed, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    return TabularPolicy(w / w.sum(axis=1, keepdims=True))


def mixture_policy(pi_beta: TabularPolicy, pi: TabularPolicy, lam: float) -> TabularPolicy:
    """Row-wise ``lam * pi_beta + (1 - lam) * pi``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixture weight must lie in [0, 1], got {lam}")
    if pi_beta.probs.shape != pi.probs.shape:
        raise InvariantError("policies have different shapes")
    if lam == 0.0:
        return pi
    if lam == 1.0:
        return pi_beta
    return TabularPolicy(lam * pi_beta.probs + (1.0 - lam) * pi.probs)


def visitation_distribution(mdp: FiniteMdp, pi: TabularPolicy) -> VisitDist:
    """Normalized discounted occupancy ``(1-gamma) (I - gamma P_pi^T)^-1 d0``."""
    _check_pair(mdp, pi)
    S = mdp.num_states
    chain = mdp.state_chain(pi)
    d = scipy.linalg.solve(np.eye(S) - mdp.gamma * chain.T, (1.0 - mdp.gamma) * mdp.d0)
    # exact zeros stay zero; tiny negative round-off is clipped
    d = np.clip(d, 0.0, None)
    return VisitDist(state_probs=d, state_action_probs=d[:, None] * pi.probs)


def expected_return(mdp: FiniteMdp, pi: TabularPolicy, check_tol: float = 1e-8) -> float:
    """``J(pi) = E_{d0}[V^pi]``, cross-checked against the occupancy form."""
    q = policy_evaluation_exact(mdp, pi)
    j = float(mdp.d0 @ state_values(q, pi))
    occ = visitation_distribution(mdp, pi).state_action_probs
    j_occ = float(np.sum(occ * mdp.r)) / (1.0 - mdp.gamma)
    if abs(j - j_occ) > check_tol:
        raise RuntimeError(f"return identity violated: {j} vs {j_occ}")
    return j


def total_variation(pi1: TabularPolicy, pi2: TabularPolicy) -> np.ndarray:
    if pi1.probs.shape != pi2.probs.shape:
        raise InvariantError(f"shape mismatch {pi1.probs.shape} vs {pi2.probs.shape}")
    return 0.5 * np.abs(pi1.probs - pi2.probs).sum(axis=1)


def random_mdp(
    num_states: int,
    num_actions: int,
    gamma: float,
    rng: np.random.Generator,
    branching: int | None = None,
) -> FiniteMdp:
    """Dense random MDP with rewards in [0, 1] and a random initial distribution."""
    S, A = num_states, num_actions
    k = S if branching is None else min(branching, S)
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            succ = rng.choice(S, size=k, replace=False)
            P[s, a, succ] = rng.dirichlet(np.ones(k))
    P /= P.sum(axis=2, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=(S, A))
    d0 = rng.dirichlet(np.ones(S))
    return FiniteMdp(P=P, r=r, gamma=gamma, d0=d0, r_max=1.0)


def random_policy(num_states: int, num_actions: int, rng: np.random.Generator, floor: float = 0.0) -> TabularPolicy:
    """Random full-support policy when ``floor > 0``; Dirichlet(1) rows otherwise."""
    probs = rng.dirichlet(np.ones(num_actions), size=num_states)
    if floor > 0:
        probs = (probs + floor) / (1.0 + num_actions * floor)
    return TabularPolicy(probs)


def horizon_for(gamma: float, eps: float = 1e-10) -> int:
    """Smallest T with ``gamma^T <= eps``."""
    if gamma == 0.0:
        return 1
    return int(math.ceil(math.log(eps) / math.log(gamma)))
