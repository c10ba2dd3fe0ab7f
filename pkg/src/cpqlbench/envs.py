"""Seeded benchmark MDPs, dataset recipes and the normalized score."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from cpqlbench.datasets import TrajectoryDataset, collect_trajectories
from cpqlbench.mdp_core import (
    FiniteMdp,
    TabularPolicy,
    expected_return,
    greedy_policy,
    optimal_policy,
    policy_evaluation_exact,
    softmax_policy,
    two_state_toggle,
)

log = logging.getLogger(__name__)

ENV_KINDS = ("chain", "gridworld", "random", "two_state_toggle")
QUALITIES = ("random", "medium", "expert")

# gridworld action order
UP, DOWN, LEFT, RIGHT = range(4)
_MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0)}


@dataclass(frozen=True)
class EnvSpec:
    """Parameters of a generated MDP; only the fields of ``kind`` are read.

    Chain actions are ``0 = left`` and ``1 = right``.  ``goal < 0`` places the
    gridworld goal in the last cell.
    """

    kind: str = "chain"
    gamma: float = 0.99
    seed: int = 0
    length: int = 10
    slip: float = 0.1
    width: int = 4
    height: int = 4
    goal: int = -1
    step_cost: float = 0.0
    num_states: int = 8
    num_actions: int = 3
    branching: int = 3
    reward_sparsity: float = 0.5

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"kind: unknown env kind {self.kind!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma: must lie in [0, 1)")
        if not 0.0 <= self.slip < 1.0:
            raise ValueError("slip: must lie in [0, 1)")
        checks = {
            "chain": ("length",),
            "gridworld": ("width", "height"),
            "random": ("num_states", "num_actions", "branching"),
        }.get(self.kind, ())
        for name in checks:
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be positive")
        if self.kind == "chain" and self.length < 2:
            raise ValueError("length: chain needs at least 2 states")
        if self.kind == "gridworld":
            if self.step_cost < 0:
                raise ValueError("step_cost: must be non-negative")
            if self.goal >= self.width * self.height:
                raise ValueError("goal: outside the grid")
        if self.kind == "random":
            if self.branching > self.num_states:
                raise ValueError("branching: exceeds num_states")
            if not 0.0 <= self.reward_sparsity < 1.0:
                raise ValueError("reward_sparsity: must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> EnvSpec:
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ValueError(f"{key}: unknown env field")
        return cls(**d)


def _chain(spec: EnvSpec) -> FiniteMdp:
    L, p = spec.length, spec.slip
    P = np.zeros((L, 2, L))
    for s in range(L):
        left, right = max(s - 1, 0), min(s + 1, L - 1)
        P[s, 0, left] += 1.0 - p
        P[s, 0, right] += p
        P[s, 1, right] += 1.0 - p
        P[s, 1, left] += p
    r = np.zeros((L, 2))
    r[L - 1, 1] = 1.0
    d0 = np.zeros(L)
    d0[0] = 1.0
    return FiniteMdp(P=P, r=r, gamma=spec.gamma, d0=d0, r_max=1.0)


def _gridworld(spec: EnvSpec) -> FiniteMdp:
    w, h = spec.width, spec.height
    S = w * h
    goal = S - 1 if spec.goal < 0 else spec.goal
    P = np.zeros((S, 4, S))

    def target(s, move):
        x, y = s % w, s // w
        dx, dy = _MOVES[move]
        nx, ny = min(max(x + dx, 0), w - 1), min(max(y + dy, 0), h - 1)
        return ny * w + nx

    for s in range(S):
        for a in range(4):
            if s == goal:
                P[s, a, s] = 1.0
                continue
            P[s, a, target(s, a)] += 1.0 - spec.slip
            for m in range(4):
                P[s, a, target(s, m)] += spec.slip / 4
    r = np.full((S, 4), -spec.step_cost)
    r[goal] = 1.0
    d0 = np.zeros(S)
    d0[0 if goal != 0 else S - 1] = 1.0
    return FiniteMdp(P=P, r=r, gamma=spec.gamma, d0=d0, r_max=max(1.0, spec.step_cost))


def _random(spec: EnvSpec) -> FiniteMdp:
    rng = np.random.default_rng(spec.seed)
    S, A, k = spec.num_states, spec.num_actions, spec.branching
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            succ = rng.choice(S, size=k, replace=False)
            P[s, a, succ] = rng.dirichlet(np.ones(k))
    r = rng.uniform(0.0, 1.0, (S, A)) * (rng.uniform(size=(S, A)) >= spec.reward_sparsity)
    return FiniteMdp(P=P, r=r, gamma=spec.gamma, d0=np.full(S, 1.0 / S), r_max=1.0)


def make_env(spec: EnvSpec) -> FiniteMdp:
    if spec.kind == "chain":
        return _chain(spec)
    if spec.kind == "gridworld":
        return _gridworld(spec)
    if spec.kind == "random":
        return _random(spec)
    return two_state_toggle()


# --------------------------------------------------------------------------
# dataset recipes


@dataclass(frozen=True)
class MediumCalibration:
    policy: TabularPolicy
    temperature: float
    j_target: float
    j_medium: float
    converged: bool


def calibrate_medium(mdp: FiniteMdp, rel_tol: float = 0.1, max_steps: int = 100) -> MediumCalibration:
    """Softmax over ``Q*`` whose return is the expert/uniform midpoint.

    Bisection runs on ``log(temperature)``; the tolerance is relative to the
    expert-uniform return gap.  On failure a temperature equal to the ``Q*``
    action-gap scale is used and ``converged`` is False.
    """
    S, A = mdp.num_states, mdp.num_actions
    q_star = policy_evaluation_exact(mdp, optimal_policy(mdp))
    j_exp = expected_return(mdp, greedy_policy(q_star))
    j_uni = expected_return(mdp, TabularPolicy.uniform(S, A))
    target = 0.5 * (j_exp + j_uni)
    span = j_exp - j_uni
    scale = float(np.ptp(q_star, axis=1).max()) or 1.0
    if span <= 1e-12:
        pol = softmax_policy(q_star, scale)
        return MediumCalibration(pol, scale, target, expected_return(mdp, pol), True)
    lo, hi = math.log(scale) - 12.0, math.log(scale) + 12.0  # low temperature ~ expert, high ~ uniform
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        pol = softmax_policy(q_star, math.exp(mid))
        j = expected_return(mdp, pol)
        if abs(j - target) <= rel_tol * span:
            return MediumCalibration(pol, math.exp(mid), target, j, True)
        if j > target:
            lo = mid
        else:
            hi = mid
    log.warning("medium calibration did not converge; falling back to temperature %g", scale)
    pol = softmax_policy(q_star, scale)
    return MediumCalibration(pol, scale, target, expected_return(mdp, pol), False)


def quality_policy(mdp: FiniteMdp, quality: str) -> TabularPolicy:
    if quality == "random":
        return TabularPolicy.uniform(mdp.num_states, mdp.num_actions)
    if quality == "expert":
        return greedy_policy(policy_evaluation_exact(mdp, optimal_policy(mdp)))
    if quality == "medium":
        return calibrate_medium(mdp).policy
    raise ValueError(f"quality: unknown dataset quality {quality!r}")


def mixed_counts(size: int, ratios: Mapping[str, float]) -> dict[str, int]:
    """Split ``size`` episodes by ``ratios`` (largest remainder, ties by key order)."""
    if not ratios or any(v < 0 for v in ratios.values()) or sum(ratios.values()) <= 0:
        raise ValueError("ratios: need non-negative weights with a positive sum")
    total = float(sum(ratios.values()))
    exact = {k: size * v / total for k, v in ratios.items()}
    counts = {k: int(math.floor(x)) for k, x in exact.items()}
    rest = size - sum(counts.values())
    order = sorted(ratios, key=lambda k: -(exact[k] - counts[k]))
    for k in order[:rest]:
        counts[k] += 1
    return counts


def dataset_recipe(
    mdp: FiniteMdp,
    quality: str | Mapping[str, float],
    size: int,
    seed: int,
    horizon: int = 50,
) -> TrajectoryDataset:
    """``size`` episodes of length ``horizon``; a mapping of qualities gives a mixed dataset.

    Parts of a mixed dataset are collected with child seeds and concatenated
    in the mapping's order.
    """
    if isinstance(quality, str):
        return collect_trajectories(mdp, quality_policy(mdp, quality), size, horizon, seed)
    counts = mixed_counts(size, quality)
    children = np.random.SeedSequence(seed).spawn(len(counts))
    out = None
    for (q, n), child in zip(counts.items(), children):
        part = collect_trajectories(mdp, quality_policy(mdp, q), n, horizon, int(child.generate_state(1)[0]))
        out = part if out is None else out.concat(part)
    return out


# --------------------------------------------------------------------------
# normalized score


@dataclass(frozen=True)
class ScoreRef:
    ref_min: float
    ref_max: float

    def __post_init__(self):
        if not self.ref_max > self.ref_min:
            raise ValueError("ref_max must exceed ref_min")


HOPPER = ScoreRef(-20.27, 3234.3)


def normalized_score(raw_return: float, ref: ScoreRef) -> float:
    return 100.0 * (raw_return - ref.ref_min) / (ref.ref_max - ref.ref_min)


def env_score_ref(mdp: FiniteMdp) -> ScoreRef:
    """Uniform-policy and optimal returns as the score's zero and hundred."""
    lo = expected_return(mdp, TabularPolicy.uniform(mdp.num_states, mdp.num_actions))
    hi = expected_return(mdp, optimal_policy(mdp))
    if hi <= lo:
        hi = lo + 1.0
    return ScoreRef(lo, hi)
