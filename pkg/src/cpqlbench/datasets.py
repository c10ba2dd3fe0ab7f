"""Offline trajectory datasets, empirical models and segment sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from cpqlbench.errors import InvariantError
from cpqlbench.mdp_core import FiniteMdp, TabularPolicy


@dataclass(frozen=True)
class Episode:
    """``states`` has one more entry than ``actions``: the state reached last."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        actions = np.asarray(self.actions, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=float)
        if actions.size == 0:
            raise InvariantError("episodes must contain at least one step")
        if states.size != actions.size + 1 or rewards.size != actions.size:
            raise InvariantError(
                f"episode arrays inconsistent: {states.size} states, {actions.size} actions, {rewards.size} rewards"
            )
        for name, arr in (("states", states), ("actions", actions), ("rewards", rewards)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return int(self.actions.size)


@dataclass(frozen=True)
class DatasetMeta:
    num_states: int
    num_actions: int
    gamma: float
    r_max: float
    mdp_sha256: str = ""
    policy_sha256: str = ""
    seed: int = 0
    horizon: int = 0

    def to_dict(self) -> dict:
        return {
            "mdp_sha256": self.mdp_sha256,
            "policy_sha256": self.policy_sha256,
            "seed": self.seed,
            "horizon": self.horizon,
            "gamma": self.gamma,
            "S": self.num_states,
            "A": self.num_actions,
            "r_max": self.r_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DatasetMeta:
        return cls(
            num_states=int(d["S"]),
            num_actions=int(d["A"]),
            gamma=float(d["gamma"]),
            r_max=float(d["r_max"]),
            mdp_sha256=d.get("mdp_sha256", ""),
            policy_sha256=d.get("policy_sha256", ""),
            seed=int(d.get("seed", 0)),
            horizon=int(d.get("horizon", 0)),
        )


@dataclass(frozen=True)
class TrajectoryDataset:
    episodes: tuple[Episode, ...]
    meta: DatasetMeta

    def __post_init__(self):
        object.__setattr__(self, "episodes", tuple(self.episodes))
        S, A = self.meta.num_states, self.meta.num_actions
        for ep in self.episodes:
            if ep.states.min() < 0 or ep.states.max() >= S:
                raise InvariantError("state index out of range")
            if ep.actions.min() < 0 or ep.actions.max() >= A:
                raise InvariantError("action index out of range")

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def num_steps(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def concat(self, other: TrajectoryDataset) -> TrajectoryDataset:
        return TrajectoryDataset(self.episodes + other.episodes, self.meta)

    def save(self, path) -> None:
        """JSON Lines file plus a ``<stem>.meta.json`` companion."""
        path = Path(path)
        with path.open("w") as fh:
            for ep in self.episodes:
                row = {"states": ep.states.tolist(), "actions": ep.actions.tolist(), "rewards": ep.rewards.tolist()}
                fh.write(json.dumps(row) + "\n")
        meta_path(path).write_text(json.dumps(self.meta.to_dict(), sort_keys=True, indent=2))

    @classmethod
    def load(cls, path) -> TrajectoryDataset:
        path = Path(path)
        meta = DatasetMeta.from_dict(json.loads(meta_path(path).read_text()))
        episodes = []
        with path.open() as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    episodes.append(Episode(row["states"], row["actions"], row["rewards"]))
        return cls(tuple(episodes), meta)


def meta_path(path: Path) -> Path:
    return path.with_name(path.name.split(".")[0] + ".meta.json")


def _sample_rows(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one draw per row of ``cdf``."""
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def collect_trajectories(
    mdp: FiniteMdp,
    pi_beta: TabularPolicy,
    num_episodes: int,
    horizon: int,
    seed: int,
    reward_noise: float = 0.0,
) -> TrajectoryDataset:
    """Roll out ``pi_beta`` in ``mdp``; fully determined by ``seed``.

    ``reward_noise`` adds uniform noise in ``[-reward_noise, reward_noise]`` to
    each observed reward.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    meta = DatasetMeta(
        num_states=mdp.num_states,
        num_actions=mdp.num_actions,
        gamma=mdp.gamma,
        r_max=mdp.r_max + reward_noise,
        mdp_sha256=mdp.sha256(),
        policy_sha256=pi_beta.sha256(),
        seed=int(seed),
        horizon=int(horizon),
    )
    if num_episodes <= 0:
        return TrajectoryDataset((), meta)
    rng = np.random.default_rng(seed)
    E = num_episodes
    pol_cdf = np.cumsum(pi_beta.probs, axis=1)
    trans_cdf = np.cumsum(mdp.P, axis=2)
    states = np.empty((E, horizon + 1), dtype=np.int64)
    actions = np.empty((E, horizon), dtype=np.int64)
    rewards = np.empty((E, horizon))
    states[:, 0] = _sample_rows(np.broadcast_to(np.cumsum(mdp.d0), (E, mdp.num_states)), rng.random(E))
    for t in range(horizon):
        s = states[:, t]
        a = _sample_rows(pol_cdf[s], rng.random(E))
        actions[:, t] = a
        rewards[:, t] = mdp.r[s, a]
        if reward_noise > 0:
            rewards[:, t] += rng.uniform(-reward_noise, reward_noise, size=E)
        states[:, t + 1] = _sample_rows(trans_cdf[s, a], rng.random(E))
    episodes = tuple(Episode(states[e], actions[e], rewards[e]) for e in range(E))
    return TrajectoryDataset(episodes, meta)


@dataclass(frozen=True)
class EmpiricalModel:
    """Maximum-likelihood tabular model of a dataset; no smoothing."""

    counts: np.ndarray
    transition_counts: np.ndarray
    reward_sums: np.ndarray
    start_counts: np.ndarray
    gamma: float
    r_max: float

    @property
    def num_states(self) -> int:
        return self.counts.shape[0]

    @property
    def num_actions(self) -> int:
        return self.counts.shape[1]

    @property
    def state_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def observed_states(self) -> np.ndarray:
        """Boolean mask of ``S(D)``: states where the dataset took an action."""
        return self.state_counts > 0

    @property
    def observed_pairs(self) -> np.ndarray:
        return self.counts > 0

    @cached_property
    def behavior_policy(self) -> TabularPolicy:
        """Count ratios ``N(s,a) / N(s)``; rows of unobserved states are uniform placeholders."""
        n_s = self.state_counts
        probs = np.full(self.counts.shape, 1.0 / self.num_actions)
        seen = n_s > 0
        probs[seen] = self.counts[seen] / n_s[seen, None]
        return TabularPolicy(probs)

    @cached_property
    def P_hat(self) -> np.ndarray:
        """Empirical transitions; unobserved pairs become self-loops."""
        S, A = self.counts.shape
        P = np.zeros((S, A, S))
        seen = self.counts > 0
        P[seen] = self.transition_counts[seen] / self.counts[seen][:, None]
        ss, aa = np.nonzero(~seen)
        P[ss, aa, ss] = 1.0
        return P

    @cached_property
    def r_hat(self) -> np.ndarray:
        """Mean observed reward; zero on unobserved pairs."""
        r = np.zeros(self.counts.shape)
        seen = self.counts > 0
        r[seen] = self.reward_sums[seen] / self.counts[seen]
        return r

    @property
    def d0_hat(self) -> np.ndarray:
        return self.start_counts / self.start_counts.sum()

    def to_mdp(self, d0: np.ndarray | None = None) -> FiniteMdp:
        r_hat = self.r_hat
        r_max = max(self.r_max, float(np.max(np.abs(r_hat))))
        return FiniteMdp(P=self.P_hat, r=r_hat, gamma=self.gamma, d0=self.d0_hat if d0 is None else d0, r_max=r_max)


def build_empirical_model(ds: TrajectoryDataset) -> EmpiricalModel:
    if len(ds) == 0:
        raise InvariantError("cannot build an empirical model from an empty dataset")
    S, A = ds.meta.num_states, ds.meta.num_actions
    s = np.concatenate([ep.states[:-1] for ep in ds.episodes])
    a = np.concatenate([ep.actions for ep in ds.episodes])
    s2 = np.concatenate([ep.states[1:] for ep in ds.episodes])
    rw = np.concatenate([ep.rewards for ep in ds.episodes])
    counts = np.zeros((S, A), dtype=np.int64)
    np.add.at(counts, (s, a), 1)
    trans = np.zeros((S, A, S), dtype=np.int64)
    np.add.at(trans, (s, a, s2), 1)
    rsum = np.zeros((S, A))
    np.add.at(rsum, (s, a), rw)
    starts = np.bincount([ep.states[0] for ep in ds.episodes], minlength=S).astype(np.int64)
    return EmpiricalModel(
        counts=counts,
        transition_counts=trans,
        reward_sums=rsum,
        start_counts=starts,
        gamma=ds.meta.gamma,
        r_max=ds.meta.r_max,
    )


@dataclass(frozen=True)
class Segment:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    truncated: bool = False

    @property
    def length(self) -> int:
        return int(self.actions.size)


@dataclass
class SegmentBatch:
    """Padded batch of segments; entries past ``lengths[b]`` are meaningless."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return self.lengths.size


@dataclass
class SegmentSampler:
    """Uniform sampler over every valid start position of every episode.

    Episodes shorter than ``n`` contribute one truncated segment each when
    ``truncate`` is set and are skipped otherwise.  Segments never cross
    episode boundaries.
    """

    episodes: list
    n: int
    truncate: bool = True
    _states: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("segment length must be >= 1")
        self._rebuild()

    def _rebuild(self):
        eps = list(self.episodes)
        lens = np.array([len(ep) for ep in eps], dtype=np.int64)
        if not eps:
            self._states = np.zeros(0, dtype=np.int64)
            self._actions = np.zeros(0, dtype=np.int64)
            self._rewards = np.zeros(0)
            self._pos_state = self._pos_action = self._pos_len = np.zeros(0, dtype=np.int64)
            return
        self._states = np.concatenate([ep.states for ep in eps])
        self._actions = np.concatenate([ep.actions for ep in eps])
        self._rewards = np.concatenate([ep.rewards for ep in eps])
        a_off = np.concatenate([[0], np.cumsum(lens)[:-1]])
        s_off = a_off + np.arange(len(eps))
        pos_s, pos_a, pos_len = [], [], []
        for L, so, ao in zip(lens, s_off, a_off):
            if L >= self.n:
                k = np.arange(L - self.n + 1)
                pos_s.append(so + k)
                pos_a.append(ao + k)
                pos_len.append(np.full(k.size, self.n))
            elif self.truncate:
                pos_s.append([so])
                pos_a.append([ao])
                pos_len.append([L])
        cat = lambda xs: np.concatenate(xs).astype(np.int64) if xs else np.zeros(0, dtype=np.int64)  # noqa: E731
        self._pos_state, self._pos_action, self._pos_len = cat(pos_s), cat(pos_a), cat(pos_len)

    @property
    def num_positions(self) -> int:
        return int(self._pos_len.size)

    def sample(self, batch: int, rng: np.random.Generator) -> SegmentBatch:
        if self.num_positions == 0:
            raise InvariantError(f"no episode of length >= {self.n} and truncation disabled")
        idx = rng.integers(self.num_positions, size=batch)
        steps = np.arange(self.n)
        lens = self._pos_len[idx]
        valid = steps[None, :] < lens[:, None]
        a_idx = np.where(valid, self._pos_action[idx, None] + steps, self._pos_action[idx, None])
        s_steps = np.minimum(np.arange(self.n + 1)[None, :], lens[:, None])
        s_idx = self._pos_state[idx, None] + s_steps
        return SegmentBatch(
            states=self._states[s_idx],
            actions=self._actions[a_idx],
            rewards=np.where(valid, self._rewards[a_idx], 0.0),
            lengths=lens,
        )


def sample_segments(
    ds: TrajectoryDataset, n: int, batch: int, seed: int, truncate: bool = True
) -> list[Segment]:
    """Draw ``batch`` contiguous length-``n`` slices; deterministic in ``seed``."""
    sampler = SegmentSampler(list(ds.episodes), n, truncate)
    b = sampler.sample(batch, np.random.default_rng(seed))
    out = []
    for i in range(batch):
        L = int(b.lengths[i])
        out.append(
            Segment(
                states=b.states[i, : L + 1].copy(),
                actions=b.actions[i, :L].copy(),
                rewards=b.rewards[i, :L].copy(),
                truncated=L < n,
            )
        )
    return out
