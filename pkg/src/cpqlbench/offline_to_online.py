"""CPQL pretraining followed by online vanilla PQL in the true MDP."""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from cpqlbench.cpql import CpqlConfig, TabularLearner, cpql_sgd_train
from cpqlbench.datasets import Episode, SegmentSampler, TrajectoryDataset, build_empirical_model
from cpqlbench.errors import InvariantError
from cpqlbench.mdp_core import FiniteMdp, expected_return, greedy_policy

EXPLORATIONS = ("epsilon-greedy", "softmax")
BASELINES = ("cql_to_qlearning", "cpql_to_pql")


@dataclass(frozen=True)
class O2oConfig:
    """``exploration_param`` is epsilon or the softmax temperature.

    ``replay_capacity`` counts online episodes of length ``horizon``.
    """

    offline: CpqlConfig = field(default_factory=CpqlConfig)
    online_steps: int = 1000
    exploration: str = "epsilon-greedy"
    exploration_param: float = 0.1
    replay_capacity: int = 50
    segment_len: int = 5
    eval_every: int = 100
    horizon: int = 20
    probe_size: int = 256
    retain_offline: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.exploration not in EXPLORATIONS:
            raise InvariantError(f"exploration must be one of {EXPLORATIONS}")
        if self.exploration == "epsilon-greedy" and not 0.0 <= self.exploration_param <= 1.0:
            raise InvariantError("epsilon must lie in [0, 1]")
        if self.exploration == "softmax" and not self.exploration_param > 0:
            raise InvariantError("softmax temperature must be positive")
        if min(self.online_steps, self.eval_every) < 0 or min(self.replay_capacity, self.segment_len,
                                                              self.horizon, self.probe_size) < 1:
            raise InvariantError("online counts must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["offline"] = self.offline.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> O2oConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvariantError(f"unknown o2o config field(s): {sorted(unknown)}")
        if "offline" in d:
            d["offline"] = CpqlConfig.from_dict(d["offline"])
        return cls(**d)


@dataclass(frozen=True)
class O2oRecord:
    phase: str
    step: int
    avg_q: float
    j_eval: float
    episodes_completed: int = 0


@dataclass
class O2oTrace:
    records: list[O2oRecord] = field(default_factory=list)
    transition_index: int = 0
    replay_tags: tuple[str, ...] = ()

    @property
    def offline(self) -> list[O2oRecord]:
        return self.records[: self.transition_index]

    @property
    def online(self) -> list[O2oRecord]:
        return self.records[self.transition_index :]

    @property
    def final_j(self) -> float:
        return next(r.j_eval for r in reversed(self.records) if not math.isnan(r.j_eval))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "step", "avg_q", "j_eval"])
        for r in self.records:
            w.writerow([r.phase, r.step, repr(r.avg_q), repr(r.j_eval)])
        return buf.getvalue()


def sample_probe(ds: TrajectoryDataset, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = np.concatenate([ep.states[:-1] for ep in ds.episodes])
    a = np.concatenate([ep.actions for ep in ds.episodes])
    idx = rng.integers(s.size, size=size)
    return s[idx], a[idx]


def _act(learner: TabularLearner, cfg: O2oConfig, s: int, rng: np.random.Generator) -> int:
    q = learner.q_min[s]
    A = q.size
    if cfg.exploration == "softmax":
        z = (q - q.max()) / cfg.exploration_param
        p = np.exp(z)
        return int(rng.choice(A, p=p / p.sum()))
    if rng.random() < cfg.exploration_param:
        return int(rng.integers(A))
    return int(greedy_policy(q[None, :]).probs[0].argmax())


class Replay:
    """Bounded FIFO of online episodes, optionally on top of a retained offline set."""

    def __init__(self, capacity: int, offline: tuple[Episode, ...] = ()):
        self.offline = tuple(offline)
        self.online: deque[Episode] = deque(maxlen=capacity)

    def add(self, ep: Episode) -> None:
        self.online.append(ep)

    @property
    def episodes(self) -> list[Episode]:
        return list(self.offline) + list(self.online)

    @property
    def tags(self) -> tuple[str, ...]:
        return ("offline",) * len(self.offline) + ("online",) * len(self.online)

    def __len__(self) -> int:
        return len(self.offline) + len(self.online)


def online_phase(
    mdp: FiniteMdp,
    learner: TabularLearner,
    cfg: O2oConfig,
    rng: np.random.Generator,
    probe: tuple[np.ndarray, np.ndarray],
    replay: Replay,
    lam: float,
) -> tuple[list[O2oRecord], Replay]:
    """Interact for ``cfg.online_steps`` steps with one alpha=0 update per step.

    Updates start once the replay holds an episode; the step-0 record is
    taken before any update.
    """
    S = mdp.num_states
    flat_P = mdp.P.reshape(-1, S)
    cdf = np.cumsum(flat_P, axis=1)
    d0_cdf = np.cumsum(mdp.d0)
    records = [O2oRecord("online", 0, learner.probe_average(*probe), expected_return(mdp, learner.policy), 0)]
    sampler = SegmentSampler(replay.episodes, cfg.segment_len) if len(replay) else None
    done = 0
    s = int(np.searchsorted(d0_cdf, rng.random(), side="right").clip(max=S - 1))
    states, actions, rewards = [s], [], []
    batch_size = learner.cfg.batch
    for t in range(1, cfg.online_steps + 1):
        a = _act(learner, cfg, s, rng)
        nxt = int(np.searchsorted(cdf[s * mdp.num_actions + a], rng.random(), side="right").clip(max=S - 1))
        actions.append(a)
        rewards.append(float(mdp.r[s, a]))
        states.append(nxt)
        s = nxt
        if len(actions) == cfg.horizon:
            replay.add(Episode(states, actions, rewards))
            done += 1
            sampler = SegmentSampler(replay.episodes, cfg.segment_len)
            s = int(np.searchsorted(d0_cdf, rng.random(), side="right").clip(max=S - 1))
            states, actions, rewards = [s], [], []
        if sampler is not None:
            learner.step(sampler.sample(batch_size, rng), alpha=0.0, lam=lam)
        if (cfg.eval_every and t % cfg.eval_every == 0) or t == cfg.online_steps:
            j = expected_return(mdp, learner.policy)
            records.append(O2oRecord("online", t, learner.probe_average(*probe), j, done))
    return records, replay


def run_offline_to_online(
    mdp: FiniteMdp,
    ds: TrajectoryDataset,
    cfg: O2oConfig,
    pretrain: bool = True,
    online_lam: float | None = None,
    online_segment_len: int | None = None,
) -> O2oTrace:
    """Offline CPQL on ``ds`` then online PQL (alpha=0) with the carried tables.

    With ``pretrain=False`` the offline phase is skipped and the online agent
    starts from the learner's initial tables (the scratch arm).  Offline
    records hold the probe average after each update, so the first online
    record (taken before any online update) repeats the last offline one.
    """
    root = np.random.SeedSequence(cfg.seed)
    learner_ss, probe_ss, online_ss = root.spawn(3)
    emp = build_empirical_model(ds)
    off = replace(cfg.offline, seed=int(learner_ss.generate_state(1)[0]))
    learner = TabularLearner(emp.num_states, emp.num_actions, ds.meta.gamma, emp.behavior_policy, off)
    probe = sample_probe(ds, cfg.probe_size, np.random.default_rng(probe_ss))
    trace = O2oTrace()
    if pretrain and off.iters > 0:
        tt = cpql_sgd_train(ds, off, eval_mdp=mdp, eval_every=cfg.eval_every, learner=learner, probe=probe)
        trace.records = [O2oRecord("offline", r.iter, r.avg_q, r.j_eval) for r in tt.records]
    trace.transition_index = len(trace.records)
    if cfg.online_steps == 0:
        return trace
    lam = cfg.offline.lam if online_lam is None else online_lam
    if online_segment_len is not None:
        cfg = replace(cfg, segment_len=online_segment_len)
    replay = Replay(cfg.replay_capacity, ds.episodes if cfg.retain_offline else ())
    recs, replay = online_phase(mdp, learner, cfg, np.random.default_rng(online_ss), probe, replay, lam)
    trace.records.extend(recs)
    trace.replay_tags = replay.tags
    return trace


@dataclass
class PairedTraces:
    cpql_to_pql: O2oTrace
    baseline: O2oTrace
    baseline_kind: str
    seed: int

    def manifest(self, cfg: O2oConfig) -> dict:
        return {"seed": self.seed, "baseline": self.baseline_kind, "arms": {
            "cpql_to_pql": cfg.to_dict(), self.baseline_kind: _baseline_cfg(cfg, self.baseline_kind).to_dict()}}


def _baseline_cfg(cfg: O2oConfig, baseline: str) -> O2oConfig:
    if baseline == "cql_to_qlearning":
        return replace(cfg, offline=replace(cfg.offline, lam=0.0), segment_len=1)
    return cfg


def compare_transition_baselines(mdp, ds, cfg: O2oConfig, baseline: str = "cql_to_qlearning") -> PairedTraces:
    """Both arms from the same seed, run on two threads.

    The ``cql_to_qlearning`` arm uses lambda=0 offline and one-step segments
    online; ``cpql_to_pql`` as baseline repeats the main arm (a control).
    """
    if baseline not in BASELINES:
        raise InvariantError(f"baseline must be one of {BASELINES}")
    arms = [cfg, _baseline_cfg(cfg, baseline)]
    with ThreadPoolExecutor(max_workers=2) as pool:
        main, base = pool.map(lambda c: run_offline_to_online(mdp, ds, c), arms)
    return PairedTraces(main, base, baseline, cfg.seed)


def paired_avg_q_csv(runs: dict[float, PairedTraces]) -> str:
    """Long-format avg-Q curves keyed by alpha for both arms."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "alpha", "phase", "step", "avg_q"])
    for alpha in sorted(runs):
        pair = runs[alpha]
        for arm, tr in (("cpql_to_pql", pair.cpql_to_pql), (pair.baseline_kind, pair.baseline)):
            for r in tr.records:
                w.writerow([arm, repr(float(alpha)), r.phase, r.step, repr(r.avg_q)])
    return buf.getvalue()
