"""Configuration-driven experiment grids with derived per-cell seeds.

Seed derivation
---------------
``cell_seed(master, index) = splitmix64(master + (index + 1) * 0x9E3779B97F4A7C15)``
(all arithmetic mod 2**64).  Cells are indexed in sorted key order, so a
cell's seed never depends on scheduling or on the worker count.  Datasets
are shared by all cells with the same repeat index and use
``cell_seed(master, 2**32 + repeat)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

from cpqlbench import __version__
from cpqlbench.cpql import CpqlConfig, cpql_sgd_train
from cpqlbench.envs import EnvSpec, ScoreRef, dataset_recipe, env_score_ref, make_env, normalized_score
from cpqlbench.errors import InvariantError

OPERATORS = ("cpql", "cql", "nstep", "retrace", "treebackup")
GOLDEN = 0x9E3779B97F4A7C15
MASK = (1 << 64) - 1


class ConfigError(ValueError):
    """Malformed configuration; the message starts with the offending field path."""


def splitmix64(x: int) -> int:
    z = x & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def cell_seed(master_seed: int, index: int) -> int:
    return splitmix64(master_seed + (index + 1) * GOLDEN)


@dataclass(frozen=True)
class DatasetSpec:
    quality: str | dict = "medium"
    size: int = 40
    horizon: int = 20

    def __post_init__(self):
        if self.size < 1 or self.horizon < 1:
            raise ValueError("size and horizon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: CpqlConfig = field(default_factory=CpqlConfig)
    alpha_grid: tuple = (1.0,)
    lambda_grid: tuple = (0.7,)
    operators: tuple = ("cpql",)
    score_ref: ScoreRef | None = None
    eval_every: int = 0
    output_dir: str = "out"
    master_seed: int = 0
    repeats: int = 1
    workers: int = 1

    def __post_init__(self):
        if not self.alpha_grid or not self.lambda_grid or not self.operators:
            raise ConfigError("grids must be non-empty")
        for op in self.operators:
            if op not in OPERATORS:
                raise ConfigError(f"operators: unknown operator {op!r}")
        for lam in self.lambda_grid:
            if not 0.0 <= lam < 1.0:
                raise ConfigError(f"lambda_grid: {lam} outside [0, 1)")
        for alpha in self.alpha_grid:
            if not alpha >= 0:
                raise ConfigError(f"alpha_grid: {alpha} is negative")
        if self.repeats < 1 or self.workers < 1:
            raise ConfigError("repeats: repeats and workers must be >= 1")

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "dataset": self.dataset.to_dict(),
            "train": self.train.to_dict(),
            "alpha_grid": list(self.alpha_grid),
            "lambda_grid": list(self.lambda_grid),
            "operators": list(self.operators),
            "score_ref": None if self.score_ref is None else asdict(self.score_ref),
            "eval_every": self.eval_every,
            "output_dir": self.output_dir,
            "master_seed": self.master_seed,
            "repeats": self.repeats,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ExperimentConfig:
        if not isinstance(d, Mapping):
            raise ConfigError("<root>: expected a JSON object")
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError(f"{key}: unknown config field")
        kw = {}
        nested = {"env": EnvSpec.from_dict, "dataset": lambda x: DatasetSpec(**x), "train": CpqlConfig.from_dict,
                  "score_ref": lambda x: None if x is None else ScoreRef(**x)}
        for key, value in d.items():
            try:
                if key in nested:
                    if value is not None and not isinstance(value, Mapping):
                        raise ValueError("expected an object")
                    kw[key] = nested[key](value)
                elif key in ("alpha_grid", "lambda_grid", "operators"):
                    if not isinstance(value, list):
                        raise ValueError("expected a list")
                    kw[key] = tuple(value)
                else:
                    kw[key] = value
            except ConfigError:
                raise
            except (TypeError, ValueError, InvariantError) as exc:
                raise ConfigError(f"{key}: {exc}") from None
        return cls(**kw)


@dataclass(frozen=True, order=True)
class CellKey:
    operator: str
    alpha: float
    lam: float
    repeat: int

    def slug(self) -> str:
        return f"{self.operator}_a{self.alpha:g}_l{self.lam:g}_r{self.repeat}"


@dataclass
class CellResult:
    key: CellKey
    seed: int
    final_j: float = math.nan
    final_avg_q: float = math.nan
    score: float | None = None
    trace_csv: str = ""
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["key"] = asdict(self.key)
        return d


def enumerate_cells(cfg: ExperimentConfig) -> list[CellKey]:
    """Sorted unique cells; cql runs at lambda=0 and nstep ignores lambda (recorded as 1)."""
    keys = set()
    for op in cfg.operators:
        for alpha in cfg.alpha_grid:
            lams = {"cql": (0.0,), "nstep": (1.0,)}.get(op, cfg.lambda_grid)
            for lam in lams:
                for rep in range(cfg.repeats):
                    keys.add(CellKey(op, float(alpha), float(lam), rep))
    return sorted(keys)


def _cell_train_config(cfg: ExperimentConfig, key: CellKey, seed: int) -> CpqlConfig:
    returns = {"cpql": "pql", "cql": "pql"}.get(key.operator, key.operator)
    lam = 0.0 if key.operator == "nstep" else key.lam
    return replace(cfg.train, alpha=key.alpha, lam=lam, returns=returns, seed=seed % (2**63))


def run_cell(cfg: ExperimentConfig, key: CellKey, index: int, mdp=None, ref=None, datasets=None) -> tuple[CellResult, str]:
    seed = cell_seed(cfg.master_seed, index)
    res = CellResult(key, seed, trace_csv=f"traces/{key.slug()}.csv")
    try:
        mdp = make_env(cfg.env) if mdp is None else mdp
        if datasets is not None:
            ds = datasets[key.repeat]
        else:
            ds = dataset_recipe(mdp, cfg.dataset.quality, cfg.dataset.size,
                                cell_seed(cfg.master_seed, 2**32 + key.repeat) % (2**63), cfg.dataset.horizon)
        tt = cpql_sgd_train(ds, _cell_train_config(cfg, key, seed), eval_mdp=mdp, eval_every=cfg.eval_every)
        res.final_j = tt.records[-1].j_eval if tt.records else math.nan
        res.final_avg_q = tt.records[-1].avg_q if tt.records else math.nan
        if ref is not None and not math.isnan(res.final_j):
            res.score = normalized_score(res.final_j, ref)
        return res, tt.to_csv()
    except Exception as exc:  # recorded per cell; the sweep continues
        res.error = f"{type(exc).__name__}: {exc}"
        return res, traceback.format_exc()


def run_sweep(cfg: ExperimentConfig, workers: int | None = None, write: bool = True) -> list[CellResult]:
    """Run every cell; outputs are byte-identical for any ``workers``."""
    workers = cfg.workers if workers is None else workers
    cells = enumerate_cells(cfg)
    mdp = make_env(cfg.env)
    ref = cfg.score_ref if cfg.score_ref is not None else env_score_ref(mdp)
    datasets = {
        rep: dataset_recipe(mdp, cfg.dataset.quality, cfg.dataset.size,
                            cell_seed(cfg.master_seed, 2**32 + rep) % (2**63), cfg.dataset.horizon)
        for rep in range(cfg.repeats)
    }

    def job(item):
        idx, key = item
        return run_cell(cfg, key, idx, mdp, ref, datasets)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(job, enumerate(cells)))
    else:
        outs = [job(item) for item in enumerate(cells)]
    results = [r for r, _ in outs]
    if write:
        write_sweep_outputs(cfg, results, [t for _, t in outs], ref)
    return results


def summarize(results: list[CellResult]) -> list[dict]:
    """Mean final score (or return when no reference) per (operator, alpha, lambda)."""
    groups: dict[tuple, list[float]] = {}
    for r in results:
        if r.error is None:
            val = r.score if r.score is not None else r.final_j
            groups.setdefault((r.key.operator, r.key.alpha, r.key.lam), []).append(val)
    return [{"operator": k[0], "alpha": k[1], "lam": k[2], "mean": sum(v) / len(v), "n": len(v)}
            for k, v in sorted(groups.items())]


def score_spread(results: list[CellResult], operator: str, lam: float | None = None) -> float:
    means = [row["mean"] for row in summarize(results)
             if row["operator"] == operator and (lam is None or row["lam"] == lam)]
    return max(means) - min(means)


def manifest(config: dict, extra: dict | None = None) -> dict:
    out = {"tool": "cpqlbench", "version": __version__, "config": config,
           "seed_derivation": {"mix": "splitmix64", "golden": hex(GOLDEN)}}
    if extra:
        out.update(extra)
    return out


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


GNUPLOT = """set datafile separator ','
set key autotitle columnhead
set xlabel 'alpha'
set ylabel 'mean score'
set logscale x
plot for [op in OPS] '< grep -E "^(operator|'.op.',)" summary.csv' using 2:4 with linespoints title op
"""


def write_sweep_outputs(cfg: ExperimentConfig, results: list[CellResult], traces: list[str], ref: ScoreRef) -> None:
    out = Path(cfg.output_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    for r, text in zip(results, traces):
        (out / r.trace_csv).write_text(text)
    (out / "results.json").write_text(dump_json([r.to_dict() for r in results]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["operator", "alpha", "lam", "mean", "n"])
    for row in summarize(results):
        w.writerow([row["operator"], repr(row["alpha"]), repr(row["lam"]), repr(row["mean"]), row["n"]])
    (out / "summary.csv").write_text(buf.getvalue())
    ops = " ".join(sorted({r.key.operator for r in results}))
    (out / "plot.gp").write_text(f"OPS = '{ops}'\n" + GNUPLOT)
    resolved = cfg.to_dict()
    for key in ("workers", "output_dir"):  # execution details; outputs must not depend on them
        resolved.pop(key)
    (out / "manifest.json").write_text(dump_json(manifest(resolved, {"score_ref": asdict(ref)})))
