"""Command-line entry point: ``cpqlbench <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 runtime failure (including failed checks or
errored sweep cells), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from cpqlbench import __version__
from cpqlbench.cpql import cpql_sgd_train
from cpqlbench.envs import HOPPER, EnvSpec, ScoreRef, dataset_recipe, make_env, normalized_score
from cpqlbench.errors import InvariantError
from cpqlbench.offline_to_online import BASELINES, O2oConfig, compare_transition_baselines, paired_avg_q_csv
from cpqlbench.runner import ConfigError, ExperimentConfig, dump_json, manifest, run_sweep
from cpqlbench.theory_suite import InstanceGrid, report_json, run_full_suite, suite_passed

log = logging.getLogger("cpqlbench")


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _experiment(args) -> ExperimentConfig:
    data = _load_json(args.config)
    cfg = ExperimentConfig.from_dict(data)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_env(args) -> int:
    data = _load_json(args.config)
    try:
        spec = EnvSpec.from_dict(data.get("env", data))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"env.{exc}") from None
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = _out_dir(args, ".")
    mdp = make_env(spec)
    mdp.save(out / "mdp.json")
    (out / "manifest.json").write_text(dump_json(manifest({"env": spec.to_dict()}, {"mdp_sha256": mdp.sha256()})))
    print(out / "mdp.json")
    return 0


def cmd_collect(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args, cfg.output_dir)
    mdp = make_env(cfg.env)
    d = cfg.dataset
    ds = dataset_recipe(mdp, d.quality, d.size, cfg.master_seed, d.horizon)
    ds.save(out / "dataset.jsonl")
    (out / "manifest.json").write_text(dump_json(manifest(cfg.to_dict(), {"steps": ds.num_steps})))
    print(out / "dataset.jsonl")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args, cfg.output_dir)
    mdp = make_env(cfg.env)
    d = cfg.dataset
    ds = dataset_recipe(mdp, d.quality, d.size, cfg.master_seed, d.horizon)
    train = replace(cfg.train, seed=cfg.master_seed)
    trace = cpql_sgd_train(ds, train, eval_mdp=mdp, eval_every=cfg.eval_every)
    (out / "trace.csv").write_text(trace.to_csv())
    (out / "q.json").write_text(dump_json({"q": trace.q.tolist(), "policy": trace.policy.probs.tolist()}))
    (out / "manifest.json").write_text(dump_json(manifest(cfg.to_dict())))
    print(f"final J = {trace.records[-1].j_eval!r}")
    return 0


def cmd_verify(args) -> int:
    seed = 1 if args.seed is None else args.seed
    grid = InstanceGrid(num_instances=args.instances)
    reports = run_full_suite(seed, grid, workers=args.workers)
    out = _out_dir(args, ".")
    ok = suite_passed(reports)
    body = {"seed": seed, "version": __version__, "grid": asdict(grid), "passed": ok,
            "checks": json.loads(report_json(reports))}
    (out / "verify_report.json").write_text(dump_json(body))
    failed = [r for r in reports if r.asserted and not r.passed]
    print(f"{len(reports)} checks, {len(failed)} failed")
    for r in failed:
        print(f"FAIL {r.name} {json.dumps(r.instance, sort_keys=True)} residual={r.residual!r}")
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    results = run_sweep(cfg, workers=args.workers)
    errors = [r for r in results if r.error is not None]
    print(f"{len(results)} cells, {len(errors)} errored -> {cfg.output_dir}")
    return 1 if errors else 0


def cmd_o2o(args) -> int:
    data = _load_json(args.config)
    o2o_data = data.pop("o2o", {})
    baseline = data.pop("baseline", "cql_to_qlearning")
    alphas = data.pop("alpha_grid", None)
    if baseline not in BASELINES:
        raise ConfigError(f"baseline: must be one of {BASELINES}")
    cfg = ExperimentConfig.from_dict(data)
    try:
        o2o = O2oConfig.from_dict(o2o_data)
    except (TypeError, ValueError, InvariantError) as exc:
        raise ConfigError(f"o2o: {exc}") from None
    if args.seed is not None:
        o2o = replace(o2o, seed=args.seed)
    out = _out_dir(args, cfg.output_dir)
    mdp = make_env(cfg.env)
    d = cfg.dataset
    ds = dataset_recipe(mdp, d.quality, d.size, o2o.seed, d.horizon)
    runs = {}
    for alpha in alphas or [o2o.offline.alpha]:
        arm = replace(o2o, offline=replace(o2o.offline, alpha=float(alpha)))
        pair = compare_transition_baselines(mdp, ds, arm, baseline)
        runs[float(alpha)] = pair
        (out / f"cpql_to_pql_a{alpha:g}.csv").write_text(pair.cpql_to_pql.to_csv())
        (out / f"{baseline}_a{alpha:g}.csv").write_text(pair.baseline.to_csv())
    (out / "avg_q.csv").write_text(paired_avg_q_csv(runs))
    arms = {f"{a!r}": p.manifest(replace(o2o, offline=replace(o2o.offline, alpha=a))) for a, p in runs.items()}
    (out / "manifest.json").write_text(dump_json(manifest(cfg.to_dict(), {"pairs": arms})))
    print(out / "avg_q.csv")
    return 0


def cmd_score(args) -> int:
    ref = HOPPER if args.ref_min is None else ScoreRef(args.ref_min, args.ref_max)
    print(repr(normalized_score(args.raw, ref)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpqlbench", description="Tabular CPQL workbench.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_, config=True, workers=False):
        p = sub.add_parser(name, help=help_, description=help_)
        if config:
            p.add_argument("--config", metavar="FILE", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        if workers:
            p.add_argument("--workers", type=int, default=1, help="worker threads (does not change outputs)")
        p.set_defaults(func=func)
        return p

    add("gen-env", cmd_gen_env, "Generate an MDP from an env spec and write mdp.json.")
    add("collect", cmd_collect, "Collect an offline dataset (dataset.jsonl + meta).")
    add("train", cmd_train, "Train one CPQL configuration on a generated dataset.")
    v = add("verify", cmd_verify, "Run the theory check suite and write verify_report.json.", config=False,
            workers=True)
    v.add_argument("--instances", type=int, default=20, help="random instances per check (default 20)")
    add("sweep", cmd_sweep, "Run an (operator, alpha, lambda, seed) grid.", workers=True)
    add("o2o", cmd_o2o, "Offline-to-online run with a paired baseline arm.")
    s = add("score", cmd_score, "Normalized score of a raw return (hopper references by default).", config=False)
    s.add_argument("--raw", type=float, required=True, help="raw return")
    s.add_argument("--ref-min", type=float, help="reference minimum return")
    s.add_argument("--ref-max", type=float, help="reference maximum return")
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "score" and (args.ref_min is None) != (args.ref_max is None):
        print("error: --ref-min and --ref-max go together", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
