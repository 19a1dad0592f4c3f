"""Command-line entry point.

Commands: gen, run, train, meta-train, adapt, oracle, proxy-validate,
calibrate-tau, gradcheck.  Every command reads a JSON config (--config),
honors --seed/--out/--jobs overrides, and prints a JSON result object.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import engine, harness, tasks, training
from .engine import InstanceSpec, MalformedSpec
from .harness import ConfigError, HorizonExceeded
from .policy import (CheckpointError, PolicyConfig, init_params, load_checkpoint,
                     save_checkpoint, gradcheck_suite)
from .schedulers import calibrate_tau
from .training import MetaConfig, TrainConfig


def _load_config(path) -> dict:
    if path is None:
        raise ConfigError("--config is required for this command")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e


def _emit(obj: dict) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")


def _task_sampler(task_cfg: dict):
    family = task_cfg.get("family")
    if family == "parse":
        length = tuple(task_cfg.get("length", [3, 5]))
        grammar = tasks.sample_grammar(task_cfg.get("grammar_seed", 0),
                                       require_lengths=length)
        return tasks.parse_instance_sampler(grammar, length)
    if family == "knapsack":
        items = task_cfg.get("items", 6)
        return lambda seed: engine.build_instance(tasks.gen_knapsack(items, seed)[0])
    if family == "coloring":
        n = task_cfg.get("n", 6)
        p = task_cfg.get("edge_prob", 0.4)
        colors = task_cfg.get("colors", 3)
        return lambda seed: engine.build_instance(
            tasks.gen_coloring(n, p, colors, seed)[0])
    if family == "random_csp":
        return lambda seed: engine.build_instance(tasks.gen_random_csp(
            task_cfg.get("n", 6), task_cfg.get("domain", 4),
            task_cfg.get("density", 0.4), task_cfg.get("tightness", 0.3), seed))
    raise ConfigError(f"unknown task family {family!r}")


def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    out = args.out or cfg.get("out") or "instances"
    os.makedirs(out, exist_ok=True)
    written = []
    for iid, family, spec in harness.expand_instances(cfg.get("instances", [])):
        path = os.path.join(out, f"{iid}.json")
        spec.dump(path)
        written.append(path)
    _emit({"command": "gen", "written": written})
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    rows, summary = harness.run_experiment(cfg, jobs=args.jobs)
    _emit({"command": "run", "rows": len(rows), "out": cfg.get("out"),
           "schema": harness.RESULTS_SCHEMA})
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = args.out or cfg.get("out")
    policy_cfg = PolicyConfig(**cfg.get("policy", {}))
    train_cfg = TrainConfig(**cfg.get("train", {}), seed=seed) \
        if "seed" not in cfg.get("train", {}) else TrainConfig(**cfg["train"])
    sampler = _task_sampler(cfg.get("task", {}))
    params = init_params(policy_cfg, seed=seed)
    params, history = training.train_ppo(params, sampler, train_cfg,
                                         n_updates=cfg.get("updates", 20),
                                         seed=seed, out_dir=out,
                                         budget=cfg.get("budget"),
                                         save_interval=cfg.get("save_interval", 0))
    _emit({"command": "train", "updates": len(history), "out": out,
           "final_mean_reward": history[-1]["mean_reward"] if history else None})
    return 0


def cmd_meta_train(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = args.out or cfg.get("out")
    policy_cfg = PolicyConfig(**cfg.get("policy", {}))
    train_cfg = TrainConfig(**cfg.get("train", {}))
    meta_cfg = MetaConfig(**cfg.get("meta", {}))
    task_cfgs = cfg.get("tasks", [])
    if not task_cfgs:
        raise ConfigError("meta-train needs a non-empty 'tasks' list")
    samplers = [_task_sampler(t) for t in task_cfgs]
    params = init_params(policy_cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for it in range(cfg.get("iterations", 10)):
        idx = rng.choice(len(samplers), size=min(meta_cfg.tasks_per_batch, len(samplers)),
                         replace=False)
        batch = [samplers[int(i)] for i in idx]
        params, _ = training.maml_meta_step(params, batch, meta_cfg, train_cfg,
                                            seed=int(rng.integers(0, 2**31)))
    if out:
        os.makedirs(out, exist_ok=True)
        save_checkpoint(params, os.path.join(out, "meta_init.json"))
    _emit({"command": "meta-train", "iterations": cfg.get("iterations", 10), "out": out})
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = args.out or cfg.get("out")
    params = load_checkpoint(cfg["checkpoint"])
    train_cfg = TrainConfig(**cfg.get("train", {}))
    sampler = _task_sampler(cfg.get("task", {}))
    adapted, report = training.adapt(params, sampler, steps=cfg.get("steps", 10),
                                     train_cfg=train_cfg, seed=seed,
                                     inner_lr=cfg.get("inner_lr", 1e-3))
    if out:
        os.makedirs(out, exist_ok=True)
        save_checkpoint(adapted, os.path.join(out, "adapted.json"))
        with open(os.path.join(out, "adapt_report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    _emit({"command": "adapt", "report": report, "out": out})
    return 0


def cmd_oracle(args) -> int:
    cfg = _load_config(args.config)
    spec = InstanceSpec.load(cfg["file"])
    cost, schedule = harness.schedule_oracle(spec, horizon=cfg.get("horizon", 12))
    _emit({"command": "oracle", "optimal_cost": cost, "schedule": schedule})
    return 0


def cmd_proxy_validate(args) -> int:
    cfg = _load_config(args.config)
    out = args.out or cfg.get("out")
    instances = [spec for _, _, spec in harness.expand_instances(cfg.get("instances", []))]
    result = harness.proxy_validate(instances, reps=cfg.get("reps", 5),
                                    warmup=cfg.get("warmup", 1),
                                    seed=args.seed if args.seed is not None else cfg.get("seed", 0))
    if out:
        os.makedirs(out, exist_ok=True)
        harness.write_proxy_csv(os.path.join(out, "proxy_samples.csv"), result["rows"])
    _emit({"command": "proxy-validate", "r": result["r"], "n": result["n"],
           "warning": result["warning"], "out": out})
    return 0


def cmd_calibrate_tau(args) -> int:
    cfg = _load_config(args.config)
    q = cfg.get("q", 0.8)
    if "entropies" in cfg:
        entropies = cfg["entropies"]
    else:
        params = load_checkpoint(cfg["checkpoint"])
        instances = [s for _, _, s in harness.expand_instances(cfg.get("instances", []))]
        tau, entropies = harness.calibrate_from_runs(params, instances, q=q)
        _emit({"command": "calibrate-tau", "tau": tau, "n_steps": len(entropies)})
        return 0
    tau = calibrate_tau(entropies, q=q)
    _emit({"command": "calibrate-tau", "tau": tau, "n_steps": len(entropies)})
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config) if args.config else {}
    n = cfg.get("n_configs", 20)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    err = gradcheck_suite(n_configs=n, seed=seed)
    tol = cfg.get("tolerance", 1e-4)
    _emit({"command": "gradcheck", "max_rel_err": err, "tolerance": tol,
           "ok": bool(err < tol)})
    return 0 if err < tol else 2


_COMMANDS = {
    "gen": cmd_gen,
    "run": cmd_run,
    "train": cmd_train,
    "meta-train": cmd_meta_train,
    "adapt": cmd_adapt,
    "oracle": cmd_oracle,
    "proxy-validate": cmd_proxy_validate,
    "calibrate-tau": cmd_calibrate_tau,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="propsched",
                                 description="propagation-scheduling workbench")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=1)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, MalformedSpec, CheckpointError, KeyError, TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (HorizonExceeded, RuntimeError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
