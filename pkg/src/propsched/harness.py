"""Experiment harness: scheduler comparisons, the exhaustive schedule oracle,
cost-proxy validation, and fallback-threshold calibration.

Result CSVs are stable: a ``# schema:`` comment line, then a fixed header.
Every cell of a comparison grid is independent and seeded from
(config seed, instance index, scheduler index, repetition), so runs are
reproducible up to wall-clock columns.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np

from . import engine, tasks
from .engine import (InstanceSpec, RewardConfig, SolverState, build_instance,
                     propagate, restore, run_to_fixpoint, snapshot, step_cost)
from .policy import load_checkpoint
from .schedulers import (ActivityScheduler, DomWdegScheduler, FallbackConfig,
                         FallbackScheduler, FifoScheduler, GreedyScheduler,
                         PolicyScheduler, RandomScheduler, VsidsScheduler,
                         calibrate_tau)

RESULTS_SCHEMA = "run-results-v1"
RESULT_COLUMNS = ["instance_id", "family", "scheduler", "seed", "steps", "cum_cost",
                  "wall_ns", "status", "parse_ok", "entropy_mean", "fallback_frac"]
SUMMARY_SCHEMA = "run-summary-v1"
PROXY_SCHEMA = "proxy-samples-v1"


class ConfigError(ValueError):
    """Bad experiment configuration; reported with key context."""


class HorizonExceeded(RuntimeError):
    """The schedule oracle hit its depth cap before reaching fixpoint."""


def _mix(*parts) -> int:
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


# ---------------------------------------------------------------------------
# config expansion
# ---------------------------------------------------------------------------


def expand_instances(entries: list) -> list:
    """Task-spec dicts -> [(instance_id, family, InstanceSpec)]."""
    out = []
    for n, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"instances[{n}]: expected an object")
        if "file" in entry:
            spec = InstanceSpec.load(entry["file"])
            out.append((entry.get("id", os.path.basename(entry["file"])),
                        spec.meta.get("family", "custom"), spec))
            continue
        family = entry.get("family")
        count = entry.get("count", 1)
        seed = entry.get("seed", 0)
        for i in range(count):
            s = _mix(seed, i) % (2 ** 31)
            iid = f"{family}-{n}-{i}"
            if family == "parse":
                lo, hi = entry.get("length", [3, 5])
                g = tasks.sample_grammar(entry.get("grammar_seed", seed),
                                         require_lengths=(lo, hi))
                sent = tasks.sample_sentence(g, (lo, hi), s)
                out.append((iid, "parse", tasks.build_parse_instance(g, sent)))
            elif family == "knapsack":
                spec, _ = tasks.gen_knapsack(entry.get("items", 6), s,
                                             cap_ratio=entry.get("cap_ratio", 0.5))
                out.append((iid, "knapsack", spec))
            elif family == "coloring":
                spec, _ = tasks.gen_coloring(entry.get("n", 6), entry.get("edge_prob", 0.4),
                                             entry.get("colors", 3), s,
                                             pin_first=entry.get("pin_first", False))
                out.append((iid, "coloring", spec))
            elif family == "random_csp":
                spec = tasks.gen_random_csp(entry.get("n", 6), entry.get("domain", 4),
                                            entry.get("density", 0.4),
                                            entry.get("tightness", 0.3), s)
                out.append((iid, "random_csp", spec))
            elif family == "adversarial":
                out.append((iid, "adversarial", tasks.adversarial_two_choice()))
            else:
                raise ConfigError(f"instances[{n}]: unknown family {family!r}")
    return out


_PARAMS_CACHE: dict = {}


def _cached_params(path: str):
    if path not in _PARAMS_CACHE:
        _PARAMS_CACHE[path] = load_checkpoint(path)
    return _PARAMS_CACHE[path]


def build_scheduler(cfg: dict, seed: int):
    """Scheduler factory from a config dict; returns (name, scheduler)."""
    kind = cfg.get("kind")
    name = cfg.get("name", kind)
    if kind == "fifo":
        return name, FifoScheduler()
    if kind == "random":
        return name, RandomScheduler(seed=seed)
    if kind == "activity":
        return name, ActivityScheduler(decay=cfg.get("decay", 0.95), bump=cfg.get("bump", 1.0))
    if kind == "vsids":
        return name, VsidsScheduler(decay=cfg.get("decay", 0.95), bump=cfg.get("bump", 1.0))
    if kind == "domwdeg":
        return name, DomWdegScheduler()
    if kind == "greedy":
        return name, GreedyScheduler()
    if kind == "policy":
        params = _cached_params(cfg["checkpoint"])
        return name, PolicyScheduler(params, sample=cfg.get("sample", False), seed=seed)
    if kind == "fallback":
        params = _cached_params(cfg["checkpoint"])
        _, backup = build_scheduler(cfg.get("backup", {"kind": "activity"}), seed)
        return name, FallbackScheduler(params, backup, FallbackConfig(tau=cfg["tau"]))
    raise ConfigError(f"unknown scheduler kind {kind!r}")


# ---------------------------------------------------------------------------
# comparison runs
# ---------------------------------------------------------------------------


def run_cell(spec: InstanceSpec, sched_cfg: dict, seed: int,
             reward: Optional[RewardConfig] = None,
             budget: Optional[int] = None) -> dict:
    """One (instance, scheduler, repetition) measurement."""
    state = build_instance(spec, reward=reward)
    name, sched = build_scheduler(sched_cfg, seed)
    cap = budget if budget is not None else 4 * max(1, len(state.propagators))
    t0 = time.perf_counter_ns()
    trace = run_to_fixpoint(state, sched, budget=cap)
    wall = time.perf_counter_ns() - t0
    if state.mode == engine.DERIVATION and "start_var" in state.meta:
        ok = state.meta["start_symbol"] in state.domain(state.meta["start_var"])
        parse_ok = int(ok)
    else:
        parse_ok = ""
    entropies = getattr(sched, "entropies", None)
    entropy_mean = float(np.mean(entropies)) if entropies else ""
    fallback_frac = sched.policy_fraction() if isinstance(sched, FallbackScheduler) else ""
    return {
        "scheduler": name,
        "seed": seed,
        "steps": len(trace.steps),
        "cum_cost": state.cum_cost,
        "wall_ns": wall,
        "status": trace.outcome,
        "parse_ok": parse_ok,
        "entropy_mean": entropy_mean,
        "fallback_frac": fallback_frac,
    }


def _cell_worker(args: tuple) -> dict:
    spec_json, iid, family, sched_cfg, seed, reward_kw, budget, warmups = args
    spec = InstanceSpec.loads(spec_json)
    reward = RewardConfig(**reward_kw)
    for w in range(warmups):
        run_cell(spec, sched_cfg, seed, reward=reward, budget=budget)
    row = run_cell(spec, sched_cfg, seed, reward=reward, budget=budget)
    row["instance_id"] = iid
    row["family"] = family
    return row


def run_experiment(config: dict, jobs: int = 1) -> tuple:
    """Full comparison grid; returns (rows, summary rows) and writes CSVs.

    Warmup repetitions run but are not recorded; reported rows are one per
    (instance, scheduler, repetition), merged in deterministic sort order.
    """
    if "instances" not in config or "schedulers" not in config:
        raise ConfigError("config needs 'instances' and 'schedulers'")
    reps = config.get("reps", 5)
    warmup = config.get("warmup", 1)
    seed = config.get("seed", 0)
    budget = config.get("budget")
    reward_kw = config.get("reward", {"alpha": 1.0, "beta": 0.1})
    try:
        RewardConfig(**reward_kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad reward config: {e}") from e
    instances = expand_instances(config["instances"])
    sched_cfgs = config["schedulers"]
    for i, sc in enumerate(sched_cfgs):
        if "kind" not in sc:
            raise ConfigError(f"schedulers[{i}]: missing 'kind'")

    cells = []
    for ii, (iid, family, spec) in enumerate(instances):
        spec_json = spec.dumps()
        for si, sc in enumerate(sched_cfgs):
            for rep in range(reps):
                rep_seed = _mix(seed, ii, si, rep) % (2 ** 31)
                cells.append((spec_json, iid, family, sc, rep_seed, reward_kw,
                              budget, warmup if rep == 0 else 0))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_cell_worker, cells))
    else:
        rows = [_cell_worker(c) for c in cells]
    rows.sort(key=lambda r: (r["instance_id"], r["scheduler"], r["seed"]))

    summary = []
    keys = sorted({(r["instance_id"], r["scheduler"]) for r in rows})
    for iid, sched in keys:
        sub = [r for r in rows if r["instance_id"] == iid and r["scheduler"] == sched]
        summary.append({
            "instance_id": iid,
            "family": sub[0]["family"],
            "scheduler": sched,
            "reps": len(sub),
            "median_steps": statistics.median(r["steps"] for r in sub),
            "median_cum_cost": statistics.median(r["cum_cost"] for r in sub),
            "median_wall_ns": statistics.median(r["wall_ns"] for r in sub),
        })

    out_dir = config.get("out")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_results_csv(os.path.join(out_dir, "results.csv"), rows)
        write_summary_csv(os.path.join(out_dir, "summary.csv"), summary)
        with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
            json.dump(config, fh, indent=2, sort_keys=True)
    return rows, summary


def write_results_csv(path, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {RESULTS_SCHEMA}\n")
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in RESULT_COLUMNS})


def write_summary_csv(path, rows: list) -> None:
    cols = ["instance_id", "family", "scheduler", "reps", "median_steps",
            "median_cum_cost", "median_wall_ns"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {SUMMARY_SCHEMA}\n")
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_results_csv(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# exhaustive schedule oracle
# ---------------------------------------------------------------------------


def schedule_oracle(spec: InstanceSpec, horizon: int = 12,
                    reward: Optional[RewardConfig] = None) -> tuple:
    """Minimum cumulative proxy cost to a terminal state, by exhaustive DFS
    over schedules with memoization on (domains, dirty set).

    Terminal fixpoints are schedule-invariant, so cost is the only
    schedule-dependent quantity.  Raises HorizonExceeded if any branch runs
    longer than ``horizon`` steps.
    """
    state = build_instance(spec, reward=reward)
    memo: dict = {}

    def key() -> tuple:
        doms = tuple(tuple(sorted(v.domain.values)) for v in state.variables)
        return doms, tuple(sorted(state.dirty_set))

    def rec(depth: int) -> tuple:
        if state.status != engine.RUNNING:
            return 0.0, ()
        if depth >= horizon:
            raise HorizonExceeded(f"no fixpoint within {horizon} steps")
        k = key()
        if k in memo:
            return memo[k]
        best = None
        for cid in sorted(state.dirty_set):
            snap = snapshot(state)
            out = propagate(state, cid)
            try:
                sub_cost, sub_sched = rec(depth + 1)
            finally:
                restore(state, snap)
            cand = (out.cost + sub_cost, (cid,) + sub_sched)
            if best is None or cand[0] < best[0]:
                best = cand
        memo[k] = best
        return best

    cost, sched = rec(0)
    return cost, list(sched)


# ---------------------------------------------------------------------------
# cost proxy vs wall clock
# ---------------------------------------------------------------------------


def pearson_r(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if len(x) < 2 or x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def proxy_validate(specs: list, reps: int = 5, warmup: int = 1, seed: int = 0,
                   max_steps_per_instance: int = 60) -> dict:
    """Time individual propagations against their operation-count estimate.

    Walks each instance under a seeded random schedule; at every step the
    selected propagation is timed ``warmup + reps`` times on a snapshot
    (warmups discarded, median kept) before the walk advances.
    Returns {"r": pearson, "n": samples, "rows": [(kind, proxy, ns)]}.
    """
    rows = []
    for si, spec in enumerate(specs):
        state = build_instance(spec)
        sched = RandomScheduler(seed=_mix(seed, si) % (2 ** 31))
        steps = 0
        while state.status == engine.RUNNING and steps < max_steps_per_instance:
            cid = sched.select(state)
            proxy = step_cost(state, cid)
            timings = []
            for rep in range(warmup + reps):
                snap = snapshot(state)
                t0 = time.perf_counter_ns()
                propagate(state, cid)
                t1 = time.perf_counter_ns()
                restore(state, snap)
                if rep >= warmup:
                    timings.append(t1 - t0)
            rows.append((state.propagators[cid].kind, proxy,
                         statistics.median(timings)))
            out = propagate(state, cid)
            sched.notify(cid, out)
            steps += 1
    r = pearson_r([p for _, p, _ in rows], [t for _, _, t in rows])
    return {"r": r, "n": len(rows), "rows": rows,
            "warning": "zero variance in samples" if np.isnan(r) else ""}


def write_proxy_csv(path, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {PROXY_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["kind", "proxy_cost", "wall_ns"])
        for kind, proxy, ns in rows:
            w.writerow([kind, proxy, ns])


# ---------------------------------------------------------------------------
# fallback threshold calibration
# ---------------------------------------------------------------------------


def collect_step_entropies(params, specs: list, budget: Optional[int] = None) -> list:
    """Per-step policy entropies along deterministic runs over dev instances."""
    entropies = []
    for spec in specs:
        state = build_instance(spec)
        sched = PolicyScheduler(params, sample=False)
        cap = budget if budget is not None else 4 * max(1, len(state.propagators))
        run_to_fixpoint(state, sched, budget=cap)
        entropies.extend(sched.entropies)
    return entropies


def calibrate_from_runs(params, specs: list, q: float = 0.8,
                        budget: Optional[int] = None) -> tuple:
    entropies = collect_step_entropies(params, specs, budget=budget)
    return calibrate_tau(entropies, q=q), entropies
