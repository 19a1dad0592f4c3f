"""Scheduling policies: which dirty constraint to propagate next.

All schedulers share a two-method interface: ``select(state) -> cid`` picks a
member of the dirty set, and ``notify(cid, outcome)`` feeds back the result
of the propagation that followed.  Ties always break toward the lowest
constraint id so runs are reproducible.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine
from .engine import SolverState, StepOutcome
from .features import featurize
from .policy import PolicyParams, policy_forward, choose_action

USE_POLICY = "use_policy"
USE_BACKUP = "use_backup"


class EmptyDirty(RuntimeError):
    """select() requires a non-empty dirty set."""


def _require_dirty(state: SolverState) -> None:
    if not state.dirty_list:
        raise EmptyDirty("no dirty constraints to select from")


class Scheduler:
    name = "base"

    def select(self, state: SolverState) -> int:
        raise NotImplementedError

    def notify(self, cid: int, outcome: StepOutcome) -> None:
        pass

    def activity_scores(self) -> Optional[dict]:
        return None


class FifoScheduler(Scheduler):
    """Oldest dirty entry first (dirty-set insertion order)."""

    name = "fifo"

    def select(self, state: SolverState) -> int:
        _require_dirty(state)
        return state.dirty_list[0]


class RandomScheduler(Scheduler):
    name = "random"

    def __init__(self, seed: int = 0) -> None:
        self.rng = random.Random(seed)

    def select(self, state: SolverState) -> int:
        _require_dirty(state)
        return self.rng.choice(sorted(state.dirty_set))


@dataclass
class ActivityTable:
    """Bump-and-decay constraint scores (conflict-driven search lineage)."""

    decay: float = 0.95
    bump: float = 1.0
    scores: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0.0 < self.decay < 1.0):
            raise ValueError("decay must be in (0, 1)")
        if not self.bump > 0:
            raise ValueError("bump must be positive")

    def score(self, cid: int) -> float:
        return self.scores.get(cid, 0.0)

    def bump_and_decay(self, cid: int, do_bump: bool) -> None:
        if do_bump:
            self.scores[cid] = self.score(cid) + self.bump
        for k in list(self.scores):
            self.scores[k] *= self.decay


class ActivityScheduler(Scheduler):
    """Prefer constraints that recently changed domains."""

    name = "activity"

    def __init__(self, decay: float = 0.95, bump: float = 1.0) -> None:
        self.table = ActivityTable(decay=decay, bump=bump)

    def select(self, state: SolverState) -> int:
        _require_dirty(state)
        return max(sorted(state.dirty_set), key=lambda c: (self.table.score(c), -c))

    def notify(self, cid: int, outcome: StepOutcome) -> None:
        self.table.bump_and_decay(cid, outcome.delta_d > 0)

    def activity_scores(self) -> dict:
        return dict(self.table.scores)


class VsidsScheduler(ActivityScheduler):
    """Like activity, but also bumps when the step caused a failure."""

    name = "vsids"

    def notify(self, cid: int, outcome: StepOutcome) -> None:
        self.table.bump_and_decay(cid, outcome.delta_d > 0 or outcome.failed)


class DomWdegScheduler(Scheduler):
    """Smallest scope domain over (1 + historical failure weight)."""

    name = "domwdeg"

    def __init__(self) -> None:
        self.fail_weight: dict = {}

    def select(self, state: SolverState) -> int:
        _require_dirty(state)

        def key(cid: int):
            p = state.propagators[cid]
            min_dom = min(state.variables[v].domain.size() for v in p.scope)
            return (min_dom / (1.0 + self.fail_weight.get(cid, 0)), cid)

        return min(sorted(state.dirty_set), key=key)

    def notify(self, cid: int, outcome: StepOutcome) -> None:
        if outcome.failed:
            self.fail_weight[cid] = self.fail_weight.get(cid, 0) + 1


class GreedyScheduler(Scheduler):
    """Exact one-step lookahead maximizing domain change per unit cost.

    Each candidate is propagated on a snapshot and rolled back, so selection
    leaves the state bit-identical.  When no candidate changes anything the
    choice falls back to dirty-set insertion order.
    """

    name = "greedy"

    def select(self, state: SolverState) -> int:
        _require_dirty(state)
        best_cid = None
        best_ratio = -1.0
        any_delta = False
        for cid in sorted(state.dirty_set):
            out = engine.lookahead_outcome(state, cid)
            if out.delta_d > 0:
                any_delta = True
                ratio = out.delta_d / out.cost if out.cost > 0 else math.inf
                if ratio > best_ratio:
                    best_ratio = ratio
                    best_cid = cid
        if not any_delta:
            return state.dirty_list[0]
        return best_cid


class PolicyScheduler(Scheduler):
    """Learned policy: argmax over dirty scores (eval) or sampled (train).

    With ``record=True`` every selection is logged as a rollout record
    (graph, chosen action, its log-probability, the value estimate, and the
    dropout seed used) for trainers to consume.
    """

    name = "policy"

    def __init__(self, params: PolicyParams, sample: bool = False, seed: int = 0,
                 record: bool = False) -> None:
        self.params = params
        self.sample = sample
        self.rng = np.random.default_rng(seed)
        self.record = record
        self.records: list = []
        self.entropies: list = []

    def select(self, state: SolverState) -> int:
        _require_dirty(state)
        graph = featurize(state, step_window=self.params.config.window)
        fwd_seed = int(self.rng.integers(0, 2**31)) if self.sample else 0
        out, _ = policy_forward(self.params, graph, train_mode=self.sample, seed=fwd_seed)
        cid = choose_action(out, sample=self.sample, rng=self.rng)
        self.entropies.append(out.entropy)
        if self.record:
            idx = out.dirty_ids.index(cid)
            self.records.append({
                "graph": graph,
                "action": cid,
                "log_prob": float(np.log(out.probs[idx])),
                "value": out.value,
                "forward_seed": fwd_seed,
            })
        return cid


@dataclass
class FallbackConfig:
    """Entropy-gated hybrid: trust the policy only when it is confident."""

    tau: float
    calibration: tuple = ()

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise ValueError("tau must be non-negative")


def entropy_gate(probs: np.ndarray, cfg: FallbackConfig) -> str:
    """USE_POLICY iff the action distribution's entropy (nats) is below tau."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    return USE_POLICY if h < cfg.tau else USE_BACKUP


def calibrate_tau(entropies, q: float = 0.8) -> float:
    """Threshold such that a ``q`` fraction of the calibration entropies fall
    strictly below it (nearest-rank on the strict-below count)."""
    vals = sorted(float(e) for e in entropies)
    if not vals:
        raise ValueError("empty calibration set")
    k = math.ceil(q * len(vals))
    return vals[min(k, len(vals) - 1)]


class FallbackScheduler(Scheduler):
    name = "fallback"

    def __init__(self, params: PolicyParams, backup: Scheduler, cfg: FallbackConfig) -> None:
        self.params = params
        self.backup = backup
        self.cfg = cfg
        self.entropies: list = []
        self.used_policy: list = []

    def select(self, state: SolverState) -> int:
        _require_dirty(state)
        # featurized exactly like a pure policy run, so tau=inf reproduces it
        graph = featurize(state, step_window=self.params.config.window)
        out, _ = policy_forward(self.params, graph)
        self.entropies.append(out.entropy)
        if entropy_gate(out.probs, self.cfg) == USE_POLICY:
            self.used_policy.append(True)
            return choose_action(out)
        self.used_policy.append(False)
        return self.backup.select(state)

    def notify(self, cid: int, outcome: StepOutcome) -> None:
        self.backup.notify(cid, outcome)

    def policy_fraction(self) -> float:
        return sum(self.used_policy) / len(self.used_policy) if self.used_policy else 0.0
