"""Featurize a solver state into the bipartite variable/constraint graph.

Feature layout (fixed; consumed by the policy networks):

variable nodes (3 features)
    0: domain size / capacity
    1: degree / max degree over the instance
    2: domain changes within the last ``window`` steps / window

constraint nodes (10 features)
    0-5: kind one-hot in ``engine.KINDS`` order
    6:   arity / max arity over the instance
    7:   violation magnitude (see below)
    8:   activity score squashed to [0, 1) as s / (1 + s)
    9:   dirty flag

Violation magnitude estimates how much work a constraint has pending.
Derivation kinds use a premise check: 1 if the rule could derive a missing
label right now, else 0.  Pruning kinds use cheap inconsistency fractions
over the current domains (exact for binary constraints, a pairwise average
for all-different, a mean-vs-slack estimate for linear inequalities).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import engine
from .engine import SolverState, Propagator


@dataclass
class StateGraph:
    var_feats: np.ndarray     # (n_var, 3)
    con_feats: np.ndarray     # (n_con, 10)
    edges: np.ndarray         # (E, 2) rows of (var index, constraint index)
    dirty_mask: np.ndarray    # (n_con,) bool
    dirty_ids: tuple          # dirty constraint ids, ascending

    @property
    def n_var(self) -> int:
        return self.var_feats.shape[0]

    @property
    def n_con(self) -> int:
        return self.con_feats.shape[0]


VAR_FEATS = 3
CON_FEATS = 10


def violation_magnitude(state: SolverState, p: Propagator) -> float:
    doms = [state.variables[v].domain.values for v in p.scope]
    if p.kind == engine.GRAMMAR_RULE:
        dik, dkj, dij = doms
        b, c = p.rhs
        return 1.0 if (b in dik and c in dkj and p.lhs not in dij) else 0.0
    if p.kind == engine.LEXICAL:
        return 1.0 if p.lhs not in doms[0] else 0.0
    if p.kind == engine.NOT_EQUAL:
        dx, dy = doms
        if not dx or not dy:
            return 0.0
        return len(dx & dy) / (len(dx) * len(dy))
    if p.kind == engine.BINARY_TABLE:
        dx, dy = doms
        if not dx or not dy:
            return 0.0
        ok = sum(1 for a in dx for b in dy if (a, b) in p.allowed)
        return 1.0 - ok / (len(dx) * len(dy))
    if p.kind == engine.ALL_DIFFERENT:
        pairs = []
        for i in range(len(doms)):
            for j in range(i + 1, len(doms)):
                di, dj = doms[i], doms[j]
                if di and dj:
                    pairs.append(len(di & dj) / (len(di) * len(dj)))
        return float(np.mean(pairs)) if pairs else 0.0
    if p.kind == engine.LINEAR_LEQ:
        if any(not d for d in doms):
            return 0.0
        mx = sum(max(w * u for u in d) for w, d in zip(p.weights, doms))
        if mx <= p.bound:
            return 0.0
        mn = sum(min(w * u for u in d) for w, d in zip(p.weights, doms))
        if mn > p.bound:
            return 1.0
        mean = sum(w * (sum(d) / len(d)) for w, d in zip(p.weights, doms))
        return float(np.clip((mean - p.bound) / (mx - p.bound), 0.0, 1.0))
    raise ValueError(f"unknown kind {p.kind}")


def featurize(state: SolverState, step_window: int = 8,
              activity: Optional[dict] = None) -> StateGraph:
    n_var = len(state.variables)
    n_con = len(state.propagators)
    max_deg = max((v.degree for v in state.variables), default=0) or 1
    max_arity = max((len(p.scope) for p in state.propagators), default=0) or 1

    var_feats = np.zeros((n_var, VAR_FEATS))
    for v in state.variables:
        cap = v.domain.capacity
        var_feats[v.id, 0] = v.domain.size() / cap if cap else 0.0
        var_feats[v.id, 1] = v.degree / max_deg
        var_feats[v.id, 2] = min(v.recent_changes(state.step, step_window), step_window) / step_window

    kind_idx = {k: i for i, k in enumerate(engine.KINDS)}
    con_feats = np.zeros((n_con, CON_FEATS))
    edges = []
    for p in state.propagators:
        con_feats[p.id, kind_idx[p.kind]] = 1.0
        con_feats[p.id, 6] = len(p.scope) / max_arity
        con_feats[p.id, 7] = violation_magnitude(state, p)
        if activity:
            s = float(activity.get(p.id, 0.0))
            con_feats[p.id, 8] = s / (1.0 + s)
        con_feats[p.id, 9] = 1.0 if p.id in state.dirty_set else 0.0
        for v in p.scope:
            edges.append((v, p.id))

    dirty_mask = np.zeros(n_con, dtype=bool)
    for cid in state.dirty_set:
        dirty_mask[cid] = True
    edge_arr = np.array(edges, dtype=np.int64) if edges else np.zeros((0, 2), dtype=np.int64)
    return StateGraph(var_feats=var_feats, con_feats=con_feats, edges=edge_arr,
                      dirty_mask=dirty_mask, dirty_ids=tuple(sorted(state.dirty_set)))
