"""Constraint propagation engine with explicit dirty-set bookkeeping.

The engine owns problem instances as a set of finite-domain variables plus
propagators, and exposes single-constraint stepping so that the *order* of
propagation is an external policy choice.  Two modes exist:

* ``pruning``  -- classical CP filtering; domains start full and only shrink.
  An empty domain marks the instance FAILED.
* ``derivation`` -- chart-parsing style; domains start empty and only grow
  (labels are derived, never retracted).  Derivation instances never fail.

A constraint is *dirty* when some variable in its scope has changed since the
constraint was last applied (constraints that have never been applied are
dirty too, including right after construction).  ``propagate`` applies one
constraint to its own local fixpoint, charges a deterministic operation-count
cost, and re-dirties every constraint touching a changed variable --
including the applied constraint itself if its own scope changed.

All propagators are monotone and idempotent, so the terminal fixpoint is
unique regardless of schedule; only the accumulated cost is schedule
dependent.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

PRUNING = "pruning"
DERIVATION = "derivation"

RUNNING = "running"
FIXPOINT = "fixpoint"
FAILED = "failed"
BUDGET = "budget"

GRAMMAR_RULE = "grammar_rule"
LEXICAL = "lexical"
BINARY_TABLE = "binary_table"
NOT_EQUAL = "not_equal"
ALL_DIFFERENT = "all_different"
LINEAR_LEQ = "linear_leq"

#: canonical kind order, also used for feature one-hots
KINDS = (GRAMMAR_RULE, LEXICAL, BINARY_TABLE, NOT_EQUAL, ALL_DIFFERENT, LINEAR_LEQ)

DERIVATION_KINDS = frozenset({GRAMMAR_RULE, LEXICAL})

#: length of the per-variable change history ring
HISTORY_LEN = 8


class MalformedSpec(ValueError):
    """Instance description is structurally invalid."""


class UnknownConstraint(ValueError):
    """Constraint id out of range."""


class NotDirty(RuntimeError):
    """Attempt to propagate a constraint that is not in the dirty set."""


class Halted(RuntimeError):
    """Attempt to step a state that is no longer RUNNING."""


# ---------------------------------------------------------------------------
# core data types
# ---------------------------------------------------------------------------


@dataclass
class Domain:
    """Finite set of non-negative value ids with a fixed capacity.

    ``values`` shrinks monotonically in pruning mode and grows monotonically
    in derivation mode; ``capacity`` is an exclusive upper bound on value ids.
    """

    values: set[int]
    capacity: int

    def size(self) -> int:
        return len(self.values)

    def copy(self) -> "Domain":
        return Domain(set(self.values), self.capacity)


@dataclass
class Variable:
    id: int
    domain: Domain
    degree: int = 0
    # step indices of the most recent domain changes, strictly increasing
    change_history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_LEN))

    def note_change(self, step: int) -> None:
        if not self.change_history or self.change_history[-1] != step:
            self.change_history.append(step)

    def recent_changes(self, now: int, window: int) -> int:
        lo = now - window
        return sum(1 for s in self.change_history if s >= lo)


@dataclass
class Propagator:
    """One constraint: scope, kind-specific rule data, and its cost constant.

    The cost constant is 1 for grammar rules, binary tables and disequality,
    0.5 for lexical lookups, and the arity for all-different and linear
    inequalities.
    """

    id: int
    kind: str
    scope: tuple[int, ...]
    k_const: float
    mode: str
    lhs: Optional[int] = None                 # grammar_rule / lexical label
    rhs: Optional[tuple[int, int]] = None     # grammar_rule children (B, C)
    span: Optional[tuple[int, int, int]] = None   # grammar_rule (i, k, j)
    position: Optional[int] = None            # lexical token position
    allowed: Optional[frozenset] = None       # binary_table pairs
    weights: Optional[tuple[float, ...]] = None   # linear_leq
    bound: Optional[float] = None
    # support maps precomputed for binary tables
    sup_x: Optional[dict] = None
    sup_y: Optional[dict] = None


@dataclass
class RewardConfig:
    """Per-step reward = alpha * domain_change - beta * cost."""

    alpha: float = 1.0
    beta: float = 0.1

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class NoiseConfig:
    """Optional stochastic-propagator hook: after a propagation, with
    probability ``p`` drop one uniformly chosen value from one uniformly
    chosen non-singleton scope domain (pruning mode only).  Diagnostics
    feature; off by default."""

    p: float
    seed: int


@dataclass
class StepOutcome:
    delta_d: int
    cost: float
    newly_dirty: tuple[int, ...]
    reward: float
    failed: bool = False


@dataclass
class SolverState:
    mode: str
    variables: list
    propagators: list
    dirty_list: list            # insertion-ordered dirty constraint ids
    dirty_set: set
    var_cons: list              # var id -> incident constraint ids
    step: int = 0
    cum_cost: float = 0.0
    status: str = RUNNING
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)
    noise: Optional[NoiseConfig] = None
    noise_rng: Optional[random.Random] = None
    meta: dict = field(default_factory=dict)

    @property
    def dirty(self) -> tuple[int, ...]:
        return tuple(self.dirty_list)

    def domain(self, var_id: int) -> set:
        return self.variables[var_id].domain.values

    def domain_sizes(self) -> list:
        return [v.domain.size() for v in self.variables]


@dataclass
class Snapshot:
    domains: tuple
    histories: tuple
    dirty: tuple
    step: int
    cum_cost: float
    status: str
    noise_state: object = None


@dataclass
class TraceStep:
    cid: int
    delta_d: int
    cost: float
    reward: float


@dataclass
class RunTrace:
    steps: list
    outcome: str

    @property
    def total_cost(self) -> float:
        return sum(s.cost for s in self.steps)

    @property
    def total_delta(self) -> int:
        return sum(s.delta_d for s in self.steps)

    @property
    def total_reward(self) -> float:
        return sum(s.reward for s in self.steps)

    def schedule(self) -> list:
        return [s.cid for s in self.steps]


# ---------------------------------------------------------------------------
# instance specification and JSON round-trip
# ---------------------------------------------------------------------------

_K_CONST = {
    GRAMMAR_RULE: lambda scope: 1.0,
    LEXICAL: lambda scope: 0.5,
    BINARY_TABLE: lambda scope: 1.0,
    NOT_EQUAL: lambda scope: 1.0,
    ALL_DIFFERENT: lambda scope: float(len(scope)),
    LINEAR_LEQ: lambda scope: float(len(scope)),
}

_ARITY = {GRAMMAR_RULE: 3, LEXICAL: 1, BINARY_TABLE: 2, NOT_EQUAL: 2}


@dataclass
class ConstraintSpec:
    id: int
    kind: str
    scope: tuple
    lhs: Optional[int] = None
    rhs: Optional[tuple] = None
    span: Optional[tuple] = None
    position: Optional[int] = None
    allowed: Optional[tuple] = None
    weights: Optional[tuple] = None
    bound: Optional[float] = None

    def to_dict(self) -> dict:
        d: dict = {"id": self.id, "kind": self.kind, "scope": list(self.scope)}
        if self.kind == GRAMMAR_RULE:
            d["lhs"] = self.lhs
            d["rhs"] = list(self.rhs)
            if self.span is not None:
                d["span"] = list(self.span)
        elif self.kind == LEXICAL:
            d["label"] = self.lhs
            if self.position is not None:
                d["position"] = self.position
        elif self.kind == BINARY_TABLE:
            d["allowed"] = [list(p) for p in self.allowed]
        elif self.kind == LINEAR_LEQ:
            d["weights"] = list(self.weights)
            d["bound"] = self.bound
        return d

    @staticmethod
    def from_dict(d: dict) -> "ConstraintSpec":
        kind = d.get("kind")
        scope = tuple(d.get("scope", ()))
        cs = ConstraintSpec(id=d.get("id", -1), kind=kind, scope=scope)
        if kind == GRAMMAR_RULE:
            cs.lhs = d.get("lhs")
            cs.rhs = tuple(d.get("rhs", ()))
            cs.span = tuple(d["span"]) if "span" in d else None
        elif kind == LEXICAL:
            cs.lhs = d.get("label")
            cs.position = d.get("position")
        elif kind == BINARY_TABLE:
            cs.allowed = tuple(sorted(tuple(p) for p in d.get("allowed", [])))
        elif kind == LINEAR_LEQ:
            cs.weights = tuple(d.get("weights", ()))
            cs.bound = d.get("bound")
        return cs


@dataclass
class InstanceSpec:
    """Validated instance description; serializes canonically to JSON."""

    mode: str
    variables: tuple          # ((id, capacity), ...)
    constraints: tuple        # ConstraintSpec tuple
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "variables": [{"id": i, "capacity": c} for i, c in self.variables],
            "constraints": [c.to_dict() for c in self.constraints],
        }
        if self.meta:
            d["meta"] = self.meta
        return d

    def dumps(self) -> str:
        # canonical form: sorted keys, no whitespace; round-trips byte-identically
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @staticmethod
    def from_dict(d: dict) -> "InstanceSpec":
        if not isinstance(d, dict):
            raise MalformedSpec("instance must be a JSON object")
        mode = d.get("mode")
        variables = tuple(
            (v.get("id"), v.get("capacity")) for v in d.get("variables", [])
        )
        constraints = tuple(ConstraintSpec.from_dict(c) for c in d.get("constraints", []))
        return InstanceSpec(mode=mode, variables=variables,
                            constraints=constraints, meta=d.get("meta", {}))

    @staticmethod
    def loads(s: str) -> "InstanceSpec":
        try:
            return InstanceSpec.from_dict(json.loads(s))
        except json.JSONDecodeError as e:
            raise MalformedSpec(f"invalid JSON: {e}") from e

    @staticmethod
    def load(path) -> "InstanceSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return InstanceSpec.loads(fh.read())


def _validate_spec(spec: InstanceSpec) -> None:
    if spec.mode not in (PRUNING, DERIVATION):
        raise MalformedSpec(f"unknown mode {spec.mode!r}")
    n = len(spec.variables)
    for idx, (vid, cap) in enumerate(spec.variables):
        if vid != idx:
            raise MalformedSpec(f"variable ids must be dense 0..{n - 1}, got {vid} at {idx}")
        if not isinstance(cap, int) or cap < 0:
            raise MalformedSpec(f"variable {vid}: bad capacity {cap!r}")
    caps = [cap for _, cap in spec.variables]
    for idx, cs in enumerate(spec.constraints):
        if cs.id != idx:
            raise MalformedSpec(f"constraint ids must be dense, got {cs.id} at {idx}")
        if cs.kind not in KINDS:
            raise MalformedSpec(f"constraint {idx}: unknown kind {cs.kind!r}")
        want_mode = DERIVATION if cs.kind in DERIVATION_KINDS else PRUNING
        if want_mode != spec.mode:
            raise MalformedSpec(f"constraint {idx}: kind {cs.kind} requires {want_mode} mode")
        for v in cs.scope:
            if not isinstance(v, int) or not (0 <= v < n):
                raise MalformedSpec(f"constraint {idx}: scope var {v!r} out of range")
        if len(set(cs.scope)) != len(cs.scope):
            raise MalformedSpec(f"constraint {idx}: repeated variable in scope")
        arity = _ARITY.get(cs.kind)
        if arity is not None and len(cs.scope) != arity:
            raise MalformedSpec(f"constraint {idx}: {cs.kind} needs arity {arity}")
        if cs.kind == ALL_DIFFERENT and len(cs.scope) < 2:
            raise MalformedSpec(f"constraint {idx}: all_different needs >= 2 variables")
        if cs.kind == LINEAR_LEQ and len(cs.scope) < 1:
            raise MalformedSpec(f"constraint {idx}: linear_leq needs >= 1 variable")
        if cs.kind == GRAMMAR_RULE:
            ik, kj, ij = cs.scope
            if cs.lhs is None or cs.rhs is None or len(cs.rhs) != 2:
                raise MalformedSpec(f"constraint {idx}: grammar_rule needs lhs and rhs=[B,C]")
            if not (0 <= cs.lhs < caps[ij] and 0 <= cs.rhs[0] < caps[ik] and 0 <= cs.rhs[1] < caps[kj]):
                raise MalformedSpec(f"constraint {idx}: label id >= capacity")
        elif cs.kind == LEXICAL:
            if cs.lhs is None or not (0 <= cs.lhs < caps[cs.scope[0]]):
                raise MalformedSpec(f"constraint {idx}: label id >= capacity")
        elif cs.kind == BINARY_TABLE:
            if cs.allowed is None:
                raise MalformedSpec(f"constraint {idx}: binary_table needs allowed pairs")
            cx, cy = caps[cs.scope[0]], caps[cs.scope[1]]
            for a, b in cs.allowed:
                if not (0 <= a < cx and 0 <= b < cy):
                    raise MalformedSpec(f"constraint {idx}: allowed pair ({a},{b}) out of range")
        elif cs.kind == LINEAR_LEQ:
            if cs.weights is None or cs.bound is None:
                raise MalformedSpec(f"constraint {idx}: linear_leq needs weights and bound")
            if len(cs.weights) != len(cs.scope):
                raise MalformedSpec(
                    f"constraint {idx}: {len(cs.weights)} weights for {len(cs.scope)} variables")


def build_instance(spec: InstanceSpec,
                   reward: Optional[RewardConfig] = None,
                   noise: Optional[NoiseConfig] = None) -> SolverState:
    """Materialize a solver state; all constraints start dirty in insertion order."""
    _validate_spec(spec)
    variables = []
    for vid, cap in spec.variables:
        values = set(range(cap)) if spec.mode == PRUNING else set()
        variables.append(Variable(id=vid, domain=Domain(values, cap)))
    props = []
    var_cons: list = [[] for _ in spec.variables]
    for cs in spec.constraints:
        p = Propagator(
            id=cs.id, kind=cs.kind, scope=tuple(cs.scope),
            k_const=_K_CONST[cs.kind](cs.scope),
            mode=DERIVATION if cs.kind in DERIVATION_KINDS else PRUNING,
            lhs=cs.lhs, rhs=cs.rhs, span=cs.span, position=cs.position,
            allowed=frozenset(cs.allowed) if cs.allowed is not None else None,
            weights=cs.weights, bound=cs.bound,
        )
        if p.kind == BINARY_TABLE:
            sup_x: dict = {}
            sup_y: dict = {}
            for a, b in p.allowed:
                sup_x.setdefault(a, set()).add(b)
                sup_y.setdefault(b, set()).add(a)
            p.sup_x, p.sup_y = sup_x, sup_y
        props.append(p)
        for v in p.scope:
            var_cons[v].append(p.id)
    for v in variables:
        v.degree = len(var_cons[v.id])
    state = SolverState(
        mode=spec.mode,
        variables=variables,
        propagators=props,
        dirty_list=[p.id for p in props],
        dirty_set={p.id for p in props},
        var_cons=var_cons,
        reward_cfg=reward or RewardConfig(),
        noise=noise,
        noise_rng=random.Random(noise.seed) if noise is not None else None,
        meta=dict(spec.meta),
    )
    _refresh_status(state)
    return state


def _refresh_status(state: SolverState) -> None:
    if state.mode == PRUNING and any(v.domain.size() == 0 for v in state.variables):
        state.status = FAILED
    elif not state.dirty_list:
        state.status = FIXPOINT
    else:
        state.status = RUNNING


# ---------------------------------------------------------------------------
# propagator rules: each applies one constraint to its own local fixpoint and
# returns {var_id: change magnitude}; mutates domains in place
# ---------------------------------------------------------------------------


def _apply_grammar_rule(p: Propagator, doms: list) -> dict:
    ik, kj, ij = p.scope
    b, c = p.rhs
    if b in doms[ik] and c in doms[kj] and p.lhs not in doms[ij]:
        doms[ij].add(p.lhs)
        return {ij: 1}
    return {}


def _apply_lexical(p: Propagator, doms: list) -> dict:
    (v,) = p.scope
    if p.lhs not in doms[v]:
        doms[v].add(p.lhs)
        return {v: 1}
    return {}


def _apply_binary_table(p: Propagator, doms: list) -> dict:
    x, y = p.scope
    changed: dict = {}
    while True:
        dx, dy = doms[x], doms[y]
        drop_x = [a for a in dx if not (p.sup_x.get(a, ()) and not dy.isdisjoint(p.sup_x[a]))]
        if drop_x:
            dx.difference_update(drop_x)
            changed[x] = changed.get(x, 0) + len(drop_x)
        drop_y = [b for b in dy if not (p.sup_y.get(b, ()) and not dx.isdisjoint(p.sup_y[b]))]
        if drop_y:
            dy.difference_update(drop_y)
            changed[y] = changed.get(y, 0) + len(drop_y)
        if not drop_x and not drop_y:
            return changed


def _apply_not_equal(p: Propagator, doms: list) -> dict:
    x, y = p.scope
    changed: dict = {}
    while True:
        moved = False
        for a, b in ((x, y), (y, x)):
            if len(doms[a]) == 1:
                v = next(iter(doms[a]))
                if v in doms[b]:
                    doms[b].discard(v)
                    changed[b] = changed.get(b, 0) + 1
                    moved = True
        if not moved:
            return changed


def _apply_all_different(p: Propagator, doms: list) -> dict:
    changed: dict = {}
    while True:
        moved = False
        for a in p.scope:
            if len(doms[a]) == 1:
                v = next(iter(doms[a]))
                for b in p.scope:
                    if b != a and v in doms[b]:
                        doms[b].discard(v)
                        changed[b] = changed.get(b, 0) + 1
                        moved = True
        if not moved:
            return changed


def _apply_linear_leq(p: Propagator, doms: list) -> dict:
    changed: dict = {}
    while True:
        if any(not doms[v] for v in p.scope):
            return changed
        mins = [min(w * u for u in doms[v]) for v, w in zip(p.scope, p.weights)]
        total_min = sum(mins)
        moved = False
        for i, (v, w) in enumerate(zip(p.scope, p.weights)):
            rest = total_min - mins[i]
            drop = [u for u in doms[v] if w * u + rest > p.bound]
            if drop:
                doms[v].difference_update(drop)
                changed[v] = changed.get(v, 0) + len(drop)
                moved = True
        if not moved:
            return changed


_APPLY: dict = {
    GRAMMAR_RULE: _apply_grammar_rule,
    LEXICAL: _apply_lexical,
    BINARY_TABLE: _apply_binary_table,
    NOT_EQUAL: _apply_not_equal,
    ALL_DIFFERENT: _apply_all_different,
    LINEAR_LEQ: _apply_linear_leq,
}


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def step_cost(state: SolverState, cid: int) -> float:
    """Operation-count proxy: k_const * sum of current scope domain sizes."""
    if not (0 <= cid < len(state.propagators)):
        raise UnknownConstraint(f"constraint {cid} out of range")
    p = state.propagators[cid]
    return p.k_const * float(sum(state.variables[v].domain.size() for v in p.scope))


def reward(outcome: StepOutcome, cfg: RewardConfig) -> float:
    return cfg.alpha * outcome.delta_d - cfg.beta * outcome.cost


def propagate(state: SolverState, cid: int) -> StepOutcome:
    """Apply one dirty constraint to its local fixpoint and update bookkeeping."""
    if state.status != RUNNING:
        raise Halted(f"state is {state.status}, not running")
    if not (0 <= cid < len(state.propagators)):
        raise UnknownConstraint(f"constraint {cid} out of range")
    if cid not in state.dirty_set:
        raise NotDirty(f"constraint {cid} is not dirty")
    p = state.propagators[cid]
    cost = step_cost(state, cid)
    state.dirty_list.remove(cid)
    state.dirty_set.discard(cid)

    doms = [v.domain.values for v in state.variables]
    changed = _APPLY[p.kind](p, doms)

    if (state.noise is not None and state.mode == PRUNING
            and state.noise_rng.random() < state.noise.p):
        cands = [v for v in p.scope if len(doms[v]) > 1]
        if cands:
            u = state.noise_rng.choice(sorted(cands))
            val = state.noise_rng.choice(sorted(doms[u]))
            doms[u].discard(val)
            changed[u] = changed.get(u, 0) + 1

    t = state.step
    newly: list = []
    if changed:
        affected: set = set()
        for var_id in sorted(changed):
            state.variables[var_id].note_change(t)
            affected.update(state.var_cons[var_id])
        for c in sorted(affected):
            if c not in state.dirty_set:
                state.dirty_set.add(c)
                state.dirty_list.append(c)
                newly.append(c)

    delta = sum(changed.values())
    failed = state.mode == PRUNING and any(not doms[v] for v in p.scope)
    r = state.reward_cfg.alpha * delta - state.reward_cfg.beta * cost
    state.cum_cost += cost
    state.step += 1
    if failed:
        state.status = FAILED
    elif not state.dirty_list:
        state.status = FIXPOINT
    return StepOutcome(delta_d=delta, cost=cost, newly_dirty=tuple(newly),
                       reward=r, failed=failed)


def snapshot(state: SolverState) -> Snapshot:
    return Snapshot(
        domains=tuple(frozenset(v.domain.values) for v in state.variables),
        histories=tuple(tuple(v.change_history) for v in state.variables),
        dirty=tuple(state.dirty_list),
        step=state.step,
        cum_cost=state.cum_cost,
        status=state.status,
        noise_state=state.noise_rng.getstate() if state.noise_rng is not None else None,
    )


def restore(state: SolverState, snap: Snapshot) -> None:
    for v, dom, hist in zip(state.variables, snap.domains, snap.histories):
        v.domain.values = set(dom)
        v.change_history = deque(hist, maxlen=HISTORY_LEN)
    state.dirty_list = list(snap.dirty)
    state.dirty_set = set(snap.dirty)
    state.step = snap.step
    state.cum_cost = snap.cum_cost
    state.status = snap.status
    if snap.noise_state is not None:
        state.noise_rng.setstate(snap.noise_state)


def lookahead_outcome(state: SolverState, cid: int) -> StepOutcome:
    """Outcome of propagating ``cid`` without changing the state.

    Used by greedy one-step lookahead and by diagnostics that probe
    constraints not currently dirty; the state is restored bit-identically.
    """
    snap = snapshot(state)
    try:
        if cid not in state.dirty_set:
            state.dirty_set.add(cid)
            state.dirty_list.append(cid)
        if state.status != RUNNING:
            state.status = RUNNING
        return propagate(state, cid)
    finally:
        restore(state, snap)


def run_to_fixpoint(state: SolverState, scheduler, budget: Optional[int] = None) -> RunTrace:
    """Drive the state with ``scheduler`` until fixpoint, failure, or budget."""
    steps: list = []
    while state.status == RUNNING and (budget is None or len(steps) < budget):
        cid = scheduler.select(state)
        out = propagate(state, cid)
        scheduler.notify(cid, out)
        steps.append(TraceStep(cid=cid, delta_d=out.delta_d, cost=out.cost, reward=out.reward))
    outcome = state.status if state.status != RUNNING else BUDGET
    return RunTrace(steps=steps, outcome=outcome)
