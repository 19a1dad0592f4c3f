"""Instance generators: chart-parse tasks, knapsack, graph coloring, and
random binary CSPs, plus the brute-force oracles used to validate them.

All generators are pure functions of (parameters, seed): identical inputs
produce byte-identical instance files.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from . import engine
from .engine import (ConstraintSpec, InstanceSpec, SolverState, RewardConfig,
                     build_instance, run_to_fixpoint)
from .schedulers import FifoScheduler


class UnknownToken(ValueError):
    """Sentence token not covered by the grammar's terminal alphabet."""


class GrammarError(ValueError):
    pass


# ---------------------------------------------------------------------------
# grammars and parse instances
# ---------------------------------------------------------------------------


@dataclass
class Grammar:
    """Binary-branching grammar: A -> B C rules plus A -> w lexical rules.

    Symbols are dense integer ids; ``start`` names the root label.
    """

    n_nonterminals: int
    n_terminals: int
    binary_rules: tuple        # ((A, B, C), ...)
    lexical_rules: tuple       # ((A, w), ...)
    start: int = 0
    names: dict = field(default_factory=dict)   # optional readable names

    def __post_init__(self) -> None:
        if not (0 <= self.start < self.n_nonterminals):
            raise GrammarError("start symbol out of range")
        for a, b, c in self.binary_rules:
            if not all(0 <= s < self.n_nonterminals for s in (a, b, c)):
                raise GrammarError(f"rule ({a},{b},{c}) references unknown nonterminal")
        for a, w in self.lexical_rules:
            if not (0 <= a < self.n_nonterminals) or not (0 <= w < self.n_terminals):
                raise GrammarError(f"lexical rule ({a},{w}) references unknown symbol")

    def to_dict(self) -> dict:
        return {
            "nonterminals": self.n_nonterminals,
            "terminals": self.n_terminals,
            "rules": {
                "binary": [list(r) for r in self.binary_rules],
                "lexical": [list(r) for r in self.lexical_rules],
            },
            "start": self.start,
        }

    @staticmethod
    def from_dict(d: dict) -> "Grammar":
        return Grammar(
            n_nonterminals=d["nonterminals"],
            n_terminals=d["terminals"],
            binary_rules=tuple(tuple(r) for r in d["rules"]["binary"]),
            lexical_rules=tuple(tuple(r) for r in d["rules"]["lexical"]),
            start=d.get("start", 0),
        )


def toy_grammar() -> tuple:
    """The running example: S->NP VP, NP->D N, VP->V NP over a 4-word lexicon.

    Returns (grammar, token name -> id map).
    """
    nt = {"S": 0, "NP": 1, "VP": 2, "D": 3, "N": 4, "V": 5}
    words = {"the": 0, "dog": 1, "cat": 2, "saw": 3}
    g = Grammar(
        n_nonterminals=6,
        n_terminals=4,
        binary_rules=((nt["S"], nt["NP"], nt["VP"]),
                      (nt["NP"], nt["D"], nt["N"]),
                      (nt["VP"], nt["V"], nt["NP"])),
        lexical_rules=((nt["D"], words["the"]),
                       (nt["N"], words["dog"]),
                       (nt["N"], words["cat"]),
                       (nt["V"], words["saw"])),
        start=nt["S"],
        names={"nonterminals": nt, "words": words},
    )
    return g, words


def spans(n: int) -> list:
    """All (i, j) with 0 <= i < j <= n, lexicographic."""
    return [(i, j) for i in range(n) for j in range(i + 1, n + 1)]


def span_index(n: int, i: int, j: int) -> int:
    # offset of row i is sum_{r<i} (n - r)
    return i * n - (i * (i - 1)) // 2 + (j - i - 1)


def build_parse_instance(grammar: Grammar, tokens: Sequence[int]) -> InstanceSpec:
    """Derivation-mode chart: one variable per span, one lexical constraint per
    matching (rule, position), one rule constraint per (rule, i, k, j)."""
    n = len(tokens)
    if not (2 <= n <= 20):
        raise ValueError(f"sentence length {n} outside [2, 20]")
    for w in tokens:
        if not (0 <= w < grammar.n_terminals):
            raise UnknownToken(f"token {w} not in the terminal alphabet")
    variables = tuple((idx, grammar.n_nonterminals) for idx in range(len(spans(n))))
    constraints = []
    for i, w in enumerate(tokens):
        for a, wr in grammar.lexical_rules:
            if wr == w:
                constraints.append(ConstraintSpec(
                    id=len(constraints), kind=engine.LEXICAL,
                    scope=(span_index(n, i, i + 1),), lhs=a, position=i))
    for a, b, c in grammar.binary_rules:
        for i in range(n):
            for k in range(i + 1, n):
                for j in range(k + 1, n + 1):
                    constraints.append(ConstraintSpec(
                        id=len(constraints), kind=engine.GRAMMAR_RULE,
                        scope=(span_index(n, i, k), span_index(n, k, j), span_index(n, i, j)),
                        lhs=a, rhs=(b, c), span=(i, k, j)))
    meta = {
        "family": "parse",
        "sentence": list(tokens),
        "grammar": grammar.to_dict(),
        "start_var": span_index(n, 0, n),
        "start_symbol": grammar.start,
        "n": n,
    }
    return InstanceSpec(mode=engine.DERIVATION, variables=variables,
                        constraints=tuple(constraints), meta=meta)


def sample_grammar(seed: int, n_nonterminals: Optional[int] = None,
                   n_binary_rules: Optional[int] = None,
                   n_terminals: Optional[int] = None,
                   require_lengths: tuple = (2, 8)) -> Grammar:
    """Random binary-branching grammar with uniform rule right-hand sides.

    Every nonterminal gets at least one lexical rule so top-down sentence
    sampling always terminates, and candidates are redrawn (deterministically)
    until the start symbol derives a sentence with length in
    ``require_lengths``.
    """
    lo, hi = require_lengths
    rng = random.Random(seed)
    for _ in range(500):
        nn = n_nonterminals if n_nonterminals is not None else rng.randint(4, 10)
        nt = n_terminals if n_terminals is not None else max(3, nn - 1)
        nr = n_binary_rules if n_binary_rules is not None else rng.randint(6, 20)
        rules = set()
        guard = 0
        while len(rules) < nr and guard < 50 * nr:
            guard += 1
            rules.add((rng.randrange(nn), rng.randrange(nn), rng.randrange(nn)))
        lex = set()
        for a in range(nn):
            for _ in range(rng.randint(1, 2)):
                lex.add((a, rng.randrange(nt)))
        g = Grammar(n_nonterminals=nn, n_terminals=nt,
                    binary_rules=tuple(sorted(rules)),
                    lexical_rules=tuple(sorted(lex)), start=0)
        feas = _feasible_lengths(g, hi)
        if any(lo <= l <= hi for l in feas[g.start]):
            return g
    raise GrammarError(f"no usable grammar after 500 draws from seed {seed}")


def _feasible_lengths(grammar: Grammar, max_len: int) -> dict:
    feas: dict = {a: set() for a in range(grammar.n_nonterminals)}
    has_lex = {a for a, _ in grammar.lexical_rules}
    for a in has_lex:
        feas[a].add(1)
    changed = True
    while changed:
        changed = False
        for a, b, c in grammar.binary_rules:
            for lb in tuple(feas[b]):
                for lc in tuple(feas[c]):
                    tot = lb + lc
                    if tot <= max_len and tot not in feas[a]:
                        feas[a].add(tot)
                        changed = True
    return feas


def sample_sentence(grammar: Grammar, length_range: tuple, seed: int,
                    noise: bool = False) -> list:
    """Sample token ids by expanding a random derivation from the start symbol,
    so the result is guaranteed parseable (unless ``noise`` corrupts a token)."""
    lo, hi = length_range
    rng = random.Random(seed)
    feas = _feasible_lengths(grammar, hi)
    lengths = sorted(l for l in feas[grammar.start] if lo <= l <= hi)
    if not lengths:
        raise GrammarError(f"start symbol derives no sentence of length in {length_range}")
    target = rng.choice(lengths)
    lex_by_nt: dict = {}
    for a, w in grammar.lexical_rules:
        lex_by_nt.setdefault(a, []).append(w)

    def derive(sym: int, n: int) -> list:
        if n == 1:
            return [rng.choice(sorted(lex_by_nt[sym]))]
        options = []
        for a, b, c in grammar.binary_rules:
            if a != sym:
                continue
            for split in range(1, n):
                if split in feas[b] and (n - split) in feas[c]:
                    options.append((b, c, split))
        b, c, split = options[rng.randrange(len(options))]
        return derive(b, split) + derive(c, n - split)

    tokens = derive(grammar.start, target)
    if noise:
        pos = rng.randrange(len(tokens))
        tokens[pos] = rng.randrange(grammar.n_terminals)
    return tokens


def parse_instance_sampler(grammar: Grammar, length_range: tuple = (3, 5),
                           reward: Optional[RewardConfig] = None,
                           noise: bool = False) -> Callable:
    """Instance factory keyed by seed, for episode collection."""

    def make(seed: int) -> SolverState:
        tokens = sample_sentence(grammar, length_range, seed, noise=noise)
        return build_instance(build_parse_instance(grammar, tokens), reward=reward)

    return make


# ---------------------------------------------------------------------------
# knapsack
# ---------------------------------------------------------------------------


def knapsack_instance(weights: Sequence[int], values: Sequence[int], cap: int) -> InstanceSpec:
    n = len(weights)
    variables = tuple((i, 2) for i in range(n))
    constraints = (ConstraintSpec(
        id=0, kind=engine.LINEAR_LEQ, scope=tuple(range(n)),
        weights=tuple(float(w) for w in weights), bound=float(cap)),)
    meta = {"family": "knapsack", "weights": list(weights),
            "values": list(values), "cap": cap}
    return InstanceSpec(mode=engine.PRUNING, variables=variables,
                        constraints=constraints, meta=meta)


def knapsack_optimum(weights: Sequence[int], values: Sequence[int], cap: int) -> tuple:
    """Exhaustive subset enumeration; returns (best value, best take-mask)."""
    n = len(weights)
    if n > 20:
        raise ValueError("enumeration oracle limited to 20 items")
    best_v, best_mask = 0, 0
    for mask in range(1 << n):
        w = v = 0
        for i in range(n):
            if mask >> i & 1:
                w += weights[i]
                v += values[i]
        if w <= cap and v > best_v:
            best_v, best_mask = v, mask
    return best_v, best_mask


def gen_knapsack(n_items: int, seed: int, weight_range: tuple = (1, 9),
                 value_range: tuple = (1, 9), cap_ratio: float = 0.5) -> tuple:
    """Random knapsack plus its enumerated optimum: (InstanceSpec, best value)."""
    rng = random.Random(seed)
    weights = [rng.randint(*weight_range) for _ in range(n_items)]
    values = [rng.randint(*value_range) for _ in range(n_items)]
    cap = int(cap_ratio * sum(weights))
    spec = knapsack_instance(weights, values, cap)
    best, _ = knapsack_optimum(weights, values, cap)
    spec.meta["optimum"] = best
    return spec, best


# ---------------------------------------------------------------------------
# graph coloring
# ---------------------------------------------------------------------------


def coloring_instance(n: int, edges: Sequence, colors: int,
                      pin_first: bool = False) -> InstanceSpec:
    """One variable per vertex, a disequality per edge.  ``pin_first`` adds a
    symmetry-breaking bound forcing vertex 0 to color 0, which lets plain
    propagation expose some infeasibilities it would otherwise miss."""
    variables = tuple((i, colors) for i in range(n))
    constraints = []
    if pin_first and n > 0:
        constraints.append(ConstraintSpec(id=0, kind=engine.LINEAR_LEQ,
                                          scope=(0,), weights=(1.0,), bound=0.0))
    for u, v in edges:
        constraints.append(ConstraintSpec(id=len(constraints), kind=engine.NOT_EQUAL,
                                          scope=(min(u, v), max(u, v))))
    meta = {"family": "coloring", "edges": [list(e) for e in edges], "colors": colors}
    return InstanceSpec(mode=engine.PRUNING, variables=variables,
                        constraints=tuple(constraints), meta=meta)


def coloring_satisfiable(n: int, edges: Sequence, colors: int) -> bool:
    """Complete backtracking search (exhaustive for n <= 12)."""
    if n > 12:
        raise ValueError("exhaustive oracle limited to 12 vertices")
    adj: list = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    assign = [-1] * n

    def bt(i: int) -> bool:
        if i == n:
            return True
        for c in range(colors):
            if all(assign[x] != c for x in adj[i] if assign[x] >= 0):
                assign[i] = c
                if bt(i + 1):
                    return True
                assign[i] = -1
        return False

    return bt(0)


def gen_coloring(n: int, edge_prob: float, colors: int, seed: int,
                 pin_first: bool = False) -> tuple:
    """Random graph instance plus its exact satisfiability: (spec, sat)."""
    rng = random.Random(seed)
    edges = [(u, v) for u in range(n) for v in range(u + 1, n)
             if rng.random() < edge_prob]
    spec = coloring_instance(n, edges, colors, pin_first=pin_first)
    sat = coloring_satisfiable(n, edges, colors)
    spec.meta["satisfiable"] = sat
    return spec, sat


# ---------------------------------------------------------------------------
# random binary CSPs
# ---------------------------------------------------------------------------


def alldiff_instance(n: int, capacity: int, groups: Sequence) -> InstanceSpec:
    """All-different constraints over the given variable groups (pruning mode)."""
    variables = tuple((i, capacity) for i in range(n))
    constraints = tuple(
        ConstraintSpec(id=i, kind=engine.ALL_DIFFERENT, scope=tuple(g))
        for i, g in enumerate(groups))
    return InstanceSpec(mode=engine.PRUNING, variables=variables,
                        constraints=constraints, meta={"family": "alldiff"})


def gen_random_csp(n: int, domain: int, density: float, tightness: float,
                   seed: int) -> InstanceSpec:
    """Binary tables over random variable pairs; each table forbids a uniform
    ``tightness`` fraction of the d*d value pairs."""
    rng = random.Random(seed)
    variables = tuple((i, domain) for i in range(n))
    all_pairs = [(a, b) for a in range(domain) for b in range(domain)]
    constraints = []
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() >= density:
                continue
            n_forbid = int(round(tightness * len(all_pairs)))
            forbidden = set(rng.sample(all_pairs, n_forbid))
            allowed = tuple(sorted(p for p in all_pairs if p not in forbidden))
            constraints.append(ConstraintSpec(id=len(constraints), kind=engine.BINARY_TABLE,
                                              scope=(u, v), allowed=allowed))
    meta = {"family": "random_csp", "domain": domain,
            "density": density, "tightness": tightness}
    return InstanceSpec(mode=engine.PRUNING, variables=variables,
                        constraints=tuple(constraints), meta=meta)


# ---------------------------------------------------------------------------
# references
# ---------------------------------------------------------------------------


def gold_fixpoint(spec: InstanceSpec) -> SolverState:
    """Terminal state under first-in-first-out scheduling with no budget.

    Propagation is confluent, so this is the unique fixpoint (or the failing
    state for infeasible pruning instances).
    """
    state = build_instance(spec)
    run_to_fixpoint(state, FifoScheduler())
    return state


def adversarial_two_choice() -> InstanceSpec:
    """Two-constraint pruning instance where one-step-lookahead greedy pays a
    provably higher total cost than the optimal schedule.

    The wide table over (x, y) has the best immediate change-per-cost ratio,
    but shrinking x first via the narrow table makes the wide one cheaper
    later for the same total pruning.
    """
    cap = 16
    variables = ((0, 1), (1, cap), (2, cap))      # z, x, y
    wide = tuple(sorted((a, 0) for a in range(cap)))
    narrow = tuple(sorted((0, a) for a in range(12)))
    constraints = (
        ConstraintSpec(id=0, kind=engine.BINARY_TABLE, scope=(1, 2), allowed=wide),
        ConstraintSpec(id=1, kind=engine.BINARY_TABLE, scope=(0, 1), allowed=narrow),
    )
    return InstanceSpec(mode=engine.PRUNING, variables=variables,
                        constraints=constraints,
                        meta={"family": "adversarial"})
