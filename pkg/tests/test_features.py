import numpy as np
import pytest

from propsched import engine, tasks
from propsched.engine import ConstraintSpec, InstanceSpec, build_instance, propagate
from propsched.features import featurize, violation_magnitude, CON_FEATS, VAR_FEATS


def test_var_feature_layout():
    # var 0: |D|=4 of capacity 8, degree 2 while the max degree is 4
    spec = InstanceSpec(
        mode=engine.PRUNING,
        variables=((0, 8), (1, 8), (2, 8), (3, 8), (4, 8), (5, 8)),
        constraints=(
            ConstraintSpec(id=0, kind=engine.NOT_EQUAL, scope=(0, 1)),
            ConstraintSpec(id=1, kind=engine.NOT_EQUAL, scope=(0, 2)),
            ConstraintSpec(id=2, kind=engine.NOT_EQUAL, scope=(1, 3)),
            ConstraintSpec(id=3, kind=engine.NOT_EQUAL, scope=(1, 4)),
            ConstraintSpec(id=4, kind=engine.NOT_EQUAL, scope=(1, 5)),
        ),
    )
    state = build_instance(spec)
    state.variables[0].domain.values = {0, 1, 2, 3}
    graph = featurize(state)
    assert graph.var_feats.shape == (6, VAR_FEATS)
    assert graph.var_feats[0].tolist() == [0.5, 0.5, 0.0]


def test_grammar_rule_violation_feature():
    g, words = tasks.toy_grammar()
    sent = [words[w] for w in "the dog saw the cat".split()]
    state = build_instance(tasks.build_parse_instance(g, sent))
    nt = g.names["nonterminals"]
    x01 = tasks.span_index(5, 0, 1)
    x12 = tasks.span_index(5, 1, 2)
    state.variables[x01].domain.values = {nt["D"]}
    state.variables[x12].domain.values = {nt["N"]}
    rule = next(p for p in state.propagators
                if p.kind == engine.GRAMMAR_RULE and p.lhs == nt["NP"]
                and p.span == (0, 1, 2))
    assert violation_magnitude(state, rule) == 1.0
    propagate(state, rule.id)
    assert violation_magnitude(state, rule) == 0.0


def test_empty_dirty_set_clears_flags():
    spec = tasks.gen_random_csp(4, 3, 1.0, 0.0, seed=0)
    state = build_instance(spec)
    while state.status == engine.RUNNING:
        propagate(state, state.dirty_list[0])
    graph = featurize(state)
    assert not graph.dirty_mask.any()
    assert graph.dirty_ids == ()
    assert (graph.con_feats[:, 9] == 0).all()


def test_edges_mirror_scopes_and_kind_one_hot():
    spec = tasks.gen_coloring(5, 0.6, 3, seed=1, pin_first=True)[0]
    state = build_instance(spec)
    graph = featurize(state)
    want = {(v, p.id) for p in state.propagators for v in p.scope}
    assert {tuple(e) for e in graph.edges} == want
    assert graph.con_feats.shape == (len(state.propagators), CON_FEATS)
    kind_idx = {k: i for i, k in enumerate(engine.KINDS)}
    for p in state.propagators:
        onehot = graph.con_feats[p.id, :6]
        assert onehot.sum() == 1.0
        assert onehot[kind_idx[p.kind]] == 1.0


def test_activity_feature_squash():
    spec = tasks.gen_coloring(4, 0.7, 3, seed=2)[0]
    state = build_instance(spec)
    graph = featurize(state, activity={0: 3.0})
    assert graph.con_feats[0, 8] == pytest.approx(0.75)
    assert graph.con_feats[1, 8] == 0.0
    # absent table: zeros
    graph = featurize(state)
    assert (graph.con_feats[:, 8] == 0).all()


def test_pruning_violation_fractions():
    # disequality: shared-value collision fraction
    spec = InstanceSpec(
        mode=engine.PRUNING, variables=((0, 4), (1, 4)),
        constraints=(ConstraintSpec(id=0, kind=engine.NOT_EQUAL, scope=(0, 1)),))
    state = build_instance(spec)
    state.variables[0].domain.values = {0, 1}
    state.variables[1].domain.values = {1, 2}
    p = state.propagators[0]
    assert violation_magnitude(state, p) == pytest.approx(1 / 4)

    # table: forbidden fraction of the current product
    spec = InstanceSpec(
        mode=engine.PRUNING, variables=((0, 2), (1, 2)),
        constraints=(ConstraintSpec(id=0, kind=engine.BINARY_TABLE, scope=(0, 1),
                                    allowed=((0, 0), (1, 1))),))
    state = build_instance(spec)
    assert violation_magnitude(state, state.propagators[0]) == pytest.approx(0.5)

    # linear: impossible bound saturates at 1, slack bound at 0
    spec = InstanceSpec(
        mode=engine.PRUNING, variables=((0, 2), (1, 2)),
        constraints=(ConstraintSpec(id=0, kind=engine.LINEAR_LEQ, scope=(0, 1),
                                    weights=(1.0, 1.0), bound=100.0),))
    state = build_instance(spec)
    assert violation_magnitude(state, state.propagators[0]) == 0.0


def test_recent_change_feature_counts_window():
    g, words = tasks.toy_grammar()
    sent = [words[w] for w in "the dog".split()]
    state = build_instance(tasks.build_parse_instance(g, sent))
    lex = next(p for p in state.propagators if p.kind == engine.LEXICAL)
    target = lex.scope[0]
    propagate(state, lex.id)
    graph = featurize(state, step_window=8)
    assert graph.var_feats[target, 2] == pytest.approx(1 / 8)
