"""Attention-network scheduling policy over the variable/constraint graph.

The network embeds both node roles into a shared hidden space, runs several
rounds of multi-head attention message passing over the bipartite incidence
structure (plus self-loops), then scores each constraint node with a linear
head and estimates a state value from mean-pooled node embeddings.  Action
probabilities are a softmax over the *dirty* constraints only.

Per-head attention from node j into node i:

    e_ij   = LeakyReLU(a^T [W h_i || W h_j])
    alpha_ij = softmax_j(e_ij)   over j in N(i)
    h_i'   = sigma(sum_j alpha_ij W h_j)

Hidden layers concatenate head outputs; the last layer averages them.  The
forward pass records a tape so training code gets exact reverse-mode
gradients of any scalar loss in the (log_probs, value, entropy) outputs.

An MLP ablation variant scores each constraint from its own projected
features plus a global mean-pooled vector, with no message passing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .autodiff import Tape
from .features import StateGraph, VAR_FEATS, CON_FEATS

CHECKPOINT_FORMAT = "propsched-policy-v1"


class NoNeighbors(ValueError):
    """Attention over an empty neighborhood is undefined."""


class EmptyDirtyMask(ValueError):
    """The policy needs at least one dirty constraint to score."""


class CheckpointError(ValueError):
    """Unreadable, mistagged, or shape-inconsistent checkpoint."""


@dataclass
class PolicyConfig:
    arch: str = "gat"            # "gat" | "mlp"
    layers: int = 3
    hidden: int = 32
    heads: int = 4
    dropout: float = 0.1
    window: int = 8              # change-history window used at featurize time
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        if self.arch not in ("gat", "mlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class PolicyParams:
    config: PolicyConfig
    tensors: dict = field(default_factory=dict)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class PolicyOutput:
    dirty_ids: tuple
    logits: np.ndarray        # per dirty constraint, ascending id order
    probs: np.ndarray
    entropy: float
    value: float
    attention: Optional[list] = None   # per (layer, head) alpha arrays when recorded


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-s, s, size=shape)


def init_params(config: PolicyConfig, seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    h = config.hidden
    t: dict = {}
    t["in_var.W"] = _uniform(rng, (VAR_FEATS, h), VAR_FEATS)
    t["in_var.b"] = np.zeros(h)
    t["in_con.W"] = _uniform(rng, (CON_FEATS, h), CON_FEATS)
    t["in_con.b"] = np.zeros(h)
    if config.arch == "gat":
        for l in range(config.layers):
            dh = h if l == config.layers - 1 else h // config.heads
            for k in range(config.heads):
                t[f"layer{l}.head{k}.W"] = _uniform(rng, (h, dh), h)
                t[f"layer{l}.head{k}.a"] = _uniform(rng, (2 * dh,), 2 * dh)
    else:
        t["mlp.W1"] = _uniform(rng, (2 * h, h), 2 * h)
        t["mlp.b1"] = np.zeros(h)
    t["score.w"] = _uniform(rng, (h,), h)
    t["score.b"] = np.zeros(())
    t["value.w"] = _uniform(rng, (h,), h)
    t["value.b"] = np.zeros(())
    return PolicyParams(config=config, tensors=t)


def attention_coefficients(W: np.ndarray, a: np.ndarray, h_i: np.ndarray,
                           neighbors: list, slope: float = 0.2) -> np.ndarray:
    """Single-head attention weights of node i over its neighbors.

    Reference implementation used directly by tests; the tape forward uses
    an edge-vectorized equivalent.
    """
    if len(neighbors) == 0:
        raise NoNeighbors("node has no neighbors to attend over")
    wi = W.T @ h_i if W.shape[0] == h_i.shape[0] else W @ h_i
    pre = []
    for h_j in neighbors:
        wj = W.T @ h_j if W.shape[0] == h_j.shape[0] else W @ h_j
        z = np.concatenate([wi, wj])
        e = float(a @ z)
        pre.append(e if e > 0 else slope * e)
    pre_arr = np.array(pre)
    ex = np.exp(pre_arr - pre_arr.max())
    return ex / ex.sum()


def _edge_arrays(graph: StateGraph) -> tuple:
    """Directed message edges: both bipartite directions plus self-loops."""
    nv, nc = graph.n_var, graph.n_con
    n = nv + nc
    src: list = []
    dst: list = []
    for v, c in graph.edges:
        cn = nv + c
        src.append(v)
        dst.append(cn)
        src.append(cn)
        dst.append(v)
    src.extend(range(n))
    dst.extend(range(n))
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), n


def _project_inputs(t: Tape, params: PolicyParams, graph: StateGraph) -> int:
    hv = t.add(t.matmul(t.const(graph.var_feats), t.param("in_var.W", params.tensors["in_var.W"])),
               t.param("in_var.b", params.tensors["in_var.b"]))
    hc = t.add(t.matmul(t.const(graph.con_feats), t.param("in_con.W", params.tensors["in_con.W"])),
               t.param("in_con.b", params.tensors["in_con.b"]))
    return t.concat_rows(hv, hc)


def _heads_and_outputs(t: Tape, params: PolicyParams, graph: StateGraph, h_ref: int) -> tuple:
    """Shared scoring/value heads: returns (output refs dict, PolicyOutput)."""
    nv, nc = graph.n_var, graph.n_con
    con_rows = t.gather_rows(h_ref, np.arange(nv, nv + nc))
    scores = t.add(t.matvec(con_rows, t.param("score.w", params.tensors["score.w"])),
                   t.param("score.b", params.tensors["score.b"]))
    dirty_pos = np.array(graph.dirty_ids, dtype=np.int64)
    logits = t.gather1d(scores, dirty_pos)
    shift = t.const(t.value(logits).max())
    lse = t.add(t.log(t.sum(t.exp(t.sub(logits, shift)))), shift)
    log_probs = t.sub(logits, lse)
    probs = t.exp(log_probs)
    entropy = t.neg(t.dot(probs, log_probs))
    pooled = t.mean_rows(h_ref)
    value = t.add(t.dot(pooled, t.param("value.w", params.tensors["value.w"])),
                  t.param("value.b", params.tensors["value.b"]))
    t.mark_output("logits", logits)
    t.mark_output("log_probs", log_probs)
    t.mark_output("entropy", entropy)
    t.mark_output("value", value)
    return {"logits": logits, "log_probs": log_probs, "entropy": entropy, "value": value}


def forward(params: PolicyParams, graph: StateGraph, train_mode: bool = False,
            seed: int = 0, record_attention: bool = False) -> tuple:
    """Run the attention network; returns (PolicyOutput, Tape)."""
    cfg = params.config
    if cfg.arch != "gat":
        raise ValueError("forward requires gat params; use mlp_ablation_forward")
    if not graph.dirty_ids:
        raise EmptyDirtyMask("no dirty constraint to schedule")
    t = Tape()
    rng = np.random.default_rng(seed)
    src, dst, n = _edge_arrays(graph)
    h = _project_inputs(t, params, graph)
    attn_log: list = []
    for l in range(cfg.layers):
        if train_mode and cfg.dropout > 0:
            h = t.dropout(h, cfg.dropout, rng)
        last = l == cfg.layers - 1
        head_outs = []
        for k in range(cfg.heads):
            W = t.param(f"layer{l}.head{k}.W", params.tensors[f"layer{l}.head{k}.W"])
            a = t.param(f"layer{l}.head{k}.a", params.tensors[f"layer{l}.head{k}.a"])
            dh = params.tensors[f"layer{l}.head{k}.W"].shape[1]
            wh = t.matmul(h, W)
            a_dst = t.slice1d(a, 0, dh)      # pairs with h_i (the aggregating node)
            a_src = t.slice1d(a, dh, 2 * dh)
            s_dst = t.matvec(wh, a_dst)
            s_src = t.matvec(wh, a_src)
            pre = t.add(t.gather1d(s_dst, dst), t.gather1d(s_src, src))
            e = t.leaky_relu(pre, cfg.leaky_slope)
            alpha = t.segment_softmax(e, dst, n)
            if record_attention:
                attn_log.append((l, k, t.value(alpha).copy(), dst.copy()))
            msg = t.scale_rows(t.gather_rows(wh, src), alpha)
            agg = t.segment_sum(msg, dst, n)
            head_outs.append(t.elu(agg))
        if last:
            acc = head_outs[0]
            for ho in head_outs[1:]:
                acc = t.add(acc, ho)
            h = t.scale(acc, 1.0 / cfg.heads)
        else:
            h = t.concat_cols(head_outs)
    refs = _heads_and_outputs(t, params, graph, h)
    out = PolicyOutput(
        dirty_ids=graph.dirty_ids,
        logits=t.value(refs["logits"]).copy(),
        probs=np.exp(t.value(refs["log_probs"])),
        entropy=float(t.value(refs["entropy"])),
        value=float(t.value(refs["value"])),
        attention=attn_log if record_attention else None,
    )
    return out, t


def mlp_ablation_forward(params: PolicyParams, graph: StateGraph, train_mode: bool = False,
                         seed: int = 0) -> tuple:
    """Structure-blind ablation: per-constraint features + global mean pool."""
    cfg = params.config
    if cfg.arch != "mlp":
        raise ValueError("mlp_ablation_forward requires mlp params")
    if not graph.dirty_ids:
        raise EmptyDirtyMask("no dirty constraint to schedule")
    t = Tape()
    rng = np.random.default_rng(seed)
    h = t.elu(_project_inputs(t, params, graph))
    if train_mode and cfg.dropout > 0:
        h = t.dropout(h, cfg.dropout, rng)
    nv, nc = graph.n_var, graph.n_con
    pooled = t.mean_rows(h)
    con_rows = t.gather_rows(h, np.arange(nv, nv + nc))
    x = t.concat_cols([con_rows, t.broadcast_row(pooled, nc)])
    hid = t.elu(t.add(t.matmul(x, t.param("mlp.W1", params.tensors["mlp.W1"])),
                      t.param("mlp.b1", params.tensors["mlp.b1"])))
    # reuse the shared heads on a node matrix whose constraint rows are `hid`
    # and whose pooled value input is the raw pooled embedding
    scores = t.add(t.matvec(hid, t.param("score.w", params.tensors["score.w"])),
                   t.param("score.b", params.tensors["score.b"]))
    dirty_pos = np.array(graph.dirty_ids, dtype=np.int64)
    logits = t.gather1d(scores, dirty_pos)
    shift = t.const(t.value(logits).max())
    lse = t.add(t.log(t.sum(t.exp(t.sub(logits, shift)))), shift)
    log_probs = t.sub(logits, lse)
    probs = t.exp(log_probs)
    entropy = t.neg(t.dot(probs, log_probs))
    value = t.add(t.dot(pooled, t.param("value.w", params.tensors["value.w"])),
                  t.param("value.b", params.tensors["value.b"]))
    t.mark_output("logits", logits)
    t.mark_output("log_probs", log_probs)
    t.mark_output("entropy", entropy)
    t.mark_output("value", value)
    out = PolicyOutput(
        dirty_ids=graph.dirty_ids,
        logits=t.value(logits).copy(),
        probs=np.exp(t.value(log_probs)),
        entropy=float(t.value(entropy)),
        value=float(t.value(value)),
    )
    return out, t


def policy_forward(params: PolicyParams, graph: StateGraph, train_mode: bool = False,
                   seed: int = 0) -> tuple:
    """Dispatch on the params' architecture."""
    if params.config.arch == "gat":
        return forward(params, graph, train_mode=train_mode, seed=seed)
    return mlp_ablation_forward(params, graph, train_mode=train_mode, seed=seed)


def backward(tape: Tape, seeds: dict) -> dict:
    """Exact gradients of the seeded scalar loss w.r.t. every parameter."""
    return tape.backward(seeds)


def choose_action(output: PolicyOutput, sample: bool = False,
                  rng: Optional[np.random.Generator] = None) -> int:
    """Constraint id with max probability (eval) or sampled (train)."""
    if sample:
        idx = int(rng.choice(len(output.dirty_ids), p=output.probs / output.probs.sum()))
    else:
        idx = int(np.argmax(output.logits))
    return output.dirty_ids[idx]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: PolicyParams, path) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(params.config),
        "tensors": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in sorted(params.tensors.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)


def load_checkpoint(path) -> PolicyParams:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {blob.get('format')!r}")
    try:
        config = PolicyConfig(**blob["config"])
    except (TypeError, ValueError, KeyError) as e:
        raise CheckpointError(f"bad config in checkpoint: {e}") from e
    tensors = {}
    for name, spec in blob.get("tensors", {}).items():
        arr = np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        tensors[name] = arr
    params = PolicyParams(config=config, tensors=tensors)
    ref = init_params(config, seed=0)
    if set(ref.tensors) != set(tensors):
        raise CheckpointError("checkpoint tensors do not match the declared config")
    for name in ref.tensors:
        if ref.tensors[name].shape != tensors[name].shape:
            raise CheckpointError(f"tensor {name} has shape {tensors[name].shape}, "
                                  f"expected {ref.tensors[name].shape}")
    return params


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def random_small_graph(rng: np.random.Generator, max_nodes: int = 10) -> StateGraph:
    n_var = int(rng.integers(1, 4))
    n_con = int(rng.integers(1, max(2, max_nodes - n_var)))
    var_feats = rng.random((n_var, VAR_FEATS))
    con_feats = rng.random((n_con, CON_FEATS))
    edges = []
    for c in range(n_con):
        k = int(rng.integers(1, min(3, n_var) + 1))
        for v in rng.choice(n_var, size=k, replace=False):
            edges.append((int(v), c))
    n_dirty = int(rng.integers(1, n_con + 1))
    dirty = sorted(int(i) for i in rng.choice(n_con, size=n_dirty, replace=False))
    mask = np.zeros(n_con, dtype=bool)
    mask[dirty] = True
    con_feats[:, 9] = mask.astype(float)
    return StateGraph(var_feats=var_feats, con_feats=con_feats,
                      edges=np.array(edges, dtype=np.int64),
                      dirty_mask=mask, dirty_ids=tuple(dirty))


def _mixed_scalar(params: PolicyParams, graph: StateGraph, weights: dict) -> float:
    out, _ = policy_forward(params, graph)
    return float(weights["logits"] @ out.logits
                 + weights["log_probs"] @ np.log(out.probs)
                 + weights["entropy"] * out.entropy
                 + weights["value"] * out.value)


def finite_difference_check(params: PolicyParams, graph: StateGraph,
                            seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The checked scalar is a random fixed combination of every network output
    (dirty logits, log-probs, entropy, value), so one sweep covers all heads.
    """
    rng = np.random.default_rng(seed)
    nd = len(graph.dirty_ids)
    weights = {
        "logits": rng.normal(size=nd),
        "log_probs": rng.normal(size=nd),
        "entropy": float(rng.normal()),
        "value": float(rng.normal()),
    }
    out, tape = policy_forward(params, graph)
    seeds = {
        "logits": weights["logits"],
        "log_probs": weights["log_probs"],
        "entropy": np.array(weights["entropy"]),
        "value": np.array(weights["value"]),
    }
    grads = tape.backward(seeds)
    max_rel = 0.0
    for name, arr in params.tensors.items():
        g = grads[name]
        flat = arr.ravel()
        gflat = np.asarray(g).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _mixed_scalar(params, graph, weights)
            flat[i] = orig - h
            dn = _mixed_scalar(params, graph, weights)
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            rel = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]), abs(fd))
            if rel > max_rel:
                max_rel = rel
    return max_rel


def gradcheck_suite(n_configs: int = 20, seed: int = 0, arch: str = "gat") -> float:
    """Finite-difference sweep over random small configurations."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_configs):
        layers = int(rng.integers(1, 4))
        cfg = PolicyConfig(arch=arch, layers=layers, hidden=8, heads=2, dropout=0.0)
        params = init_params(cfg, seed=int(rng.integers(0, 2**31)))
        graph = random_small_graph(rng)
        err = finite_difference_check(params, graph, seed=int(rng.integers(0, 2**31)))
        worst = max(worst, err)
    return worst
