"""On-policy training for the scheduling policy.

Episodes are rollouts of the policy scheduler over generated instances.
Advantages come from generalized advantage estimation; updates use the
clipped-surrogate objective

    L = -E[min(r A, clip(r, 1-eps, 1+eps) A)] + c_v E[(V - ret)^2] - c_e E[H]

optimized with Adam over several epochs per collected batch (the batch is
then discarded; there is no replay).  Meta-training wraps the same gradient
machinery in a first-order inner/outer loop: adapt per task with plain
gradient steps, then move the initialization against the sum of post-
adaptation query gradients.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from . import engine
from .engine import SolverState, run_to_fixpoint
from .features import StateGraph, featurize, CON_FEATS, VAR_FEATS
from .policy import PolicyParams, policy_forward, save_checkpoint
from .schedulers import PolicyScheduler, GreedyScheduler


class EmptyTrajectory(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    """Loss or gradients stopped being finite; aborts with diagnostics."""


@dataclass
class Transition:
    graph: StateGraph
    action: int
    reward: float
    log_prob: float
    value: float
    done: bool
    forward_seed: int = 0


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    c_v: float = 0.5
    c_e: float = 0.01
    lr: float = 3e-4
    ppo_epochs: int = 10
    batch_size: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    advantage_norm: bool = True

    def __post_init__(self) -> None:
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must be in (0, 1]")
        if not (0 <= self.lam <= 1):
            raise ValueError("lambda must be in [0, 1]")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")


@dataclass
class MetaConfig:
    inner_steps: int = 5
    inner_lr: float = 1e-3
    meta_lr: float = 3e-4
    tasks_per_batch: int = 4
    first_order: bool = True
    support_episodes: int = 4
    query_episodes: int = 4

    def __post_init__(self) -> None:
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.inner_lr < 0 or self.meta_lr <= 0:
            raise ValueError("learning rates must be positive")


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


def default_budget(state: SolverState) -> int:
    return 4 * max(1, len(state.propagators))


def collect_episodes(params: PolicyParams, make_instance: Callable,
                     n_episodes: int, budget: Optional[int] = None,
                     seed: int = 0, sample: bool = True) -> list:
    """Roll the policy scheduler over fresh instances; deterministic in seed.

    ``make_instance(seed) -> SolverState`` supplies the task.  Episodes close
    with done=True at fixpoint, failure, or budget exhaustion; an instance
    that is already at fixpoint yields an empty trajectory.
    """
    seeds = np.random.SeedSequence(seed).spawn(n_episodes)
    trajectories = []
    for i in range(n_episodes):
        child = seeds[i].generate_state(2)
        state = make_instance(int(child[0]))
        sched = PolicyScheduler(params, sample=sample, seed=int(child[1]), record=True)
        trace = run_to_fixpoint(state, sched,
                                budget=budget if budget is not None else default_budget(state))
        traj = []
        for rec, step in zip(sched.records, trace.steps):
            traj.append(Transition(graph=rec["graph"], action=rec["action"],
                                   reward=step.reward, log_prob=rec["log_prob"],
                                   value=rec["value"], done=False,
                                   forward_seed=rec["forward_seed"]))
        if traj:
            traj[-1].done = True
        trajectories.append(traj)
    return trajectories


def compute_gae(traj: list, gamma: float, lam: float) -> tuple:
    """Advantages via exponentially weighted TD residuals, plus returns.

    delta_t = r_t + gamma * V_{t+1} - V_t, with a zero bootstrap after the
    final (done) transition; A_t = sum_k (gamma*lam)^k delta_{t+k};
    returns_t = A_t + V_t.
    """
    if not traj:
        raise EmptyTrajectory("cannot compute advantages of an empty trajectory")
    T = len(traj)
    adv = np.zeros(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        v_next = 0.0 if traj[t].done else traj[t + 1].value
        delta = traj[t].reward + gamma * v_next - traj[t].value
        running = delta + gamma * lam * (0.0 if traj[t].done else running)
        adv[t] = running
    values = np.array([tr.value for tr in traj])
    return adv, adv + values


def flatten_with_gae(trajectories: list, cfg: TrainConfig) -> list:
    """(transition, advantage, return) triples for every non-empty episode."""
    batch = []
    for traj in trajectories:
        if not traj:
            continue
        adv, ret = compute_gae(traj, cfg.gamma, cfg.lam)
        batch.extend((tr, float(a), float(r)) for tr, a, r in zip(traj, adv, ret))
    return batch


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(tensors: dict) -> AdamState:
    return AdamState(m={k: np.zeros_like(x) for k, x in tensors.items()},
                     v={k: np.zeros_like(x) for k, x in tensors.items()})


def adam_step(tensors: dict, grads: dict, state: AdamState, lr: float,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
    state.t += 1
    t = state.t
    for k in tensors:
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1 ** t)
        vhat = state.v[k] / (1 - b2 ** t)
        tensors[k] = tensors[k] - lr * mhat / (np.sqrt(vhat) + eps)


def sgd_step(tensors: dict, grads: dict, lr: float) -> dict:
    return {k: tensors[k] - lr * grads[k] for k in tensors}


# ---------------------------------------------------------------------------
# clipped-surrogate gradients
# ---------------------------------------------------------------------------


def clipped_surrogate(ratio: float, adv: float, eps: float) -> float:
    return min(ratio * adv, float(np.clip(ratio, 1 - eps, 1 + eps)) * adv)


def policy_loss_grads(params: PolicyParams, items: list, cfg: TrainConfig,
                      clip_eps: Optional[float] = None) -> tuple:
    """Gradients of the full objective over ``items`` = [(transition, A, ret)].

    Per-transition tapes are seeded analytically at (log_probs, value,
    entropy) and summed; returns (grads, stats).
    """
    eps = cfg.clip_eps if clip_eps is None else clip_eps
    m = len(items)
    total = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    loss = 0.0
    ratios = []
    clip_hits = 0
    vloss = 0.0
    ent = 0.0
    for tr, adv, ret in items:
        out, tape = policy_forward(params, tr.graph, train_mode=True, seed=tr.forward_seed)
        idx = out.dirty_ids.index(tr.action)
        log_probs = tape.value(tape.outputs["log_probs"])
        logp_new = float(log_probs[idx])
        ratio = float(np.exp(logp_new - tr.log_prob))
        surr1 = ratio * adv
        surr2 = float(np.clip(ratio, 1 - eps, 1 + eps)) * adv
        g_logp = np.zeros(len(out.dirty_ids))
        if surr1 <= surr2:
            g_logp[idx] = -adv * ratio / m
        vdiff = out.value - ret
        seeds = {
            "log_probs": g_logp,
            "value": np.array(2.0 * cfg.c_v * vdiff / m),
            "entropy": np.array(-cfg.c_e / m),
        }
        grads = tape.backward(seeds)
        for k in total:
            total[k] += grads[k]
        loss += (-min(surr1, surr2) + cfg.c_v * vdiff ** 2 - cfg.c_e * out.entropy) / m
        ratios.append(ratio)
        clip_hits += abs(ratio - 1.0) > eps
        vloss += vdiff ** 2 / m
        ent += out.entropy / m
    if not np.isfinite(loss) or any(not np.isfinite(g).all() for g in total.values()):
        raise NonFiniteLoss(f"non-finite loss/gradient (loss={loss}, "
                            f"ratios min={min(ratios)}, max={max(ratios)})")
    stats = {"loss": loss, "ratio_mean": float(np.mean(ratios)),
             "clip_frac": clip_hits / m, "value_loss": vloss, "entropy": ent}
    return total, stats


def ppo_update(params: PolicyParams, batch: list, cfg: TrainConfig,
               opt_state: Optional[AdamState] = None) -> tuple:
    """Several epochs of minibatch Adam on one collected batch.

    ``batch`` is [(transition, advantage, return)]; advantages are
    normalized to zero mean / unit variance across the batch first.
    Returns (new params, optimizer state, stats).
    """
    if not batch:
        raise ValueError("ppo_update needs a non-empty batch")
    advs = np.array([a for _, a, _ in batch])
    if cfg.advantage_norm:
        advs = (advs - advs.mean()) / (advs.std() + 1e-8)
    items = [(tr, float(advs[i]), ret) for i, (tr, _, ret) in enumerate(batch)]
    params = params.copy()
    if opt_state is None:
        opt_state = adam_init(params.tensors)
    rng = np.random.default_rng(cfg.seed)
    mb = max(1, len(items) // 4)
    collected = []
    for _ in range(cfg.ppo_epochs):
        perm = rng.permutation(len(items))
        for s in range(0, len(items), mb):
            chunk = [items[int(i)] for i in perm[s:s + mb]]
            grads, st = policy_loss_grads(params, chunk, cfg)
            adam_step(params.tensors, grads, opt_state, cfg.lr,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            collected.append(st)
    stats = {k: float(np.mean([c[k] for c in collected])) for k in collected[0]}
    stats["advantage_norm"] = cfg.advantage_norm
    return params, opt_state, stats


# ---------------------------------------------------------------------------
# training drivers
# ---------------------------------------------------------------------------


def collect_batch(params: PolicyParams, make_instance: Callable, cfg: TrainConfig,
                  seed: int, budget: Optional[int] = None) -> tuple:
    """Keep rolling episodes until at least ``cfg.batch_size`` transitions."""
    trajectories: list = []
    total = 0
    attempt = 0
    while total < cfg.batch_size and attempt < 8 * cfg.batch_size + 8:
        trajs = collect_episodes(params, make_instance, n_episodes=1,
                                 budget=budget, seed=seed * 1_000_003 + attempt,
                                 sample=True)
        attempt += 1
        trajectories.extend(trajs)
        total += sum(len(t) for t in trajs)
    return trajectories, flatten_with_gae(trajectories, cfg)


def train_ppo(params: PolicyParams, make_instance: Callable, cfg: TrainConfig,
              n_updates: int, seed: int = 0, out_dir=None,
              budget: Optional[int] = None, save_interval: int = 0,
              progress: Optional[Callable] = None) -> tuple:
    """PPO loop over one task family; returns (params, per-update history)."""
    opt_state = None
    history = []
    writer = None
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as cfh:
            json.dump({"train": asdict(cfg), "policy": asdict(params.config),
                       "updates": n_updates, "seed": seed}, cfh, indent=2, sort_keys=True)
        fh = open(os.path.join(out_dir, "updates.csv"), "w", newline="", encoding="utf-8")
        fh.write("# schema: train-updates-v1\n")
        writer = csv.writer(fh)
        writer.writerow(["update", "mean_reward", "clip_frac", "entropy", "value_loss"])
    try:
        for u in range(n_updates):
            trajs, batch = collect_batch(params, make_instance, cfg,
                                         seed=seed + 7919 * u, budget=budget)
            if not batch:
                history.append({"update": u, "mean_reward": 0.0, "clip_frac": 0.0,
                                "entropy": 0.0, "value_loss": 0.0})
                continue
            params, opt_state, stats = ppo_update(params, batch, cfg, opt_state)
            ep_rewards = [sum(tr.reward for tr in t) for t in trajs if t]
            row = {"update": u,
                   "mean_reward": float(np.mean(ep_rewards)) if ep_rewards else 0.0,
                   "clip_frac": stats["clip_frac"], "entropy": stats["entropy"],
                   "value_loss": stats["value_loss"]}
            history.append(row)
            if writer is not None:
                writer.writerow([row["update"], row["mean_reward"], row["clip_frac"],
                                 row["entropy"], row["value_loss"]])
            if out_dir is not None and save_interval and (u + 1) % save_interval == 0:
                save_checkpoint(params, os.path.join(out_dir, f"ckpt_{u + 1:04d}.json"))
            if progress is not None:
                progress(row)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(params, os.path.join(out_dir, "final.json"))
    return params, history


def eval_policy(params: PolicyParams, make_instance: Callable, n_episodes: int,
                seed: int = 0, budget: Optional[int] = None) -> dict:
    """Deterministic greedy-action evaluation over fixed instance seeds."""
    rewards = []
    costs = []
    for i in range(n_episodes):
        state = make_instance(seed + i)
        sched = PolicyScheduler(params, sample=False)
        trace = run_to_fixpoint(state, sched,
                                budget=budget if budget is not None else default_budget(state))
        rewards.append(trace.total_reward)
        costs.append(trace.total_cost)
    return {
        "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
        "median_reward": float(statistics.median(rewards)) if rewards else 0.0,
        "mean_cost": float(np.mean(costs)) if costs else 0.0,
        "median_cost": float(statistics.median(costs)) if costs else 0.0,
    }


# ---------------------------------------------------------------------------
# meta-learning
# ---------------------------------------------------------------------------


def fomaml_meta_step(theta: dict, tasks: list, support_grad_fn: Callable,
                     query_grad_fn: Callable, inner_steps: int,
                     inner_lr: float, meta_lr: float) -> tuple:
    """First-order meta step over raw tensor dicts.

    Per task: phi = theta stepped ``inner_steps`` times against
    support_grad_fn; the meta-gradient is the sum of query_grad_fn(phi, task)
    evaluated at the adapted parameters and applied directly to theta.
    Returns (new theta, per-task info).
    """
    meta_grad = {k: np.zeros_like(v) for k, v in theta.items()}
    info = []
    for task in tasks:
        phi = {k: v.copy() for k, v in theta.items()}
        for _ in range(inner_steps):
            phi = sgd_step(phi, support_grad_fn(phi, task), inner_lr)
        qg = query_grad_fn(phi, task)
        for k in meta_grad:
            meta_grad[k] += qg[k]
        info.append({"adapted": phi, "query_grad": qg})
    return sgd_step(theta, meta_grad, meta_lr), info


def maml_meta_step(params: PolicyParams, task_samplers: list, meta_cfg: MetaConfig,
                   train_cfg: TrainConfig, seed: int = 0) -> tuple:
    """One outer meta-iteration of task-adaptive training.

    For each task: collect support episodes under the current initialization,
    take ``inner_steps`` plain gradient steps of the clipped objective on
    that support batch, collect query episodes under the adapted parameters,
    and accumulate the query gradient.  First-order: the query gradient is
    applied to the initialization as-is.
    """
    theta = params.copy()
    rng = np.random.default_rng(seed)

    def support_grads(phi_tensors: dict, task_ctx: tuple) -> dict:
        sampler, batch = task_ctx
        phi = PolicyParams(theta.config, phi_tensors)
        grads, _ = policy_loss_grads(phi, batch, train_cfg)
        return grads

    def query_grads(phi_tensors: dict, task_ctx: tuple) -> dict:
        sampler, _batch = task_ctx
        phi = PolicyParams(theta.config, phi_tensors)
        q_trajs = collect_episodes(phi, sampler, meta_cfg.query_episodes,
                                   seed=int(rng.integers(0, 2**31)))
        q_batch = flatten_with_gae(q_trajs, train_cfg)
        if not q_batch:
            return {k: np.zeros_like(v) for k, v in phi_tensors.items()}
        grads, _ = policy_loss_grads(phi, q_batch, train_cfg)
        return grads

    tasks = []
    for sampler in task_samplers:
        s_trajs = collect_episodes(theta, sampler, meta_cfg.support_episodes,
                                   seed=int(rng.integers(0, 2**31)))
        tasks.append((sampler, flatten_with_gae(s_trajs, train_cfg)))
    new_tensors, _ = fomaml_meta_step(theta.tensors,
                                      [t for t in tasks if t[1]],
                                      support_grads, query_grads,
                                      meta_cfg.inner_steps, meta_cfg.inner_lr,
                                      meta_cfg.meta_lr)
    return PolicyParams(theta.config, new_tensors), {}


def adapt(params: PolicyParams, make_instance: Callable, steps: int,
          train_cfg: TrainConfig, seed: int = 0, inner_lr: float = 1e-3,
          support_episodes: int = 8, eval_episodes: int = 16,
          budget: Optional[int] = None) -> tuple:
    """Few-step adaptation to one task; reports pre/post episode rewards.

    Evaluation uses the same fixed instance seeds before and after, so
    steps=0 (or a zero learning rate) reproduces the pre metrics exactly.
    """
    eval_seed = seed + 900_001
    pre = eval_policy(params, make_instance, eval_episodes, seed=eval_seed, budget=budget)
    adapted = params.copy()
    if steps > 0 and inner_lr > 0:
        trajs = collect_episodes(adapted, make_instance, support_episodes,
                                 seed=seed, budget=budget)
        batch = flatten_with_gae(trajs, train_cfg)
        if batch:
            for _ in range(steps):
                grads, _ = policy_loss_grads(adapted, batch, train_cfg)
                adapted = PolicyParams(adapted.config,
                                       sgd_step(adapted.tensors, grads, inner_lr))
    post = eval_policy(adapted, make_instance, eval_episodes, seed=eval_seed, budget=budget)
    return adapted, {"pre": pre, "post": post}


# ---------------------------------------------------------------------------
# imitation baseline
# ---------------------------------------------------------------------------


def collect_greedy_labels(make_instance: Callable, n_states: int, seed: int = 0,
                          budget: Optional[int] = None) -> list:
    """(graph, best action) pairs along greedy-lookahead runs."""
    labeled = []
    inst_seed = seed
    while len(labeled) < n_states:
        state = make_instance(inst_seed)
        inst_seed += 1
        sched = GreedyScheduler()
        cap = budget if budget is not None else default_budget(state)
        steps = 0
        while state.status == engine.RUNNING and steps < cap and len(labeled) < n_states:
            graph = featurize(state)
            cid = sched.select(state)
            labeled.append((graph, cid))
            out = engine.propagate(state, cid)
            sched.notify(cid, out)
            steps += 1
    return labeled


def imitation_grads(params: PolicyParams, labeled: list) -> tuple:
    """Cross-entropy gradient of the score softmax against action labels."""
    m = len(labeled)
    total = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    loss = 0.0
    hits = 0
    for graph, label in labeled:
        out, tape = policy_forward(params, graph)
        idx = out.dirty_ids.index(label)
        g = np.zeros(len(out.dirty_ids))
        g[idx] = -1.0 / m
        grads = tape.backward({"log_probs": g})
        for k in total:
            total[k] += grads[k]
        loss += -float(np.log(out.probs[idx])) / m
        hits += int(np.argmax(out.logits)) == idx
    return total, {"loss": loss, "accuracy": hits / m}


def imitation_train(params: PolicyParams, labeled: list, epochs: int,
                    lr: float = 3e-4, seed: int = 0) -> tuple:
    """Full-batch Adam on the cross-entropy; returns (params, loss history)."""
    params = params.copy()
    opt = adam_init(params.tensors)
    cfg = TrainConfig(seed=seed)
    history = []
    for _ in range(epochs):
        grads, stats = imitation_grads(params, labeled)
        adam_step(params.tensors, grads, opt, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        history.append(stats)
    return params, history


def imitation_agreement(params: PolicyParams, labeled: list) -> float:
    hits = 0
    for graph, label in labeled:
        out, _ = policy_forward(params, graph)
        hits += out.dirty_ids[int(np.argmax(out.logits))] == label
    return hits / len(labeled) if labeled else 0.0


# ---------------------------------------------------------------------------
# two-armed synthetic environment: one action always pays, the other never
# ---------------------------------------------------------------------------


class TwoArmedToy:
    """Fixed two-constraint graph whose first action yields reward 1 and the
    second reward 0, for optimizer convergence checks.  (The propagation
    engine itself is monotone, so it cannot host an unbounded bandit.)"""

    def __init__(self, ep_len: int = 8) -> None:
        self.ep_len = ep_len
        var_feats = np.array([[0.5, 1.0, 0.0]])
        con_feats = np.zeros((2, CON_FEATS))
        con_feats[0, 3] = 1.0   # distinct kind one-hots so the arms are
        con_feats[1, 2] = 1.0   # distinguishable by the network
        con_feats[:, 6] = 1.0
        con_feats[:, 9] = 1.0
        self._graph = StateGraph(
            var_feats=var_feats, con_feats=con_feats,
            edges=np.array([[0, 0], [0, 1]], dtype=np.int64),
            dirty_mask=np.array([True, True]),
            dirty_ids=(0, 1),
        )

    def graph(self) -> StateGraph:
        return self._graph

    @staticmethod
    def reward(action: int) -> float:
        return 1.0 if action == 0 else 0.0


def collect_toy_episodes(params: PolicyParams, toy: TwoArmedToy, n_episodes: int,
                         seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    trajectories = []
    for _ in range(n_episodes):
        traj = []
        for t in range(toy.ep_len):
            fwd_seed = int(rng.integers(0, 2**31))
            out, _ = policy_forward(params, toy.graph(), train_mode=True, seed=fwd_seed)
            idx = int(rng.choice(2, p=out.probs / out.probs.sum()))
            action = out.dirty_ids[idx]
            traj.append(Transition(graph=toy.graph(), action=action,
                                   reward=toy.reward(action),
                                   log_prob=float(np.log(out.probs[idx])),
                                   value=out.value, done=t == toy.ep_len - 1,
                                   forward_seed=fwd_seed))
        trajectories.append(traj)
    return trajectories
