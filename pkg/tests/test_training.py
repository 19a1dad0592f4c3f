import math

import numpy as np
import pytest

from propsched import engine, tasks
from propsched.engine import build_instance, run_to_fixpoint
from propsched.policy import PolicyConfig, init_params, policy_forward
from propsched.training import (AdamState, EmptyTrajectory, MetaConfig, TrainConfig,
                                Transition, TwoArmedToy, adam_init, adam_step,
                                adapt, clipped_surrogate, collect_episodes,
                                collect_greedy_labels, collect_toy_episodes,
                                compute_gae, flatten_with_gae, fomaml_meta_step,
                                imitation_agreement, imitation_train,
                                maml_meta_step, policy_loss_grads, ppo_update,
                                train_ppo)


def small_params(seed=0, **kw):
    cfg = dict(layers=1, hidden=8, heads=2, dropout=0.0)
    cfg.update(kw)
    return init_params(PolicyConfig(**cfg), seed=seed)


def parse_sampler():
    g, _ = tasks.toy_grammar()
    return tasks.parse_instance_sampler(g, (3, 5))


def fake_traj(rewards, values, dones=None):
    T = len(rewards)
    dones = dones or [False] * (T - 1) + [True]
    return [Transition(graph=None, action=0, reward=r, log_prob=0.0, value=v,
                       done=d) for r, v, d in zip(rewards, values, dones)]


# ---------------------------------------------------------------------------
# episode collection
# ---------------------------------------------------------------------------


def test_collect_is_deterministic_given_seed():
    params = small_params()
    make = parse_sampler()
    t1 = collect_episodes(params, make, n_episodes=2, seed=42)
    t2 = collect_episodes(params, make, n_episodes=2, seed=42)
    acts1 = [[tr.action for tr in t] for t in t1]
    acts2 = [[tr.action for tr in t] for t in t2]
    rews1 = [[tr.reward for tr in t] for t in t1]
    rews2 = [[tr.reward for tr in t] for t in t2]
    assert acts1 == acts2 and rews1 == rews2


def test_collect_on_fixpoint_instance_gives_empty_trajectory():
    params = small_params()
    spec = tasks.gen_random_csp(3, 3, 0.0, 0.0, seed=0)   # no constraints at all
    make = lambda seed: build_instance(spec)
    (traj,) = collect_episodes(params, make, n_episodes=1, seed=0)
    assert traj == []


def test_collected_rewards_match_engine_replay():
    params = small_params(seed=3)
    make = parse_sampler()
    (traj,) = collect_episodes(params, make, n_episodes=1, seed=11)

    class Replay:
        def __init__(self, actions):
            self.actions = list(actions)

        def select(self, state):
            return self.actions.pop(0)

        def notify(self, cid, outcome):
            pass

    # same instance seed the collector used internally
    child = np.random.SeedSequence(11).spawn(1)[0].generate_state(2)
    state = make(int(child[0]))
    trace = run_to_fixpoint(state, Replay([tr.action for tr in traj]),
                            budget=len(traj))
    assert [s.reward for s in trace.steps] == [tr.reward for tr in traj]
    assert [s.delta_d >= 0 for s in trace.steps]


def test_transition_log_prob_matches_rollout_forward():
    params = small_params(seed=5)
    make = parse_sampler()
    (traj,) = collect_episodes(params, make, n_episodes=1, seed=13)
    tr = traj[0]
    out, _ = policy_forward(params, tr.graph, train_mode=True, seed=tr.forward_seed)
    idx = out.dirty_ids.index(tr.action)
    assert tr.log_prob == pytest.approx(float(np.log(out.probs[idx])), abs=1e-12)


# ---------------------------------------------------------------------------
# generalized advantage estimation
# ---------------------------------------------------------------------------


def gae_bruteforce(rewards, values, gamma, lam):
    T = len(rewards)
    deltas = [rewards[t] + gamma * (values[t + 1] if t + 1 < T else 0.0) - values[t]
              for t in range(T)]
    return [sum((gamma * lam) ** k * deltas[t + k] for k in range(T - t))
            for t in range(T)]


def test_gae_simple_case():
    adv, ret = compute_gae(fake_traj([1.0, 0.0], [0.0, 0.0]), gamma=1.0, lam=1.0)
    assert adv.tolist() == [1.0, 0.0]
    assert ret.tolist() == [1.0, 0.0]


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    rewards = rng.normal(size=6).tolist()
    values = rng.normal(size=6).tolist()
    adv, _ = compute_gae(fake_traj(rewards, values), gamma=0.9, lam=0.0)
    deltas = [rewards[t] + 0.9 * (values[t + 1] if t < 5 else 0.0) - values[t]
              for t in range(6)]
    assert np.allclose(adv, deltas)


def test_gae_zero_everything():
    adv, ret = compute_gae(fake_traj([0.0] * 4, [0.0] * 4), gamma=0.99, lam=0.95)
    assert (adv == 0).all() and (ret == 0).all()


def test_gae_matches_bruteforce_double_sum():
    rng = np.random.default_rng(1)
    for _ in range(50):
        T = int(rng.integers(1, 11))
        rewards = rng.normal(size=T).tolist()
        values = rng.normal(size=T).tolist()
        gamma = float(rng.uniform(0.5, 1.0))
        lam = float(rng.uniform(0.0, 1.0))
        adv, ret = compute_gae(fake_traj(rewards, values), gamma, lam)
        brute = gae_bruteforce(rewards, values, gamma, lam)
        assert np.allclose(adv, brute, atol=1e-10)
        assert np.allclose(ret, adv + np.array(values), atol=1e-10)


def test_gae_empty_trajectory_raises():
    with pytest.raises(EmptyTrajectory):
        compute_gae([], 0.99, 0.95)


# ---------------------------------------------------------------------------
# clipped objective
# ---------------------------------------------------------------------------


def test_clip_arithmetic():
    assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert clipped_surrogate(1.0, 2.0, 0.2) == pytest.approx(2.0)


def test_ppo_grad_equals_vanilla_pg_when_unclipped():
    params = small_params(seed=7)
    make = parse_sampler()
    trajs = collect_episodes(params, make, n_episodes=1, seed=3)
    cfg = TrainConfig(c_v=0.0, c_e=0.0, seed=0)
    batch = flatten_with_gae(trajs, cfg)[:16]
    grads, stats = policy_loss_grads(params, batch, cfg, clip_eps=math.inf)
    assert stats["ratio_mean"] == pytest.approx(1.0, abs=1e-9)
    # vanilla REINFORCE-style estimator on the same batch
    m = len(batch)
    expect = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    for tr, adv, _ in batch:
        out, tape = policy_forward(params, tr.graph, train_mode=True,
                                   seed=tr.forward_seed)
        g = np.zeros(len(out.dirty_ids))
        g[out.dirty_ids.index(tr.action)] = -adv / m
        for k, v in tape.backward({"log_probs": g}).items():
            expect[k] += v
    for k in expect:
        assert np.allclose(grads[k], expect[k], atol=1e-9)


def test_adam_zero_gradients_leave_params_unchanged():
    params = small_params(seed=8)
    before = {k: v.copy() for k, v in params.tensors.items()}
    opt = adam_init(params.tensors)
    zero = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    for _ in range(3):
        adam_step(params.tensors, zero, opt, lr=1e-2)
    for k in before:
        assert np.array_equal(params.tensors[k], before[k])


def test_ppo_update_is_reproducible_bit_for_bit():
    make = parse_sampler()

    def run():
        params = small_params(seed=9)
        cfg = TrainConfig(batch_size=32, ppo_epochs=2, seed=5)
        trajs = collect_episodes(params, make, n_episodes=1, seed=17)
        batch = flatten_with_gae(trajs, cfg)
        new, _, _ = ppo_update(params, batch, cfg)
        return new

    p1, p2 = run(), run()
    for k in p1.tensors:
        assert np.array_equal(p1.tensors[k], p2.tensors[k])


def test_ppo_update_rejects_empty_batch():
    with pytest.raises(ValueError):
        ppo_update(small_params(), [], TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lam=1.5)
    with pytest.raises(ValueError):
        TrainConfig(clip_eps=0.0)


def test_train_ppo_writes_run_directory(tmp_path):
    params = small_params(seed=10)
    make = parse_sampler()
    cfg = TrainConfig(batch_size=16, ppo_epochs=1, seed=1)
    out = tmp_path / "run"
    _, history = train_ppo(params, make, cfg, n_updates=2, seed=2, out_dir=out,
                           save_interval=1)
    assert (out / "config.json").exists()
    assert (out / "final.json").exists()
    assert (out / "ckpt_0001.json").exists()
    lines = (out / "updates.csv").read_text().splitlines()
    assert lines[0].startswith("# schema:")
    assert lines[1] == "update,mean_reward,clip_frac,entropy,value_loss"
    assert len(lines) == 2 + len(history)


# ---------------------------------------------------------------------------
# meta-learning
# ---------------------------------------------------------------------------


def test_fomaml_scalar_toy():
    # L(theta) = theta^2; one step at lr 0.1 from 1.0 adapts to 0.8 and the
    # first-order meta-gradient is 2 * 0.8 = 1.6
    theta = {"w": np.array(1.0)}
    grad_fn = lambda t, task: {"w": 2.0 * t["w"]}
    new, info = fomaml_meta_step(theta, tasks=[None], support_grad_fn=grad_fn,
                                 query_grad_fn=grad_fn, inner_steps=1,
                                 inner_lr=0.1, meta_lr=0.5)
    assert info[0]["adapted"]["w"] == pytest.approx(0.8)
    assert info[0]["query_grad"]["w"] == pytest.approx(1.6)
    assert new["w"] == pytest.approx(1.0 - 0.5 * 1.6)


def test_fomaml_k_zero_is_joint_training():
    theta = {"w": np.array(1.0)}
    grad_fn = lambda t, task: {"w": 2.0 * t["w"]}
    new, info = fomaml_meta_step(theta, tasks=[None, None], support_grad_fn=grad_fn,
                                 query_grad_fn=grad_fn, inner_steps=0,
                                 inner_lr=0.1, meta_lr=0.1)
    assert info[0]["adapted"]["w"] == pytest.approx(1.0)
    # meta-gradient is the sum over tasks of the plain gradient at theta
    assert new["w"] == pytest.approx(1.0 - 0.1 * (2.0 + 2.0))


def test_maml_meta_step_runs_and_changes_params():
    params = small_params(seed=11)
    g1 = tasks.sample_grammar(101, require_lengths=(3, 4))
    g2 = tasks.sample_grammar(102, require_lengths=(3, 4))
    samplers = [tasks.parse_instance_sampler(g1, (3, 4)),
                tasks.parse_instance_sampler(g2, (3, 4))]
    meta = MetaConfig(inner_steps=1, inner_lr=1e-3, meta_lr=1e-3,
                      support_episodes=1, query_episodes=1)
    cfg = TrainConfig(ppo_epochs=1, batch_size=16, seed=0)
    new, _ = maml_meta_step(params, samplers, meta, cfg, seed=3)
    assert any(not np.array_equal(new.tensors[k], params.tensors[k])
               for k in params.tensors)
    again, _ = maml_meta_step(params, samplers, meta, cfg, seed=3)
    for k in new.tensors:
        assert np.array_equal(new.tensors[k], again.tensors[k])


def test_meta_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(inner_steps=-1)
    with pytest.raises(ValueError):
        MetaConfig(meta_lr=0.0)
    assert MetaConfig(inner_steps=0).inner_steps == 0


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


def test_adapt_zero_lr_keeps_params_and_zero_steps_keeps_metrics():
    params = small_params(seed=12)
    make = parse_sampler()
    cfg = TrainConfig(seed=0)
    adapted, report = adapt(params, make, steps=3, train_cfg=cfg, seed=1,
                            inner_lr=0.0, support_episodes=1, eval_episodes=3)
    for k in params.tensors:
        assert np.array_equal(adapted.tensors[k], params.tensors[k])
    assert report["post"] == report["pre"]
    adapted, report = adapt(params, make, steps=0, train_cfg=cfg, seed=1,
                            inner_lr=1e-3, support_episodes=1, eval_episodes=3)
    assert report["post"] == report["pre"]


# ---------------------------------------------------------------------------
# imitation
# ---------------------------------------------------------------------------


def test_imitation_single_state_loss_decreases_monotonically():
    params = small_params(seed=13)
    make = parse_sampler()
    labeled = collect_greedy_labels(make, n_states=1, seed=5)
    assert len(labeled) == 1
    _, history = imitation_train(params, labeled, epochs=10, lr=0.01)
    losses = [h["loss"] for h in history]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_imitation_uniform_labels_stay_at_chance():
    params = small_params(seed=14)
    make = parse_sampler()
    (graph, _), = collect_greedy_labels(make, n_states=1, seed=6)
    k = len(graph.dirty_ids)
    assert k >= 3
    labeled = [(graph, graph.dirty_ids[i % k]) for i in range(4 * k)]
    trained, _ = imitation_train(params, labeled, epochs=15, lr=0.01)
    acc = imitation_agreement(trained, labeled)
    assert abs(acc - 1.0 / k) < 0.05


# ---------------------------------------------------------------------------
# two-armed toy
# ---------------------------------------------------------------------------


def test_toy_episodes_have_fixed_length_and_rewards():
    params = small_params(seed=15)
    toy = TwoArmedToy(ep_len=5)
    (traj,) = collect_toy_episodes(params, toy, n_episodes=1, seed=0)
    assert len(traj) == 5
    assert traj[-1].done and not traj[0].done
    for tr in traj:
        assert tr.reward == (1.0 if tr.action == 0 else 0.0)
