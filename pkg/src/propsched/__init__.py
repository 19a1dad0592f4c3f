"""Adaptive constraint-propagation scheduling workbench."""

from .engine import (
    DERIVATION, FAILED, FIXPOINT, PRUNING, RUNNING, BUDGET,
    Domain, InstanceSpec, NoiseConfig, Propagator, RewardConfig, RunTrace,
    SolverState, StepOutcome, Variable,
    build_instance, lookahead_outcome, propagate, restore, reward,
    run_to_fixpoint, snapshot, step_cost,
)
from .features import StateGraph, featurize
from .policy import (
    PolicyConfig, PolicyOutput, PolicyParams,
    attention_coefficients, backward, forward, init_params, load_checkpoint,
    mlp_ablation_forward, save_checkpoint,
)
from .schedulers import (
    ActivityScheduler, DomWdegScheduler, FallbackConfig, FallbackScheduler,
    FifoScheduler, GreedyScheduler, PolicyScheduler, RandomScheduler,
    VsidsScheduler, calibrate_tau, entropy_gate,
)
from .training import (
    MetaConfig, TrainConfig, Transition,
    adapt, collect_episodes, compute_gae, imitation_train, maml_meta_step,
    ppo_update, train_ppo,
)

__version__ = "0.1.0"
