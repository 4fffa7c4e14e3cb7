"""Monte Carlo step-wise rewards.

``r_t`` is attached to the prefix holding the first ``t`` executed steps, so a
step with 0-based index ``k`` is scored by ``r_{k+1}``; this matches the 1-based
timestep convention of :func:`stepconf.trajectory.timestep_of`. When the prefix
already ends the episode (``t == n``, the index of the last executed step) the
reward is the environment's own final reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from stepconf import seeding
from stepconf.envsim import (
    EnvConfig,
    EnvState,
    PolicyProfile,
    _choose,
    env_step,
    final_reward,
    reset,
    truncated_reward,
)
from stepconf.errors import BudgetZero, ReplayMismatch, UnfinalizedTrajectory
from stepconf.trajectory import Trajectory


@dataclass(frozen=True)
class RolloutBudget:
    n_rollouts: int = 8
    max_rollout_steps: int | None = None  # None: run until the environment terminates
    seed: int = 0

    def __post_init__(self):
        if self.n_rollouts < 1:
            raise BudgetZero("n_rollouts must be >= 1")
        if self.max_rollout_steps is not None and self.max_rollout_steps < 0:
            raise BudgetZero("max_rollout_steps must be >= 0")


@dataclass(frozen=True)
class RewardEstimate:
    t: int
    r_t: float
    n_samples: int
    std_err: float
    is_final_step: bool


def replay(traj: Trajectory, env: EnvConfig) -> list[EnvState]:
    """Re-execute ``traj`` from reset; returns the state after each of its prefixes."""
    if traj.task.seed is None:
        raise ReplayMismatch(f"task {traj.task.id} carries no task seed")
    state, _, _ = reset(env, traj.task.seed)
    states = [state]
    for step in traj.steps:
        if state.terminated:
            raise ReplayMismatch(f"task {traj.task.id}: episode ended before step {step.t}")
        state, obs, _ = env_step(state, step.action)
        if obs != step.observation:
            raise ReplayMismatch(f"task {traj.task.id}: step {step.t} observation differs on replay")
        states.append(state)
    return states


def _rollout(state: EnvState, actions: list[str], policy: PolicyProfile, env: EnvConfig, max_steps: int,
             rng: np.random.Generator) -> float:
    actions = list(actions)
    steps = 0
    while not state.terminated and steps < max_steps:
        _, action = _choose(policy, actions, state, rng)
        state, _, _ = env_step(state, action)
        actions.append(action)
        steps += 1
    return final_reward(state, env) if state.terminated else truncated_reward(state, env)


def _estimate_from_state(state: EnvState, t: int, actions: list[str], policy: PolicyProfile, env: EnvConfig,
                         budget: RolloutBudget) -> RewardEstimate:
    if state.terminated:
        return RewardEstimate(t=t, r_t=final_reward(state, env), n_samples=0, std_err=0.0, is_final_step=True)
    max_steps = budget.max_rollout_steps if budget.max_rollout_steps is not None else env.horizon - t
    values = [
        _rollout(state, actions, policy, env, max_steps, seeding.stream(budget.seed, t, i))
        for i in range(budget.n_rollouts)
    ]
    n = len(values)
    total = 0.0
    for v in values:  # fixed index order
        total += v
    mean = total / n
    se = float(np.std(values, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    return RewardEstimate(t=t, r_t=min(1.0, max(0.0, mean)), n_samples=n, std_err=se, is_final_step=False)


def estimate_step_reward(prefix: Trajectory, policy: PolicyProfile, env: EnvConfig,
                         budget: RolloutBudget) -> RewardEstimate:
    """Estimate ``r_t`` for a prefix of ``t = len(prefix)`` executed steps."""
    if budget.n_rollouts < 1:
        raise BudgetZero("n_rollouts must be >= 1")
    states = replay(prefix, env)
    return _estimate_from_state(states[-1], len(prefix), prefix.actions, policy, env, budget)


def estimate_trajectory_rewards(traj: Trajectory, policy: PolicyProfile, env: EnvConfig, budget: RolloutBudget,
                                start_timestep: int = 1) -> list[RewardEstimate]:
    """One estimate per timestep ``start_timestep..n`` (1-based; timestep k scores step k-1)."""
    if not traj.finalized:
        raise UnfinalizedTrajectory(f"trajectory {traj.task.id} is not finalized")
    states = replay(traj, env)
    if not states[-1].terminated:
        raise ReplayMismatch(f"task {traj.task.id}: replay does not end the episode")
    if final_reward(states[-1], env) != traj.final_reward:
        raise ReplayMismatch(f"task {traj.task.id}: final reward differs on replay")
    actions = traj.actions
    return [
        _estimate_from_state(states[t], t, actions[:t], policy, env, budget)
        for t in range(max(start_timestep, 0), len(traj) + 1)
    ]
