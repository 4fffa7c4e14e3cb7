"""Contrastive success directions and additive activation steering.

The closed-loop evaluation uses an agent whose behavior depends on its own
hidden state: before each action it computes its representation of the
current prefix, and the chance that it starts drifting is a logistic function
of that representation's projection onto the layer's ground-truth direction.
Adding a success direction at the intervention timesteps therefore lowers the
drift hazard, and the effect is measured with paired episodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from stepconf import seeding
from stepconf.envsim import (
    EnvConfig,
    RepresentationConfig,
    drift_action,
    env_step,
    final_reward,
    ground_truth_direction,
    hidden_state_from_text,
    oracle_step_success,
    reset,
)
from stepconf.errors import DimensionMismatch, InsufficientExamples, ZeroContrast


@dataclass(frozen=True, eq=False)
class SteeringVector:
    layer: int
    d: np.ndarray
    n_success: int
    n_failure: int

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("steering direction must have unit norm")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    def to_json(self, source_digest: str = "") -> str:
        doc = {
            "layer": self.layer,
            "d": self.d.tolist(),
            "n_success": self.n_success,
            "n_failure": self.n_failure,
            "source_digest": source_digest,
        }
        return json.dumps(doc, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> SteeringVector:
        doc = json.loads(text)
        return cls(doc["layer"], np.array(doc["d"]), doc["n_success"], doc["n_failure"])


@dataclass(frozen=True)
class InterventionSpec:
    layer: int = 16
    timesteps: frozenset[int] = field(default_factory=lambda: frozenset({3}))
    coefficient: float = 0.025

    def __post_init__(self):
        object.__setattr__(self, "timesteps", frozenset(int(t) for t in self.timesteps))
        if not np.isfinite(self.coefficient):
            raise ValueError("steering coefficient must be finite")
        if any(t < 1 for t in self.timesteps):
            raise ValueError("intervention timesteps are 1-based")


def compute_direction(success_acts, failure_acts, layer: int, min_per_class: int = 10) -> SteeringVector:
    """Unit vector from the failure-class mean to the success-class mean."""
    s = np.atleast_2d(np.asarray(success_acts, dtype=float))
    f = np.atleast_2d(np.asarray(failure_acts, dtype=float))
    if len(s) < min_per_class or len(f) < min_per_class:
        raise InsufficientExamples(f"need >= {min_per_class} per class, got {len(s)} and {len(f)}")
    if s.shape[1] != f.shape[1]:
        raise DimensionMismatch("success and failure activations differ in dimension")
    diff = s.mean(axis=0) - f.mean(axis=0)
    norm = np.linalg.norm(diff)
    if norm < 1e-12:
        raise ZeroContrast("class means coincide")
    return SteeringVector(layer, diff / norm, len(s), len(f))


def apply_intervention(h: np.ndarray, spec: InterventionSpec, vec: SteeringVector, timestep: int) -> np.ndarray:
    if vec.layer != spec.layer:
        raise ValueError(f"vector is for layer {vec.layer}, spec targets layer {spec.layer}")
    h = np.asarray(h, dtype=float)
    if h.shape != vec.d.shape:
        raise DimensionMismatch(f"activation dim {h.shape} vs direction dim {vec.d.shape}")
    if timestep not in spec.timesteps:
        return h
    return h + spec.coefficient * vec.d


# -- closed loop ------------------------------------------------------------------


@dataclass(frozen=True)
class CoupledAgent:
    """Expert-plan follower whose drift hazard reads its own hidden state.

    hazard = sigmoid(hazard_bias - hazard_slope * <h, g_L>) at the susceptible
    timesteps (all of them when ``susceptible`` is None); once drift starts it
    never stops.
    """

    rep: RepresentationConfig = RepresentationConfig()
    layer: int = 16
    hazard_bias: float = 4.0
    hazard_slope: float = 4.0
    susceptible: frozenset[int] | None = frozenset({3})

    def __post_init__(self):
        if self.susceptible is not None:
            object.__setattr__(self, "susceptible", frozenset(int(t) for t in self.susceptible))


def coupled_episode(
    env: EnvConfig,
    agent: CoupledAgent,
    task_seed: int,
    seed: int,
    episode: int,
    spec: InterventionSpec | None = None,
    vec: SteeringVector | None = None,
    record: list | None = None,
) -> bool:
    """Run one episode; returns success. ``record`` collects (timestep, h, on_path) before intervention."""
    g = ground_truth_direction(agent.rep, agent.layer)
    state, task, obs = reset(env, task_seed)
    parts = [task.text]
    drifted = False
    t = 0
    while not state.terminated:
        timestep = t + 1
        rng = seeding.stream(seed, "closed-loop", episode, t)
        on_path = oracle_step_success(state, env)
        h = hidden_state_from_text(agent.rep, "\n".join(parts), agent.layer, on_path, rng)
        u = rng.random()
        if record is not None:
            record.append((timestep, h, on_path))
        if spec is not None and vec is not None:
            h = apply_intervention(h, spec, vec, timestep)
        at_risk = agent.susceptible is None or timestep in agent.susceptible
        if not drifted and at_risk and u < expit(agent.hazard_bias - agent.hazard_slope * float(h @ g)):
            drifted = True
        thought, action = drift_action(state, rng) if drifted else ("Following the plan.", state.next_plan_action)
        state, obs, _ = env_step(state, action)
        parts += [thought, action, obs]
        t += 1
    return final_reward(state, env) >= env.threshold


@dataclass(frozen=True, eq=False)
class SteeringResult:
    baseline_success: float
    steered_success: float
    lift: float
    ci95: tuple[float, float]
    n_episodes: int
    baseline: np.ndarray = field(repr=False)
    steered: np.ndarray = field(repr=False)


def paired_bootstrap_ci(diffs: np.ndarray, n_resamples: int = 10_000, seed: int = 0,
                        level: float = 0.95, chunk: int = 500) -> tuple[float, float]:
    """Percentile interval for the mean of per-pair differences."""
    diffs = np.asarray(diffs, dtype=float)
    n = len(diffs)
    rng = seeding.stream(seed, "bootstrap")
    means = np.empty(n_resamples)
    for start in range(0, n_resamples, chunk):
        stop = min(start + chunk, n_resamples)
        idx = rng.integers(0, n, size=(stop - start, n))
        means[start:stop] = diffs[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(lo), float(hi)


def closed_loop_eval(
    env: EnvConfig,
    agent: CoupledAgent,
    spec: InterventionSpec,
    vec: SteeringVector,
    n_episodes: int,
    seed: int,
    n_resamples: int = 10_000,
) -> SteeringResult:
    """Paired baseline/steered episodes on identical seeds and random streams."""
    base = np.zeros(n_episodes, dtype=bool)
    steer = np.zeros(n_episodes, dtype=bool)
    for i in range(n_episodes):
        task_seed = seeding.derive_seed(seed, "closed-loop-task", i)
        base[i] = coupled_episode(env, agent, task_seed, seed, i)
        steer[i] = coupled_episode(env, agent, task_seed, seed, i, spec, vec)
    diffs = steer.astype(float) - base.astype(float)
    b, s = float(base.mean()), float(steer.mean())
    return SteeringResult(b, s, s - b, paired_bootstrap_ci(diffs, n_resamples, seed), n_episodes, base, steer)


def collect_coupled_activations(env: EnvConfig, agent: CoupledAgent, n_episodes: int, seed: int,
                                timesteps: set[int] | None = None):
    """Baseline-agent activations at ``agent.layer`` split by the on-path flag."""
    succ, fail = [], []
    for i in range(n_episodes):
        rec: list = []
        coupled_episode(env, agent, seeding.derive_seed(seed, "direction-task", i), seed, 10_000_000 + i,
                        record=rec)
        for ts, h, ok in rec:
            if timesteps is None or ts in timesteps:
                (succ if ok else fail).append(h)
    return np.array(succ), np.array(fail)
