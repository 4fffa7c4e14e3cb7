"""Synthetic room/object worlds, scripted policies and a ground-truth-bearing
representation provider.

Each task has a fixed oracle plan (an ordered list of action strings). The
dense kind pays ``subgoals_done / n_subgoals`` at the end of the episode; the
sparse kind pays 1.0 only when the whole plan is completed. Hidden states are
built so that success vs. failure is linearly encoded along a known unit
direction per layer.
"""

from __future__ import annotations

import functools
import re
from functools import cached_property
import zlib
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from stepconf import seeding
from stepconf.errors import EpisodeNotTerminated, InvalidConfig, TerminatedEpisode, UnknownLayer
from stepconf.trajectory import (
    Split,
    StepRecord,
    TaskInstruction,
    Trajectory,
    append_step,
    finalize,
)

NOTHING_HAPPENS = "Nothing happens."

ROOMS = {
    "base": ["kitchen", "bathroom", "living room", "bedroom", "hallway", "workshop", "greenhouse", "laboratory"],
    "shifted": ["attic", "garage", "cellar", "pantry", "studio", "porch", "library", "foyer"],
}
OBJECTS = {
    "base": ["tomato", "apple", "mug", "knife", "thermometer", "plate", "sponge", "potato", "book", "lettuce",
             "spoon", "egg"],
    "shifted": ["lemon", "kettle", "ruler", "candle", "compass", "bowl", "pepper", "battery", "scarf", "onion",
                "whisk", "pear"],
}
RECEPTACLES = {
    "base": ["shelf", "table", "countertop", "cabinet", "drawer", "sidetable", "dresser", "bench"],
    "shifted": ["crate", "rack", "trolley", "chest", "locker", "stand", "tray", "basket"],
}
PROCESSES = ["clean", "heat", "cool", "slice", "focus on"]
# never present in any world; drifting agents keep reaching for them
HALLUCINATED = ["unicorn", "spaceship", "golden key", "magic wand", "treasure map"]


class EnvKind(str, Enum):
    DENSE = "dense"
    SPARSE = "sparse"


@dataclass(frozen=True)
class EnvConfig:
    kind: EnvKind = EnvKind.DENSE
    n_subgoals: int = 10
    horizon: int = 10
    n_rooms: int = 3
    n_objects: int = 4
    seed: int = 0
    vocab: str = "base"
    success_threshold: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EnvKind(self.kind))
        if min(self.n_subgoals, self.horizon, self.n_rooms, self.n_objects) < 1:
            raise InvalidConfig("all environment counts must be >= 1")
        if self.horizon < self.n_subgoals:
            raise InvalidConfig("horizon must be >= n_subgoals")
        if self.vocab not in ROOMS:
            raise InvalidConfig(f"unknown vocabulary '{self.vocab}'")
        if self.n_rooms > len(ROOMS[self.vocab]) or self.n_objects > len(OBJECTS[self.vocab]):
            raise InvalidConfig("not enough vocabulary for the requested world size")
        if self.n_subgoals > 5 * self.n_objects:
            raise InvalidConfig("n_subgoals may not exceed 5 * n_objects")
        if self.success_threshold is not None and not 0.0 < self.success_threshold <= 1.0:
            raise InvalidConfig("success_threshold must lie in (0, 1]")

    @property
    def threshold(self) -> float:
        if self.success_threshold is not None:
            return self.success_threshold
        return 0.99 if self.kind is EnvKind.DENSE else 1.0

    @property
    def domain_tag(self) -> str:
        return f"{self.kind.value}-world"


@dataclass(frozen=True)
class World:
    rooms: tuple[str, ...]
    placement: Mapping[str, str]  # object/receptacle -> room
    plan: tuple[str, ...]
    start_room: str

    @property
    def entities(self) -> frozenset[str]:
        return frozenset(self.placement)

    def candidate_actions(self) -> list[str]:
        """All actions a competent-looking agent might try in this world."""
        return self._candidates

    @cached_property
    def _candidates(self) -> list[str]:
        acts = {"look around"}
        acts.update(f"go to {r}" for r in self.rooms)
        acts.update(f"examine {e}" for e in self.placement)
        acts.update(self.plan)
        return sorted(acts)


@dataclass(frozen=True)
class EnvState:
    world: World
    room: str
    inventory: frozenset[str] = frozenset()
    subgoals_done: int = 0
    step_count: int = 0
    terminated: bool = False
    horizon: int = 10

    @property
    def plan_len(self) -> int:
        return len(self.world.plan)

    @property
    def next_plan_action(self) -> str | None:
        if self.subgoals_done < self.plan_len:
            return self.world.plan[self.subgoals_done]
        return None


def _build_world(config: EnvConfig, rng: np.random.Generator):
    vocab = config.vocab
    rooms = [ROOMS[vocab][i] for i in rng.choice(len(ROOMS[vocab]), config.n_rooms, replace=False)]
    objects = [OBJECTS[vocab][i] for i in rng.choice(len(OBJECTS[vocab]), config.n_objects, replace=False)]
    recepts = [RECEPTACLES[vocab][i] for i in rng.choice(len(RECEPTACLES[vocab]), config.n_rooms, replace=False)]
    placement = {r: room for r, room in zip(recepts, rooms)}
    for obj in objects:
        placement[obj] = rooms[int(rng.integers(len(rooms)))]
    start = rooms[int(rng.integers(len(rooms)))]

    plan: list[str] = []
    for obj in objects:
        proc = PROCESSES[int(rng.integers(len(PROCESSES)))]
        target = recepts[int(rng.integers(len(recepts)))]
        plan += [f"go to {placement[obj]}", f"take {obj}", f"{proc} {obj}", f"go to {placement[target]}",
                 f"put {obj} on {target}"]
    plan = plan[: config.n_subgoals]
    if config.kind is EnvKind.SPARSE:
        # same world and plan; the instruction names only the goal
        last_put = next((a for a in reversed(plan) if a.startswith("put ")), plan[-1])
        text = f"Reach the goal in {len(plan)} steps: {last_put}."
        return World(tuple(rooms), placement, tuple(plan), start), text
    order = ["First"] + ["Then"] * max(0, len(plan) - 2) + (["Finally"] if len(plan) > 1 else [])
    text = f"Complete {len(plan)} sub-goals in order. " + " ".join(f"{w}, {a}." for w, a in zip(order, plan))
    return World(tuple(rooms), placement, tuple(plan), start), text


def _describe(world: World, room: str) -> str:
    here = sorted(e for e, r in world.placement.items() if r == room)
    return f"You are in the {room}. You see: {', '.join(here) if here else 'nothing of interest'}."


def reset(config: EnvConfig, task_seed: int) -> tuple[EnvState, TaskInstruction, str]:
    rng = seeding.stream(config.seed, "task", config.vocab, task_seed)
    world, text = _build_world(config, rng)
    state = EnvState(world=world, room=world.start_room, horizon=config.horizon)
    task = TaskInstruction(
        id=f"{config.domain_tag}-{task_seed}", text=text, domain_tag=config.domain_tag, seed=task_seed
    )
    return state, task, _describe(world, world.start_room)


_VERB = re.compile(r"^(go to|take|put|examine|look around|clean|heat|cool|slice|focus on)\b\s*(.*)$")


def _off_plan(state: EnvState, action: str) -> tuple[EnvState, str]:
    world = state.world
    m = _VERB.match(action)
    if not m:
        return state, NOTHING_HAPPENS
    verb, arg = m.groups()
    if verb == "look around":
        return state, _describe(world, state.room)
    if verb == "go to":
        if arg in world.rooms:
            return replace(state, room=arg), _describe(world, arg)
        return state, NOTHING_HAPPENS
    if verb == "put":
        obj, _, target = arg.partition(" on ")
        if obj in world.entities and target in world.entities:
            return state, f"You cannot put the {obj} on the {target} right now."
        return state, NOTHING_HAPPENS
    if arg in world.entities:
        if verb == "examine":
            return state, f"It is a {arg}. It sits in the {world.placement[arg]}."
        return state, f"You cannot {verb} the {arg} right now."
    return state, NOTHING_HAPPENS


def env_step(state: EnvState, action: str) -> tuple[EnvState, str, bool]:
    if state.terminated:
        raise TerminatedEpisode("episode already terminated")
    if action == state.next_plan_action:
        verb = _VERB.match(action)
        new = replace(state, subgoals_done=state.subgoals_done + 1)
        v, arg = verb.groups() if verb else ("", action)
        if v == "go to":
            new = replace(new, room=arg)
            obs = _describe(state.world, arg)
        elif v == "take":
            new = replace(new, inventory=state.inventory | {arg})
            obs = f"You pick up the {arg}."
        elif v == "put":
            obj = arg.partition(" on ")[0]
            new = replace(new, inventory=state.inventory - {obj})
            obs = f"You put the {arg}."
        else:
            obs = f"You {v} the {arg}."
    else:
        new, obs = _off_plan(state, action)
    steps = state.step_count + 1
    done = new.subgoals_done == state.plan_len or steps >= state.horizon
    return replace(new, step_count=steps, terminated=done), obs, done


def final_reward(state: EnvState, config: EnvConfig) -> float:
    if not state.terminated:
        raise EpisodeNotTerminated("final reward is only defined for terminated episodes")
    return _reward_at(state, config)


def _reward_at(state: EnvState, config: EnvConfig) -> float:
    if config.kind is EnvKind.DENSE:
        return state.subgoals_done / state.plan_len
    return 1.0 if state.subgoals_done == state.plan_len else 0.0


def truncated_reward(state: EnvState, config: EnvConfig) -> float:
    """Reward of a rollout cut off before termination."""
    return _reward_at(state, config) if config.kind is EnvKind.DENSE else 0.0


def expert_completion(state: EnvState, config: EnvConfig) -> float:
    """Final reward reached if the oracle plan is followed from ``state``."""
    while not state.terminated:
        state, _, _ = env_step(state, state.next_plan_action)
    return final_reward(state, config)


def oracle_step_success(state: EnvState, config: EnvConfig) -> bool:
    """Whether an expert continuation from ``state`` still succeeds.

    Depends only on the environment state, never on the acting policy.
    """
    return expert_completion(state, config) >= config.threshold


# -- policies -------------------------------------------------------------------


class PolicyKind(str, Enum):
    EXPERT = "expert"
    NOISY = "noisy"
    DRIFTING = "drifting"


@dataclass(frozen=True)
class PolicyProfile:
    kind: PolicyKind = PolicyKind.EXPERT
    error_rate: float | None = None
    drift_onset: tuple[int, int] | None = None  # inclusive (min_t, max_t), 0-based step indices
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if (self.error_rate is not None) != (self.kind is PolicyKind.NOISY):
            raise InvalidConfig("error_rate is required for, and only for, noisy profiles")
        if self.error_rate is not None and not 0.0 <= self.error_rate <= 1.0:
            raise InvalidConfig("error_rate must lie in [0, 1]")
        if (self.drift_onset is not None) != (self.kind is PolicyKind.DRIFTING):
            raise InvalidConfig("drift_onset is required for, and only for, drifting profiles")
        if self.drift_onset is not None:
            lo, hi = self.drift_onset
            object.__setattr__(self, "drift_onset", (int(lo), int(hi)))
            if not 0 <= lo <= hi:
                raise InvalidConfig("drift_onset needs 0 <= min_t <= max_t")

    def check_horizon(self, horizon: int) -> None:
        if self.drift_onset is not None and self.drift_onset[1] >= horizon:
            raise InvalidConfig(f"drift onset {self.drift_onset} outside horizon {horizon}")


def is_drift_action(action: str) -> bool:
    return any(h in action for h in HALLUCINATED)


def drift_hazard(onset: tuple[int, int], t: int) -> float:
    """P(drift starts at step t | not started before), giving a uniform onset on [lo, hi]."""
    lo, hi = onset
    if t < lo:
        return 0.0
    if t >= hi:
        return 1.0
    return 1.0 / (hi - t + 1)


def drift_action(state: EnvState, rng: np.random.Generator) -> tuple[str, str]:
    thing = HALLUCINATED[int(rng.integers(len(HALLUCINATED)))]
    verb = ["take", "examine", "go to"][int(rng.integers(3))]
    return f"I am sure the {thing} is around here; I should find it.", f"{verb} {thing}"


def _expert(state: EnvState) -> tuple[str, str]:
    action = state.next_plan_action
    return f"The next thing to do is to {action}.", action


def _choose(profile: PolicyProfile, actions: Sequence[str], state: EnvState, rng: np.random.Generator):
    if profile.kind is PolicyKind.EXPERT:
        return _expert(state)
    if profile.kind is PolicyKind.NOISY:
        # the uniform draw is always consumed so streams stay aligned across error rates
        u = rng.random()
        if u >= profile.error_rate:
            return _expert(state)
        wrong = [a for a in state.world.candidate_actions() if a != state.next_plan_action]
        action = wrong[int(rng.integers(len(wrong)))]
        return f"Maybe I should {action}.", action
    if any(is_drift_action(a) for a in actions):
        return drift_action(state, rng)
    u = rng.random()
    if u < drift_hazard(profile.drift_onset, len(actions)):
        return drift_action(state, rng)
    return _expert(state)


def sample_action(
    profile: PolicyProfile, traj: Trajectory, state: EnvState, rng: np.random.Generator
) -> tuple[str, str]:
    """Draw (thought, action) for the next step of ``traj``."""
    if state.terminated:
        raise TerminatedEpisode("cannot act in a terminated episode")
    return _choose(profile, traj.actions, state, rng)


# -- representation provider ------------------------------------------------------


@dataclass(frozen=True)
class RepresentationConfig:
    dim: int = 64
    layers: tuple[int, ...] = (8, 16, 24, 32)
    margin: float = 2.0
    noise_sigma: float = 1.0
    seed: int = 0
    feature_scale: float = 0.5
    n_features: int = 256

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(int(x) for x in self.layers)))
        if self.dim < 2:
            raise InvalidConfig("representation dim must be >= 2")
        if not self.layers or min(self.layers) < 1:
            raise InvalidConfig("layers must be a non-empty set of positive integers")
        if self.margin < 0 or self.noise_sigma <= 0 or self.feature_scale < 0 or self.n_features < 1:
            raise InvalidConfig("need margin >= 0, noise_sigma > 0, feature_scale >= 0, n_features >= 1")


@dataclass(frozen=True, eq=False)
class LayerGeometry:
    direction: np.ndarray  # unit ground-truth direction g_L
    mixing: np.ndarray  # dim x n_features


@functools.lru_cache(maxsize=64)
def layer_geometry(rep: RepresentationConfig, layer: int) -> LayerGeometry:
    if layer not in rep.layers:
        raise UnknownLayer(f"layer {layer} not in {rep.layers}")
    g = seeding.stream(rep.seed, "direction", layer).standard_normal(rep.dim)
    g /= np.linalg.norm(g)
    a = seeding.stream(rep.seed, "mixing", layer).standard_normal((rep.dim, rep.n_features))
    a *= rep.feature_scale / np.sqrt(rep.dim)
    g.setflags(write=False)
    a.setflags(write=False)
    return LayerGeometry(g, a)


def ground_truth_direction(rep: RepresentationConfig, layer: int) -> np.ndarray:
    return layer_geometry(rep, layer).direction


_TOKEN = re.compile(r"[a-z0-9]+")


def prefix_text(traj: Trajectory) -> str:
    parts = [traj.task.text]
    for s in traj.steps:
        parts += [s.thought, s.action, s.observation]
    return "\n".join(parts)


@functools.lru_cache(maxsize=4096)
def feature_hash(text: str, n_features: int) -> np.ndarray:
    """Unit-norm signed bag of token hashes."""
    phi = np.zeros(n_features)
    for tok in _TOKEN.findall(text.lower()):
        h = zlib.crc32(tok.encode("utf-8"))
        phi[h % n_features] += 1.0 if (h >> 31) & 1 else -1.0
    norm = np.linalg.norm(phi)
    if norm > 0:
        phi /= norm
    phi.setflags(write=False)
    return phi


def hidden_state_from_text(
    rep: RepresentationConfig, text: str, layer: int, on_success_path: bool, rng: np.random.Generator
) -> np.ndarray:
    geo = layer_geometry(rep, layer)
    y = 1.0 if on_success_path else -1.0
    h = geo.mixing @ feature_hash(text, rep.n_features) + y * (rep.margin / 2.0) * geo.direction
    return h + rep.noise_sigma * rng.standard_normal(rep.dim)


def hidden_state(
    rep: RepresentationConfig, traj_prefix: Trajectory, layer: int, on_success_path: bool, rng: np.random.Generator
) -> np.ndarray:
    """Synthetic residual-stream vector for ``traj_prefix`` at ``layer``."""
    return hidden_state_from_text(rep, prefix_text(traj_prefix), layer, on_success_path, rng)


def deterministic_offset(rep: RepresentationConfig, traj_prefix: Trajectory, layer: int) -> np.ndarray:
    """The label-independent mean component of :func:`hidden_state`."""
    return layer_geometry(rep, layer).mixing @ feature_hash(prefix_text(traj_prefix), rep.n_features)


# -- corpus generation ----------------------------------------------------------------


def split_counts(n: int, plan: Mapping[Split, float]) -> dict[Split, int]:
    """Largest-remainder allocation of ``n`` items to the split fractions."""
    total = sum(plan.values())
    if abs(total - 1.0) > 1e-9:
        raise InvalidConfig(f"split fractions sum to {total}, not 1")
    raw = {Split(s): n * f for s, f in plan.items()}
    counts = {s: int(np.floor(v)) for s, v in raw.items()}
    rest = n - sum(counts.values())
    by_remainder = sorted(raw, key=lambda s: (-(raw[s] - counts[s]), list(raw).index(s)))
    for s in by_remainder[:rest]:
        counts[s] += 1
    return counts


def run_episode(
    env: EnvConfig,
    profile: PolicyProfile,
    rep: RepresentationConfig,
    task_seed: int,
    policy_rng: np.random.Generator,
    noise_rng: np.random.Generator,
    task_id: str | None = None,
    split: Split = Split.TRAIN,
    policy_name: str | None = None,
) -> Trajectory:
    """Roll one episode, recording activations at every layer and the oracle flag per step."""
    state, task, _ = reset(env, task_seed)
    task = replace(task, split=split, id=task_id or task.id, policy=policy_name)
    traj = Trajectory(task=task)
    t = 0
    while not state.terminated:
        thought, action = sample_action(profile, traj, state, policy_rng)
        state, obs, _ = env_step(state, action)
        ok = oracle_step_success(state, env)
        partial = append_step(traj, StepRecord(t=t, thought=thought, action=action, observation=obs))
        text = prefix_text(partial)
        acts = {layer: hidden_state_from_text(rep, text, layer, ok, noise_rng) for layer in rep.layers}
        traj = append_step(
            traj, StepRecord(t=t, thought=thought, action=action, observation=obs, activations=acts, oracle_success=ok)
        )
        t += 1
    return finalize(traj, final_reward(state, env))


def generate_corpus(
    env: EnvConfig,
    profiles: Sequence[tuple[PolicyProfile, float]] | Mapping[str, tuple[PolicyProfile, float]],
    rep: RepresentationConfig,
    n_episodes: int,
    split_plan: Mapping[Split, float],
    id_prefix: str | None = None,
    first_episode: int = 0,
) -> list[Trajectory]:
    """Finalized episodes with activations, oracle flags and split assignment.

    Episode ``i`` draws every stream from index ``first_episode + i``, so
    corpora generated with disjoint index ranges share no tasks or noise.

    ``profiles`` may be a mapping from policy name to (profile, weight); the
    name is then stored on each task so rewards can roll out the behavior
    policy. Episodes in the ``test-ood`` split use the shifted vocabulary.
    """
    if isinstance(profiles, Mapping):
        names = list(profiles)
        profiles = list(profiles.values())
    else:
        names = [None] * len(profiles)
    if n_episodes < 1:
        raise InvalidConfig("n_episodes must be >= 1")
    weights = np.array([w for _, w in profiles], dtype=float)
    if weights.size == 0 or np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidConfig("profile weights must be non-negative with a positive sum")
    for p, _ in profiles:
        p.check_horizon(env.horizon)
    probs = weights / weights.sum()

    counts = split_counts(n_episodes, split_plan)
    labels = [s for s, c in counts.items() for _ in range(c)]
    order = seeding.stream(env.seed, "split").permutation(n_episodes)
    split_of = [labels[i] for i in order]

    corpus = []
    for j in range(n_episodes):
        i = first_episode + j
        k = int(seeding.stream(env.seed, "profile", i).choice(len(profiles), p=probs))
        profile = profiles[k][0]
        split = split_of[j]
        ep_env = replace(env, vocab="shifted") if split is Split.TEST_OOD else env
        traj = run_episode(
            ep_env,
            profile,
            rep,
            task_seed=seeding.derive_seed(env.seed, "task", i),
            policy_rng=seeding.stream(profile.seed, "policy", env.seed, i),
            noise_rng=seeding.stream(rep.seed, "noise", env.seed, i),
            task_id=f"{id_prefix or env.domain_tag}-{i:05d}",
            split=split,
            policy_name=names[k],
        )
        corpus.append(traj)
    return corpus


def synthetic_cell(
    rep: RepresentationConfig, layer: int, timestep: int, n_per_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced (X, y) for one (layer, timestep) cell with label-independent prefix text.

    Every example gets its own random prefix text, drawn independently of its
    label, so the mixing term carries no class information.
    """
    X = np.empty((2 * n_per_class, rep.dim))
    y = np.repeat([1, 0], n_per_class)
    words = OBJECTS["base"] + ROOMS["base"] + RECEPTACLES["base"] + PROCESSES
    for i in range(2 * n_per_class):
        toks = [words[j] for j in rng.integers(len(words), size=3 * timestep)]
        X[i] = hidden_state_from_text(rep, " ".join(toks), layer, bool(y[i]), rng)
    return X, y
