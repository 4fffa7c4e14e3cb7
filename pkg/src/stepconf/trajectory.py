"""Tasks, steps, trajectories and the line-delimited record format.

Step indices ``t`` are 0-based. Activations are stored per step as a mapping
from layer number to a float64 vector; the (layer, timestep) grid used by
calibration, probes and reports uses 1-based timesteps, i.e.
``timestep = t + 1`` (see :func:`timestep_of`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import IO, Iterable, Iterator, Mapping, Sequence

import numpy as np

from stepconf.errors import (
    AlreadyFinalized,
    DimensionMismatch,
    IndexOutOfRange,
    MalformedRecord,
    NonMonotonicTimestep,
    SinkFailure,
    UnfinalizedTrajectory,
)


class Split(str, Enum):
    TRAIN = "train"
    CALIBRATION = "calibration"
    PROBE_TRAIN = "probe-train"
    TEST_ID = "test-id"
    TEST_OOD = "test-ood"


@dataclass(frozen=True)
class TaskInstruction:
    id: str
    text: str
    domain_tag: str
    split: Split = Split.TRAIN
    seed: int | None = None  # environment task seed, needed for replay
    policy: str | None = None  # name of the behavior policy, if known

    def __post_init__(self):
        if not self.text:
            raise ValueError("task instruction text must be non-empty")
        object.__setattr__(self, "split", Split(self.split))


@dataclass(frozen=True)
class ActivationKey:
    layer: int
    timestep: int

    def __post_init__(self):
        if self.layer < 1 or self.timestep < 1:
            raise ValueError(f"invalid activation key {self}")


def as_activation(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Validate and freeze an activation vector."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatch(f"activation must be a non-empty 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("activation contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StepRecord:
    t: int
    action: str
    observation: str
    thought: str = ""
    activations: Mapping[int, np.ndarray] = field(default_factory=dict)
    oracle_success: bool | None = None

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("step index must be >= 0")
        acts = {int(layer): as_activation(v) for layer, v in sorted(self.activations.items())}
        object.__setattr__(self, "activations", acts)

    def __eq__(self, other):
        if not isinstance(other, StepRecord):
            return NotImplemented
        if (self.t, self.thought, self.action, self.observation, self.oracle_success) != (
            other.t,
            other.thought,
            other.action,
            other.observation,
            other.oracle_success,
        ):
            return False
        if self.activations.keys() != other.activations.keys():
            return False
        return all(np.array_equal(v, other.activations[k]) for k, v in self.activations.items())

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Trajectory:
    task: TaskInstruction
    steps: tuple[StepRecord, ...] = ()
    final_reward: float | None = None
    finalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if self.finalized != (self.final_reward is not None):
            raise ValueError("final_reward must be present iff the trajectory is finalized")
        if self.finalized:
            if not self.steps:
                raise ValueError("a finalized trajectory needs at least one step")
            if not 0.0 <= self.final_reward <= 1.0:
                raise ValueError(f"final_reward {self.final_reward} outside [0, 1]")
        for i, step in enumerate(self.steps):
            if step.t != i:
                raise NonMonotonicTimestep(f"step {i} carries t={step.t}")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> list[str]:
        return [s.action for s in self.steps]


@dataclass(frozen=True)
class EpisodeOutcome:
    success: bool
    final_reward: float


def outcome(traj: Trajectory, success_threshold: float) -> EpisodeOutcome:
    if not traj.finalized:
        raise UnfinalizedTrajectory(f"trajectory {traj.task.id} is not finalized")
    return EpisodeOutcome(traj.final_reward >= success_threshold, traj.final_reward)


def timestep_of(step: StepRecord) -> int:
    """1-based timestep used for grid keys."""
    return step.t + 1


def append_step(traj: Trajectory, step: StepRecord) -> Trajectory:
    if traj.finalized:
        raise AlreadyFinalized(f"trajectory {traj.task.id} is finalized")
    expected = traj.steps[-1].t + 1 if traj.steps else 0
    if step.t != expected:
        raise NonMonotonicTimestep(f"expected t={expected}, got t={step.t}")
    return replace(traj, steps=traj.steps + (step,))


def finalize(traj: Trajectory, final_reward: float) -> Trajectory:
    if traj.finalized:
        raise AlreadyFinalized(f"trajectory {traj.task.id} is finalized")
    return replace(traj, final_reward=float(final_reward), finalized=True)


def prefix(traj: Trajectory, t: int) -> Trajectory:
    """Non-finalized copy holding the first ``t`` steps."""
    if not 0 <= t <= len(traj.steps):
        raise IndexOutOfRange(f"prefix length {t} outside [0, {len(traj.steps)}]")
    return Trajectory(task=traj.task, steps=traj.steps[:t])


# -- record format -------------------------------------------------------------

_REQUIRED = ("task_id", "split", "domain_tag", "t", "thought", "action", "observation", "activations")


def _step_record(traj: Trajectory, step: StepRecord, extra: Mapping[str, object] | None) -> dict:
    rec: dict[str, object] = {
        "task_id": traj.task.id,
        "split": traj.task.split.value,
        "domain_tag": traj.task.domain_tag,
        "instruction": traj.task.text,
        "task_seed": traj.task.seed,
        "policy": traj.task.policy,
        "t": step.t,
        "thought": step.thought,
        "action": step.action,
        "observation": step.observation,
    }
    if step.t == len(traj.steps) - 1:
        rec["final_reward"] = traj.final_reward
    if step.oracle_success is not None:
        rec["oracle_success"] = step.oracle_success
    if extra:
        rec.update(extra)
    rec["activations"] = {f"L{layer}": [float(x) for x in vec] for layer, vec in step.activations.items()}
    return rec


def iter_record_lines(
    corpus: Iterable[Trajectory],
    annotations: Mapping[tuple[str, int], Mapping[str, object]] | None = None,
) -> Iterator[str]:
    """Yield one JSON line per step. ``annotations`` adds extra fields keyed by (task_id, t)."""
    for traj in corpus:
        if not traj.finalized:
            raise UnfinalizedTrajectory(f"trajectory {traj.task.id} is not finalized")
        for step in traj.steps:
            extra = annotations.get((traj.task.id, step.t)) if annotations else None
            rec = _step_record(traj, step, extra)
            # repr-based float formatting round-trips exactly
            yield json.dumps(rec, ensure_ascii=False, allow_nan=False, separators=(",", ":")) + "\n"


def write_records(
    corpus: Sequence[Trajectory],
    destination: IO[bytes],
    annotations: Mapping[tuple[str, int], Mapping[str, object]] | None = None,
) -> int:
    """Write ``corpus`` as UTF-8 JSON lines; returns the number of lines written."""
    lines = list(iter_record_lines(corpus, annotations))
    try:
        for line in lines:
            destination.write(line.encode("utf-8"))
        destination.flush()
    except (OSError, ValueError) as exc:
        raise SinkFailure(str(exc)) from exc
    return len(lines)


def _parse_line(raw: str, lineno: int) -> dict:
    try:
        rec = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"invalid JSON ({exc.msg})", lineno) from exc
    if not isinstance(rec, dict):
        raise MalformedRecord("record is not an object", lineno)
    for name in _REQUIRED:
        if name not in rec:
            raise MalformedRecord(f"missing field '{name}'", lineno)
    if not isinstance(rec["t"], int) or isinstance(rec["t"], bool) or rec["t"] < 0:
        raise MalformedRecord("field 't' must be a non-negative integer", lineno)
    for name in ("task_id", "split", "domain_tag", "thought", "action", "observation"):
        if not isinstance(rec[name], str):
            raise MalformedRecord(f"field '{name}' must be a string", lineno)
    if rec["split"] not in {s.value for s in Split}:
        raise MalformedRecord(f"unknown split '{rec['split']}'", lineno)
    if not isinstance(rec["activations"], dict):
        raise MalformedRecord("field 'activations' must be an object", lineno)
    fr = rec.get("final_reward")
    if fr is not None and (not isinstance(fr, (int, float)) or isinstance(fr, bool) or not 0.0 <= fr <= 1.0):
        raise MalformedRecord("field 'final_reward' must be a number in [0, 1]", lineno)
    return rec


def _parse_activations(rec: dict, lineno: int) -> dict[int, np.ndarray]:
    acts = {}
    for key, values in rec["activations"].items():
        if not (isinstance(key, str) and key.startswith("L") and key[1:].isdigit()):
            raise MalformedRecord(f"bad activation key '{key}'", lineno)
        if not isinstance(values, list) or not values:
            raise MalformedRecord(f"activation '{key}' must be a non-empty array", lineno)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in values):
            raise MalformedRecord(f"activation '{key}' must hold finite reals", lineno)
        acts[int(key[1:])] = values
    return acts


def read_records(source: IO[bytes] | IO[str]) -> list[Trajectory]:
    """Rebuild trajectories (in first-seen task order) from a record stream."""
    groups: dict[str, list[tuple[int, dict]]] = {}
    dims: dict[int, tuple[int, int]] = {}  # layer -> (dim, first line)
    seen: set[tuple[str, int]] = set()
    for lineno, raw in enumerate(source, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedRecord("invalid UTF-8", lineno) from exc
        if not raw.strip():
            continue
        rec = _parse_line(raw, lineno)
        key = (rec["task_id"], rec["t"])
        if key in seen:
            raise MalformedRecord(f"duplicate record for task '{key[0]}' t={key[1]}", lineno)
        seen.add(key)
        rec["activations"] = _parse_activations(rec, lineno)
        for layer, values in rec["activations"].items():
            if layer not in dims:
                dims[layer] = (len(values), lineno)
            elif dims[layer][0] != len(values):
                raise DimensionMismatch(
                    f"line {lineno}: layer {layer} has dim {len(values)}, "
                    f"but line {dims[layer][1]} has dim {dims[layer][0]}"
                )
        groups.setdefault(rec["task_id"], []).append((lineno, rec))

    corpus = []
    for task_id, items in groups.items():
        items.sort(key=lambda item: item[1]["t"])
        for i, (lineno, rec) in enumerate(items):
            if rec["t"] != i:
                raise MalformedRecord(f"task '{task_id}' is missing step t={i}", lineno)
        first = items[0][1]
        task = TaskInstruction(
            id=task_id,
            text=first.get("instruction") or task_id,
            domain_tag=first["domain_tag"],
            split=Split(first["split"]),
            seed=first.get("task_seed"),
            policy=first.get("policy"),
        )
        steps = tuple(
            StepRecord(
                t=rec["t"],
                thought=rec["thought"],
                action=rec["action"],
                observation=rec["observation"],
                activations=rec["activations"],
                oracle_success=rec.get("oracle_success"),
            )
            for _, rec in items
        )
        last_line, last = items[-1]
        for lineno, rec in items[:-1]:
            if rec.get("final_reward") is not None:
                raise MalformedRecord("final_reward only allowed on the last step", lineno)
        fr = last.get("final_reward")
        corpus.append(
            Trajectory(
                task=task,
                steps=steps,
                final_reward=None if fr is None else float(fr),
                finalized=fr is not None,
            )
        )
    return corpus


def read_annotations(source: IO[bytes] | IO[str], fields: Sequence[str]) -> dict[tuple[str, int], dict]:
    """Pull extra per-step fields (e.g. ``r_t``) out of a record stream."""
    out = {}
    for raw in source:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        if not raw.strip():
            continue
        rec = json.loads(raw)
        present = {f: rec[f] for f in fields if f in rec}
        if present:
            out[(rec["task_id"], rec["t"])] = present
    return out
