"""Inductive conformal labeling of step-wise rewards.

Two reference populations are kept: nonconformity scores of steps known to be
successful (``alpha_s = 1 - r``) and of steps known to fail (``alpha_f = r``).
A new reward gets a p-value against each, and the pair decides the label.
"""

from __future__ import annotations

import bisect
import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from stepconf.errors import (
    EmptyCalibration,
    EmptyInput,
    InsufficientCalibration,
    OutOfRangeReward,
    StoreNotFrozen,
)


class Label(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    ABSTAIN = "abstain"


@dataclass(frozen=True)
class Thresholds:
    eps_s: float = 0.1
    eps_f: float = 0.1

    def __post_init__(self):
        for name in ("eps_s", "eps_f"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass(frozen=True)
class PValuePair:
    p_s: float
    p_f: float
    n_s: int
    n_f: int


@dataclass(frozen=True)
class StepLabel:
    value: Label
    pvalues: PValuePair


def nonconformity(r_t: float) -> tuple[float, float]:
    """Scores of ``r_t`` against the success and failure populations."""
    if not 0.0 <= r_t <= 1.0:
        raise OutOfRangeReward(f"reward {r_t} outside [0, 1]")
    return 1.0 - r_t, r_t


def p_value(alpha_x: float, cal_scores: Sequence[float]) -> float:
    """(#{j: alpha_x <= alpha_j} + 1) / (n + 1) for ascending ``cal_scores``."""
    n = len(cal_scores)
    if n == 0:
        raise EmptyCalibration("calibration scores are empty")
    at_least = n - bisect.bisect_left(cal_scores, alpha_x)
    return (at_least + 1) / (n + 1)


def p_values(alphas: np.ndarray, cal_scores: np.ndarray) -> np.ndarray:
    """Vectorised :func:`p_value` over many test scores."""
    n = len(cal_scores)
    if n == 0:
        raise EmptyCalibration("calibration scores are empty")
    at_least = n - np.searchsorted(cal_scores, alphas, side="left")
    return (at_least + 1) / (n + 1)


def p_value_classical(alpha_x: float, scores: Sequence[float]) -> float:
    """Exhaustive-count p-value over an unsorted reference sample."""
    if len(scores) == 0:
        raise EmptyInput("no reference scores")
    count = sum(1 for a in scores if alpha_x <= a)
    return (count + 1) / (len(scores) + 1)


@dataclass(frozen=True, eq=False)
class Cell:
    success: np.ndarray  # ascending alpha_s of successful steps
    failure: np.ndarray  # ascending alpha_f of failing steps

    def __post_init__(self):
        for name in ("success", "failure"):
            arr = np.sort(np.asarray(getattr(self, name), dtype=np.float64))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        return (
            isinstance(other, Cell)
            and np.array_equal(self.success, other.success)
            and np.array_equal(self.failure, other.failure)
        )


@dataclass(frozen=True, eq=False)
class CalibrationStore:
    per_timestep: Mapping[int, Cell]
    pooled: Cell
    min_per_cell: int = 20
    frozen: bool = False

    def cell_for(self, timestep: int) -> Cell:
        return self.per_timestep.get(timestep, self.pooled)

    def freeze(self) -> CalibrationStore:
        return CalibrationStore(dict(self.per_timestep), self.pooled, self.min_per_cell, frozen=True)

    def __eq__(self, other):
        return (
            isinstance(other, CalibrationStore)
            and self.min_per_cell == other.min_per_cell
            and self.frozen == other.frozen
            and self.pooled == other.pooled
            and self.per_timestep.keys() == other.per_timestep.keys()
            and all(self.per_timestep[k] == other.per_timestep[k] for k in self.per_timestep)
        )


def calibrate(labeled_steps: Iterable[tuple[int, float, bool]], min_per_cell: int = 20) -> CalibrationStore:
    """Build a frozen store from (timestep, r_t, outcome) triples.

    A per-timestep cell is kept only when both of its populations reach
    ``min_per_cell``; the pooled cell is always built.
    """
    succ: dict[int, list[float]] = {}
    fail: dict[int, list[float]] = {}
    for t, r, ok in labeled_steps:
        a_s, a_f = nonconformity(r)
        if ok:
            succ.setdefault(int(t), []).append(a_s)
        else:
            fail.setdefault(int(t), []).append(a_f)
    all_s = [a for v in succ.values() for a in v]
    all_f = [a for v in fail.values() for a in v]
    if len(all_s) < min_per_cell or len(all_f) < min_per_cell or not all_s or not all_f:
        raise InsufficientCalibration(
            f"need >= {min_per_cell} success and failure scores, got {len(all_s)} and {len(all_f)}"
        )
    cells = {
        t: Cell(succ[t], fail[t])
        for t in sorted(set(succ) & set(fail))
        if len(succ[t]) >= min_per_cell and len(fail[t]) >= min_per_cell
    }
    return CalibrationStore(cells, Cell(all_s, all_f), min_per_cell, frozen=True)


def _decide(p_s: float, p_f: float, thr: Thresholds) -> Label:
    s_ok = p_s >= thr.eps_s
    f_ok = p_f >= thr.eps_f
    if s_ok and not f_ok:
        return Label.SUCCESS
    if f_ok and not s_ok:
        return Label.FAILURE
    return Label.ABSTAIN


def label_step(r_t: float, timestep: int, store: CalibrationStore, thr: Thresholds) -> StepLabel:
    if not store.frozen:
        raise StoreNotFrozen("calibration store must be frozen before labeling")
    a_s, a_f = nonconformity(r_t)
    cell = store.cell_for(timestep)
    p_s = p_value(a_s, cell.success)
    p_f = p_value(a_f, cell.failure)
    return StepLabel(_decide(p_s, p_f, thr), PValuePair(p_s, p_f, len(cell.success), len(cell.failure)))


def label_many(rewards: np.ndarray, timesteps: np.ndarray, store: CalibrationStore, thr: Thresholds) -> list[Label]:
    """Vectorised labels for parallel arrays of rewards and timesteps."""
    if not store.frozen:
        raise StoreNotFrozen("calibration store must be frozen before labeling")
    rewards = np.asarray(rewards, dtype=float)
    timesteps = np.asarray(timesteps)
    if rewards.size and (rewards.min() < 0 or rewards.max() > 1):
        raise OutOfRangeReward("rewards must lie in [0, 1]")
    out: list[Label] = [Label.ABSTAIN] * len(rewards)
    for t in np.unique(timesteps):
        idx = np.flatnonzero(timesteps == t)
        cell = store.cell_for(int(t))
        p_s = p_values(1.0 - rewards[idx], cell.success)
        p_f = p_values(rewards[idx], cell.failure)
        for i, ps, pf in zip(idx, p_s, p_f):
            out[i] = _decide(ps, pf, thr)
    return out


@dataclass(frozen=True)
class AuditResult:
    fnr: float
    fpr: float
    abstain_rate: float
    n: int
    n_success: int
    n_failure: int


def audit_error_rates(
    store: CalibrationStore, thr: Thresholds, heldout: Sequence[tuple[int, float, bool]]
) -> AuditResult:
    """Empirical error rates; abstentions are reported, never counted as errors."""
    if not heldout:
        return AuditResult(0.0, 0.0, 0.0, 0, 0, 0)
    ts = np.array([h[0] for h in heldout])
    rs = np.array([h[1] for h in heldout], dtype=float)
    ok = np.array([bool(h[2]) for h in heldout])
    labels = np.array([lab.value for lab in label_many(rs, ts, store, thr)])
    n_s, n_f = int(ok.sum()), int((~ok).sum())
    fn = int(np.sum(ok & (labels == Label.FAILURE.value)))
    fp = int(np.sum(~ok & (labels == Label.SUCCESS.value)))
    return AuditResult(
        fnr=fn / n_s if n_s else 0.0,
        fpr=fp / n_f if n_f else 0.0,
        abstain_rate=float(np.mean(labels == Label.ABSTAIN.value)),
        n=len(heldout),
        n_success=n_s,
        n_failure=n_f,
    )


def audit_by_timestep(
    store: CalibrationStore, thr: Thresholds, heldout: Sequence[tuple[int, float, bool]]
) -> dict[int, AuditResult]:
    by_t: dict[int, list] = {}
    for item in heldout:
        by_t.setdefault(int(item[0]), []).append(item)
    return {t: audit_error_rates(store, thr, items) for t, items in sorted(by_t.items())}


# -- persistence ------------------------------------------------------------------


def _content(store: CalibrationStore, thr: Thresholds) -> dict:
    return {
        "thresholds": {"eps_s": thr.eps_s, "eps_f": thr.eps_f},
        "min_per_cell": store.min_per_cell,
        "pooled": {"success": store.pooled.success.tolist(), "failure": store.pooled.failure.tolist()},
        "cells": {
            str(t): {"success": c.success.tolist(), "failure": c.failure.tolist()}
            for t, c in sorted(store.per_timestep.items())
        },
    }


def _digest(content: dict) -> str:
    blob = json.dumps(content, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def store_to_json(store: CalibrationStore, thr: Thresholds) -> str:
    content = _content(store, thr)
    doc = dict(content, digest=_digest(content))
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def store_from_json(text: str) -> tuple[CalibrationStore, Thresholds]:
    doc = json.loads(text)
    digest = doc.pop("digest", None)
    if digest != _digest(doc):
        raise ValueError("calibration store digest does not match its content")
    cells = {int(t): Cell(c["success"], c["failure"]) for t, c in doc["cells"].items()}
    pooled = Cell(doc["pooled"]["success"], doc["pooled"]["failure"])
    thr = Thresholds(**doc["thresholds"])
    return CalibrationStore(cells, pooled, doc["min_per_cell"], frozen=True), thr
