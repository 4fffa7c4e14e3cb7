"""Per-(layer, timestep) logistic probes on activation vectors.

Label 1 is Success, 0 is Failure. Training minimises mean binary
cross-entropy plus ``l2_lambda * |W|^2 / 2`` by full-batch gradient descent on
standardized features, keeping the checkpoint with the best validation loss.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from stepconf import seeding
from stepconf.conformal import Label
from stepconf.errors import DegenerateDataset, DimensionMismatch, EmptyCell
from stepconf.trajectory import ActivationKey, Trajectory, timestep_of


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    max_epochs: int = 500
    l2_lambda: float = 1e-3
    val_fraction: float = 0.2
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.l2_lambda < 0 or self.patience < 1:
            raise ValueError("invalid probe training configuration")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class ProbeParams:
    key: ActivationKey | None
    W: np.ndarray
    b: float
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def zeros(cls, dim: int, key: ActivationKey | None = None) -> ProbeParams:
        return cls(key, np.zeros(dim), 0.0, np.zeros(dim), np.ones(dim))

    def standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.W.shape[0]:
            raise DimensionMismatch(f"expected dim {self.W.shape[0]}, got {X.shape[1]}")
        return (X - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {
            "layer": self.key.layer if self.key else None,
            "timestep": self.key.timestep if self.key else None,
            "W": self.W.tolist(),
            "b": self.b,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ProbeParams:
        key = ActivationKey(d["layer"], d["timestep"]) if d.get("layer") is not None else None
        return cls(key, np.array(d["W"]), float(d["b"]), np.array(d["mean"]), np.array(d["scale"]))


@dataclass(frozen=True)
class ProbeMetrics:
    accuracy: float
    f1: float
    n_test: int
    positive_class: str = Label.SUCCESS.value


def classification_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> ProbeMetrics:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    if y_true.size == 0:
        raise EmptyCell("no examples to score")
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return ProbeMetrics(float(np.mean(y_true == y_pred)), f1, int(y_true.size))


def loss_and_gradient(
    params: ProbeParams, X: np.ndarray, y: np.ndarray, l2_lambda: float = 0.0
) -> tuple[float, np.ndarray, float]:
    """Regularised log-loss and its exact gradient w.r.t. (W, b)."""
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("empty batch")
    Z = params.standardize(X)
    if Z.shape[0] != y.shape[0]:
        raise DimensionMismatch("X and y disagree on the number of examples")
    logits = Z @ params.W + params.b
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits)) + 0.5 * l2_lambda * float(params.W @ params.W)
    resid = expit(logits) - y
    grad_W = Z.T @ resid / len(y) + l2_lambda * params.W
    return loss, grad_W, float(np.mean(resid))


def _bce(Z, y, W, b):
    logits = Z @ W + b
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def _stratified_split(y: np.ndarray, frac: float, rng: np.random.Generator):
    val = []
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == cls))
        k = min(max(1, int(round(frac * len(idx)))), len(idx) - 1)
        val.extend(idx[:k].tolist())
    val = np.sort(np.array(val))
    train = np.setdiff1d(np.arange(len(y)), val)
    return train, val


def train_probe(
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    key: ActivationKey | None = None,
    history: list | None = None,
) -> tuple[ProbeParams, ProbeMetrics]:
    """Fit one probe; returns parameters and validation metrics.

    If ``history`` is given, (epoch, train_loss, val_loss) is appended for
    every accepted early-stopping checkpoint.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch("X must be (n, dim) with one label per row")
    counts = np.bincount(y, minlength=2)
    if counts[0] < 2 or counts[1] < 2:
        raise DegenerateDataset(f"need >= 2 examples per class, got {counts.tolist()}")
    if np.all(X.std(axis=0) == 0):
        raise DegenerateDataset("all features are constant")

    train, val = _stratified_split(y, cfg.val_fraction, seeding.stream(cfg.seed, "val-split"))
    mean = X[train].mean(axis=0)
    scale = X[train].std(axis=0)
    scale[scale == 0] = 1.0
    Zt, Zv = (X[train] - mean) / scale, (X[val] - mean) / scale
    yt, yv = y[train].astype(float), y[val].astype(float)

    W = np.zeros(X.shape[1])
    b = 0.0
    best = (_bce(Zv, yv, W, b), W.copy(), b)
    if history is not None:
        history.append((0, _bce(Zt, yt, W, b) + 0.5 * cfg.l2_lambda * float(W @ W), best[0]))
    since = 0
    for epoch in range(1, cfg.max_epochs + 1):
        logits = Zt @ W + b
        resid = expit(logits) - yt
        W = W - cfg.learning_rate * (Zt.T @ resid / len(yt) + cfg.l2_lambda * W)
        b = b - cfg.learning_rate * float(np.mean(resid))
        v = _bce(Zv, yv, W, b)
        if v < best[0]:
            best = (v, W.copy(), b)
            since = 0
            if history is not None:
                history.append((epoch, _bce(Zt, yt, W, b) + 0.5 * cfg.l2_lambda * float(W @ W), v))
        else:
            since += 1
            if since >= cfg.patience:
                break

    params = ProbeParams(key, best[1], best[2], mean, scale)
    pred = (expit(Zv @ params.W + params.b) >= 0.5).astype(int)
    return params, classification_metrics(y[val], pred)


def predict_scores(params: ProbeParams, X: np.ndarray) -> np.ndarray:
    return expit(params.standardize(X) @ params.W + params.b)


def predict(params: ProbeParams, h: np.ndarray) -> tuple[float, Label]:
    h = np.asarray(h, dtype=float)
    if h.ndim != 1:
        raise DimensionMismatch("predict takes a single activation vector")
    score = float(predict_scores(params, h)[0])
    return score, Label.SUCCESS if score >= 0.5 else Label.FAILURE


# -- grids ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProbeCell:
    params: ProbeParams | None
    metrics: ProbeMetrics | None
    note: str = ""

    @property
    def present(self) -> bool:
        return self.params is not None


def cell_datasets(
    corpus: Sequence[Trajectory],
    labels: Mapping[tuple[str, int], Label | bool],
    layers: Sequence[int],
    timesteps: Sequence[int],
) -> dict[ActivationKey, tuple[np.ndarray, np.ndarray]]:
    """Gather (X, y) per cell. ``labels`` maps (task_id, step index) to a Label or bool.

    Abstain labels and unlabeled steps are skipped.
    """
    wanted = set(timesteps)
    rows: dict[ActivationKey, tuple[list, list]] = {
        ActivationKey(layer, t): ([], []) for layer in layers for t in timesteps
    }
    for traj in corpus:
        for step in traj.steps:
            ts = timestep_of(step)
            if ts not in wanted:
                continue
            lab = labels.get((traj.task.id, step.t))
            if lab is None or lab == Label.ABSTAIN:
                continue
            y = int(lab == Label.SUCCESS) if isinstance(lab, Label) else int(bool(lab))
            for layer in layers:
                if layer in step.activations:
                    xs, ys = rows[ActivationKey(layer, ts)]
                    xs.append(step.activations[layer])
                    ys.append(y)
    out = {}
    for key, (xs, ys) in rows.items():
        dim = len(xs[0]) if xs else 0
        out[key] = (np.array(xs, dtype=float).reshape(len(xs), dim), np.array(ys, dtype=int))
    return out


def train_grid(
    datasets: Mapping[ActivationKey, tuple[np.ndarray, np.ndarray]], cfg: TrainConfig = TrainConfig()
) -> dict[ActivationKey, ProbeCell]:
    """Train one probe per cell; cells that cannot be trained are kept with a note."""
    grid = {}
    for key in sorted(datasets, key=lambda k: (k.layer, k.timestep)):
        X, y = datasets[key]
        cell_cfg = TrainConfig(**{**asdict(cfg), "seed": seeding.derive_seed(cfg.seed, key.layer, key.timestep)})
        try:
            params, metrics = train_probe(X, y, cell_cfg, key)
        except (DegenerateDataset, DimensionMismatch) as exc:
            grid[key] = ProbeCell(None, None, f"{type(exc).__name__}: {exc}")
            continue
        grid[key] = ProbeCell(params, metrics)
    return grid


@dataclass(frozen=True)
class GridEvaluation:
    cells: Mapping[ActivationKey, ProbeMetrics | None]
    notes: Mapping[ActivationKey, str]

    @property
    def mean_accuracy(self) -> float:
        vals = [m.accuracy for m in self.cells.values() if m is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_f1(self) -> float:
        vals = [m.f1 for m in self.cells.values() if m is not None]
        return float(np.mean(vals)) if vals else float("nan")


def evaluate(
    grid: Mapping[ActivationKey, ProbeCell], test: Mapping[ActivationKey, tuple[np.ndarray, np.ndarray]]
) -> GridEvaluation:
    cells: dict[ActivationKey, ProbeMetrics | None] = {}
    notes: dict[ActivationKey, str] = {}
    for key, cell in grid.items():
        if not cell.present:
            cells[key] = None
            notes[key] = cell.note
            continue
        X, y = test.get(key, (np.empty((0, 0)), np.empty(0)))
        if len(y) == 0:
            cells[key] = None
            notes[key] = "EmptyCell: no labeled test examples"
            continue
        pred = (predict_scores(cell.params, X) >= 0.5).astype(int)
        cells[key] = classification_metrics(y, pred)
    return GridEvaluation(cells, notes)


def direction_classifier_accuracy(
    direction: np.ndarray, X_train: np.ndarray, y_train: np.ndarray, X_test: np.ndarray, y_test: np.ndarray
) -> float:
    """Accuracy of thresholding the projection onto a known direction.

    The threshold is the midpoint of the two class-mean projections on the
    training data.
    """
    proj = X_train @ direction
    cut = 0.5 * (proj[y_train == 1].mean() + proj[y_train == 0].mean())
    pred = (X_test @ direction >= cut).astype(int)
    return float(np.mean(pred == y_test))


# -- persistence -----------------------------------------------------------------------


def grid_to_json(grid: Mapping[ActivationKey, ProbeCell], cfg: TrainConfig) -> str:
    cfg_blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    doc = {
        "config": asdict(cfg),
        "config_digest": hashlib.sha256(cfg_blob).hexdigest(),
        "cells": [
            {
                "layer": k.layer,
                "timestep": k.timestep,
                "params": c.params.to_dict() if c.present else None,
                "metrics": asdict(c.metrics) if c.metrics else None,
                "note": c.note,
            }
            for k, c in sorted(grid.items(), key=lambda kv: (kv[0].layer, kv[0].timestep))
        ],
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def grid_from_json(text: str) -> dict[ActivationKey, ProbeCell]:
    doc = json.loads(text)
    grid = {}
    for c in doc["cells"]:
        key = ActivationKey(c["layer"], c["timestep"])
        params = ProbeParams.from_dict(c["params"]) if c["params"] else None
        metrics = ProbeMetrics(**c["metrics"]) if c["metrics"] else None
        grid[key] = ProbeCell(params, metrics, c["note"])
    return grid
