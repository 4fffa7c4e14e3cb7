"""Acceptance criteria 1-11.

Each test records one ``[PASS]``/``[FAIL]`` line with the measured value and
the pinned tolerance, then asserts. The lines are echoed in the pytest
terminal summary, or printed directly with ``python tests/test_acceptance.py``.
"""

import json
import math
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

sys.path.insert(0, str(Path(__file__).parent))
from conftest import ACCEPTANCE_LINES  # noqa: E402

from stepconf import seeding  # noqa: E402
from stepconf.config import PipelineConfig, config_from_dict  # noqa: E402
from stepconf.conformal import Thresholds, audit_by_timestep, calibrate, p_value, p_value_classical  # noqa: E402
from stepconf.envsim import (  # noqa: E402
    EnvConfig,
    PolicyProfile,
    RepresentationConfig,
    ground_truth_direction,
    reset,
    synthetic_cell,
)
from stepconf.pipeline import Pipeline  # noqa: E402
from stepconf.probes import (  # noqa: E402
    ProbeParams,
    TrainConfig,
    classification_metrics,
    direction_classifier_accuracy,
    loss_and_gradient,
    predict_scores,
    train_probe,
)
from stepconf.report import mean_metric  # noqa: E402
from stepconf.reward import RolloutBudget, estimate_step_reward  # noqa: E402
from stepconf.steering import (  # noqa: E402
    CoupledAgent,
    InterventionSpec,
    closed_loop_eval,
    collect_coupled_activations,
    compute_direction,
)
from stepconf.trajectory import Trajectory  # noqa: E402

LAYERS = (8, 16, 24, 32)
TIMESTEPS = range(2, 11)


def record(n: int, ok: bool, text: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def _marginal_p_values(n_trials=10_000, n_cal=500, seed=0):
    """One test score per trial against a freshly drawn calibration set."""
    rng = seeding.stream(seed, "marginal")
    cal = np.sort(rng.random((n_trials, n_cal)), axis=1)
    test = rng.random(n_trials)
    return np.array([p_value(x, row) for x, row in zip(test, cal)])


def test_c1_marginal_validity():
    t0 = time.perf_counter()
    p = _marginal_p_values()
    elapsed = time.perf_counter() - t0
    parts, ok = [], elapsed < 10.0
    for eps in (0.05, 0.1, 0.2):
        rate = float(np.mean(p < eps))
        bound = eps + 3 * math.sqrt(eps * (1 - eps) / 10_000)
        ok &= rate <= bound
        parts.append(f"eps={eps}: {rate:.4f}<={bound:.4f}")
    assert record(1, ok, "; ".join(parts) + f"; {elapsed:.1f}s < 10s")


def test_c2_theorem_audit():
    t0 = time.perf_counter()
    rng = seeding.stream(0, "audit")
    thr = Thresholds(0.1, 0.1)
    cal, held = [], []
    for t in TIMESTEPS:
        cal += [(t, r, True) for r in rng.beta(8, 2, 200)] + [(t, r, False) for r in rng.beta(2, 8, 200)]
        held += [(t, r, True) for r in rng.beta(8, 2, 2000)] + [(t, r, False) for r in rng.beta(2, 8, 2000)]
    store = calibrate(cal, min_per_cell=200)
    res = audit_by_timestep(store, thr, held)
    elapsed = time.perf_counter() - t0
    worst_fnr = max(a.fnr for a in res.values())
    worst_fpr = max(a.fpr for a in res.values())
    ok = len(res) == 9 and len(store.per_timestep) == 9 and worst_fnr <= 0.12 and worst_fpr <= 0.12
    ok &= elapsed < 30.0
    assert record(2, ok, f"max FNR {worst_fnr:.4f}, max FPR {worst_fpr:.4f} (<=0.12) over 9 cells; "
                         f"{elapsed:.1f}s < 30s")


def test_c3_pvalue_oracle():
    rng = seeding.stream(0, "oracle")
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        # rounding forces ties between test and calibration scores
        scores = np.round(rng.random(n), 2)
        x = float(np.round(rng.random(), 2))
        if p_value(x, np.sort(scores)) != p_value_classical(x, scores.tolist()):
            mismatches += 1
    assert record(3, mismatches == 0, f"{mismatches} mismatches in 1000 instances (exact equality)")


def test_c4_uniformity():
    n_cal = 500
    p = _marginal_p_values(seed=1)
    support = np.arange(1, n_cal + 2) / (n_cal + 1)
    emp = np.searchsorted(np.sort(p), support, side="right") / len(p)
    ks = float(np.max(np.abs(emp - support)))
    assert record(4, ks <= 0.02, f"KS distance {ks:.4f} <= 0.02 at 10,000 draws")


def _grid(rep, n_train=500, n_test=200, seed=0, with_oracle=False):
    cells = {}
    for layer in LAYERS:
        for t in TIMESTEPS:
            rng = seeding.stream(seed, "cell", rep.margin, layer, t)
            Xtr, ytr = synthetic_cell(rep, layer, t, n_train, rng)
            Xte, yte = synthetic_cell(rep, layer, t, n_test, rng)
            params, _ = train_probe(Xtr, ytr, TrainConfig(seed=seeding.derive_seed(seed, layer, t)))
            m = classification_metrics(yte, predict_scores(params, Xte) >= 0.5)
            oracle = None
            if with_oracle:
                oracle = direction_classifier_accuracy(ground_truth_direction(rep, layer), Xtr, ytr, Xte, yte)
            cells[(layer, t)] = (m.accuracy, m.f1, oracle)
    return cells


def test_c5_probe_separability():
    t0 = time.perf_counter()
    cells = _grid(RepresentationConfig(margin=2.0, noise_sigma=1.0, dim=64), with_oracle=True)
    elapsed = time.perf_counter() - t0
    acc = np.array([c[0] for c in cells.values()])
    f1 = np.array([c[1] for c in cells.values()])
    gap = np.array([abs(c[0] - c[2]) for c in cells.values()])
    oracle = np.array([c[2] for c in cells.values()])
    ok_a = bool(np.all(acc >= 0.95) and np.all(f1 >= 0.95))
    ok_b = bool(np.all(gap <= 0.02))
    record(5, ok_a, f"(a) min accuracy {acc.min():.3f}, min F1 {f1.min():.3f} (need >=0.95 in all 36 cells); "
                    f"ground-truth-direction oracle mean {oracle.mean():.3f}")
    record(5, ok_b, f"(b) {int(np.sum(gap <= 0.02))}/36 cells within 0.02 of oracle, max gap {gap.max():.3f}")
    ok_t = elapsed < 120.0
    record(5, ok_t, f"(c) full grid in {elapsed:.1f}s < 120s")
    assert ok_a and ok_b and ok_t


def test_c6_negative_control():
    means = []
    for margin in (0.0, 0.5, 1.0, 2.0, 4.0):
        cells = _grid(RepresentationConfig(margin=margin), n_train=200, n_test=200, seed=1)
        means.append(float(np.mean([c[0] for c in cells.values()])))
    rho = spearmanr([0.0, 0.5, 1.0, 2.0, 4.0], means).statistic
    ok = abs(means[0] - 0.5) <= 0.05 and rho >= 0.9
    curve = ", ".join(f"{m:.3f}" for m in means)
    assert record(6, ok, f"margin-0 mean accuracy {means[0]:.3f} (0.5+-0.05); dose-response [{curve}], "
                         f"Spearman {rho:.2f} >= 0.9")


def test_c7_gradient_check():
    rng = seeding.stream(0, "gradcheck")
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        n, d = int(rng.integers(5, 40)), int(rng.integers(2, 12))
        X = rng.standard_normal((n, d)) * rng.uniform(0.5, 3.0)
        y = rng.integers(0, 2, n)
        lam = float(rng.uniform(0, 0.1))
        p = ProbeParams(None, rng.standard_normal(d), float(rng.standard_normal()), X.mean(0), X.std(0) + 0.1)
        _, gW, gb = loss_and_gradient(p, X, y, lam)
        analytic = np.append(gW, gb)
        numeric = np.empty(d + 1)
        for j in range(d + 1):
            e = np.zeros(d + 1)
            e[j] = h
            plus = ProbeParams(None, p.W + e[:d], p.b + e[d], p.mean, p.scale)
            minus = ProbeParams(None, p.W - e[:d], p.b - e[d], p.mean, p.scale)
            numeric[j] = (loss_and_gradient(plus, X, y, lam)[0] - loss_and_gradient(minus, X, y, lam)[0]) / (2 * h)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(rel))
    assert record(7, worst < 1e-4, f"max relative error {worst:.2e} < 1e-4 over 100 instances")


def test_c8_mc_convergence():
    env = EnvConfig(n_subgoals=1, horizon=1)
    _, task, _ = reset(env, 0)
    empty = Trajectory(task)
    parts, ok = [], True
    for p_star in (0.25, 0.5, 0.75):
        policy = PolicyProfile(kind="noisy", error_rate=1.0 - p_star)
        tol = 3 * math.sqrt(p_star * (1 - p_star) / 64)
        hits = sum(
            abs(estimate_step_reward(empty, policy, env, RolloutBudget(64, seed=rep)).r_t - p_star) <= tol
            for rep in range(1000)
        )
        ok &= hits >= 990
        parts.append(f"p*={p_star}: {hits}/1000")
    assert record(8, ok, "; ".join(parts) + " within 3 sigma (need >=990)")


def test_c9_steering_lift():
    env = EnvConfig()
    agent = CoupledAgent(RepresentationConfig(), layer=16)
    succ, fail = collect_coupled_activations(env, agent, 2000, seed=11)
    vec = compute_direction(succ, fail, 16)
    cos = float(vec.d @ ground_truth_direction(agent.rep, 16))
    res = closed_loop_eval(env, agent, InterventionSpec(16, {3}, 0.025), vec, 2000, seed=12)
    zero = closed_loop_eval(env, agent, InterventionSpec(16, {3}, 0.0), vec, 2000, seed=12)
    ok = cos >= 0.95 and res.lift > 0 and res.ci95[0] > 0 and zero.lift == 0.0
    assert record(9, ok, f"cosine {cos:.3f} (>=0.95); lift {res.lift:+.4f}, 95% CI "
                         f"[{res.ci95[0]:+.4f}, {res.ci95[1]:+.4f}] excludes 0; coefficient-0 lift {zero.lift}")


def _mean_probe_accuracy(kind: str, seed: int) -> float:
    cfg = PipelineConfig(n_episodes=500, n_test_id=200, n_test_ood=0, calibration_labels="final-outcome",
                         master_seed=seed)
    cfg = replace(cfg, env=replace(cfg.env, kind=kind))
    with tempfile.TemporaryDirectory() as d:
        pipe = Pipeline(cfg, d)
        pipe.run("probe")
        metrics = json.loads(pipe.metrics_path(cfg.env.kind).read_text())
    return mean_metric(metrics["test"]["test-id/conformal"]["cells"], "accuracy")


@pytest.mark.slow
def test_c10_dense_vs_sparse():
    wins, parts = 0, []
    for seed in range(5):
        dense, sparse = _mean_probe_accuracy("dense", seed), _mean_probe_accuracy("sparse", seed)
        wins += dense >= sparse
        parts.append(f"{dense:.3f}/{sparse:.3f}")
    assert record(10, wins >= 4, f"dense>=sparse in {wins}/5 seeds (need >=4); dense/sparse " + " ".join(parts))


def test_c11_determinism():
    cfg = config_from_dict({"n_episodes": 150, "n_test_id": 50, "n_test_ood": 30, "compare_kinds": ["sparse"],
                            "steering": {"n_episodes": 100}})
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        Pipeline(cfg, a).run()
        Pipeline(cfg, b).run()
        files_a = {p.name: p.read_bytes() for p in (Path(a) / "report").iterdir()}
        files_b = {p.name: p.read_bytes() for p in (Path(b) / "report").iterdir()}
    same = files_a == files_b and len(files_a) > 0
    assert record(11, same, f"{len(files_a)} report files byte-identical across two runs")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_c") and callable(fn):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
