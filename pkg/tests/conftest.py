import numpy as np
import pytest

from stepconf.envsim import EnvConfig, PolicyProfile, RepresentationConfig, generate_corpus
from stepconf.trajectory import Split, StepRecord, TaskInstruction, Trajectory, append_step, finalize

# lines printed by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_traj(n_steps=3, task_id="task-0", dim=4, layers=(8, 16), final=0.75, seed=0, split=Split.TRAIN):
    rng = np.random.default_rng(seed)
    traj = Trajectory(TaskInstruction(task_id, "Clean a tomato and put it on the shelf.", "dense-world", split))
    for t in range(n_steps):
        acts = {layer: rng.standard_normal(dim) for layer in layers}
        traj = append_step(traj, StepRecord(t, f"act {t}", f"obs {t}", f"think {t}", acts, bool(t % 2)))
    return finalize(traj, final) if final is not None else traj


@pytest.fixture
def small_corpus():
    env = EnvConfig(seed=3)
    rep = RepresentationConfig(dim=8, seed=3)
    profiles = {
        "expert": (PolicyProfile(seed=1), 0.5),
        "drifting": (PolicyProfile(kind="drifting", drift_onset=(1, 6), seed=2), 0.5),
    }
    plan = {Split.TRAIN: 0.6, Split.CALIBRATION: 0.2, Split.PROBE_TRAIN: 0.2}
    return generate_corpus(env, profiles, rep, 20, plan)
