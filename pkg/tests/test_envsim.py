import numpy as np
import pytest

from stepconf import seeding
from stepconf.envsim import (
    NOTHING_HAPPENS,
    EnvConfig,
    PolicyProfile,
    RepresentationConfig,
    deterministic_offset,
    drift_hazard,
    env_step,
    expert_completion,
    final_reward,
    generate_corpus,
    ground_truth_direction,
    hidden_state,
    is_drift_action,
    oracle_step_success,
    reset,
    run_episode,
    sample_action,
    split_counts,
)
from stepconf.errors import EpisodeNotTerminated, InvalidConfig, TerminatedEpisode, UnknownLayer
from stepconf.trajectory import Split, Trajectory, prefix

PLAN = {Split.TRAIN: 0.6, Split.CALIBRATION: 0.2, Split.PROBE_TRAIN: 0.2}


def _play(env, actions, seed=0):
    state, _, _ = reset(env, seed)
    for a in actions:
        state, _, _ = env_step(state, a)
    return state


def test_reset_is_deterministic():
    env = EnvConfig(seed=5)
    a, b = reset(env, 11), reset(env, 11)
    assert a[0].world.plan == b[0].world.plan and a[1] == b[1] and a[2] == b[2]
    assert reset(env, 12)[0].world != a[0].world


def test_plan_fills_horizon_by_default():
    state, task, _ = reset(EnvConfig(), 0)
    assert state.plan_len == 10 and task.text.startswith("Complete 10 sub-goals")


def test_correct_action_advances():
    state, _, _ = reset(EnvConfig(), 0)
    nxt, _, _ = env_step(state, state.next_plan_action)
    assert nxt.subgoals_done == 1 and nxt.step_count == 1


def test_hallucinated_object_is_a_noop():
    state, _, _ = reset(EnvConfig(), 0)
    nxt, obs, done = env_step(state, "take unicorn")
    assert obs == NOTHING_HAPPENS and not done
    assert nxt.subgoals_done == 0 and nxt.room == state.room and nxt.inventory == state.inventory
    assert nxt.step_count == 1


def test_horizon_cutoff():
    env = EnvConfig(horizon=10)
    state = _play(env, ["look around"] * 9)
    _, _, done = env_step(state, "look around")
    assert done
    with pytest.raises(TerminatedEpisode):
        env_step(_play(env, ["look around"] * 10), "look around")


def test_dense_reward_ratio():
    env = EnvConfig(n_subgoals=4, horizon=4)
    state, _, _ = reset(env, 0)
    plan = state.world.plan
    end = _play(env, [plan[0], plan[1], "look around", "look around"])
    assert final_reward(end, env) == 0.5


def test_sparse_reward_predicate():
    env = EnvConfig(kind="sparse")
    state, task, _ = reset(env, 0)
    assert final_reward(_play(env, list(state.world.plan)), env) == 1.0
    assert final_reward(_play(env, ["look around"] * 10), env) == 0.0
    assert task.text.startswith("Reach the goal")


def test_sparse_and_dense_share_world():
    dense, _, _ = reset(EnvConfig(kind="dense"), 4)
    sparse, _, _ = reset(EnvConfig(kind="sparse"), 4)
    assert dense.world == sparse.world


def test_final_reward_needs_termination():
    state, _, _ = reset(EnvConfig(), 0)
    with pytest.raises(EpisodeNotTerminated):
        final_reward(state, EnvConfig())


def test_config_validation():
    with pytest.raises(InvalidConfig):
        EnvConfig(n_subgoals=11, horizon=10)
    with pytest.raises(InvalidConfig):
        PolicyProfile(kind="noisy")
    with pytest.raises(InvalidConfig):
        PolicyProfile(kind="drifting", drift_onset=(1, 12)).check_horizon(10)


def test_expert_always_matches_plan():
    env = EnvConfig()
    state, task, _ = reset(env, 2)
    traj = Trajectory(task)
    rng = seeding.stream(0, "x")
    _, action = sample_action(PolicyProfile(), traj, state, rng)
    assert action == state.world.plan[0]


def test_noisy_zero_equals_expert():
    env, rep = EnvConfig(seed=1), RepresentationConfig(dim=8)
    a = run_episode(env, PolicyProfile(), rep, 3, seeding.stream(1, "p"), seeding.stream(1, "n"))
    b = run_episode(env, PolicyProfile(kind="noisy", error_rate=0.0), rep, 3, seeding.stream(1, "p"),
                    seeding.stream(1, "n"))
    assert a.actions == b.actions and a == b


def test_drift_with_fixed_onset():
    env, rep = EnvConfig(seed=2), RepresentationConfig(dim=8)
    traj = run_episode(env, PolicyProfile(kind="drifting", drift_onset=(3, 3)), rep, 9,
                       seeding.stream(2, "p"), seeding.stream(2, "n"))
    state, _, _ = reset(env, 9)
    assert traj.actions[:3] == list(state.world.plan[:3])
    assert all(is_drift_action(a) for a in traj.actions[3:])
    assert traj.final_reward < 1.0


def test_drift_hazard_gives_uniform_onset():
    lo, hi = 2, 6
    survive, probs = 1.0, []
    for t in range(10):
        h = drift_hazard((lo, hi), t)
        probs.append(survive * h)
        survive *= 1 - h
    assert np.allclose(probs[lo: hi + 1], 1 / (hi - lo + 1)) and sum(probs) == pytest.approx(1.0)


def test_oracle_on_expert_prefix_and_empty():
    env = EnvConfig()
    state, _, _ = reset(env, 0)
    assert oracle_step_success(state, env)
    assert oracle_step_success(_play(env, state.world.plan[:4]), env)


def test_oracle_false_when_too_few_steps():
    # 8-step plan, horizon 10: two wasted steps are tolerable, three are not
    env = EnvConfig(n_subgoals=8, horizon=10)
    assert oracle_step_success(_play(env, ["look around"] * 2), env)
    assert expert_completion(_play(env, ["look around"] * 3), env) == 7 / 8
    assert not oracle_step_success(_play(env, ["look around"] * 3), env)


def test_oracle_monotone_false(small_corpus):
    for traj in small_corpus:
        flags = [s.oracle_success for s in traj.steps]
        if False in flags:
            first = flags.index(False)
            assert not any(flags[first:])


def test_hidden_state_deterministic_and_unknown_layer(small_corpus):
    rep = RepresentationConfig(dim=8)
    p = prefix(small_corpus[0], 2)
    a = hidden_state(rep, p, 8, True, seeding.stream(0, "h"))
    b = hidden_state(rep, p, 8, True, seeding.stream(0, "h"))
    assert np.array_equal(a, b)
    with pytest.raises(UnknownLayer):
        hidden_state(rep, p, 9, True, seeding.stream(0, "h"))


def test_projection_without_noise(small_corpus):
    rep = RepresentationConfig(dim=16, noise_sigma=1e-12, margin=2.0)
    p = prefix(small_corpus[0], 3)
    g = ground_truth_direction(rep, 16)
    offset = float(deterministic_offset(rep, p, 16) @ g)
    for y, sign in ((True, 1.0), (False, -1.0)):
        h = hidden_state(rep, p, 16, y, seeding.stream(0, "h"))
        assert float(h @ g) == pytest.approx(sign + offset, abs=1e-9)


def test_margin_zero_is_label_free(small_corpus):
    rep = RepresentationConfig(margin=0.0)
    p = prefix(small_corpus[0], 1)
    a = hidden_state(rep, p, 8, True, seeding.stream(0, "h"))
    b = hidden_state(rep, p, 8, False, seeding.stream(0, "h"))
    assert np.array_equal(a, b)


def test_class_mean_difference_aligns_with_direction():
    rep = RepresentationConfig()
    rng = seeding.stream(0, "means")
    from stepconf.envsim import hidden_state_from_text

    pos = np.array([hidden_state_from_text(rep, "go to kitchen", 24, True, rng) for _ in range(10_000)])
    neg = np.array([hidden_state_from_text(rep, "go to kitchen", 24, False, rng) for _ in range(10_000)])
    diff = pos.mean(0) - neg.mean(0)
    cos = diff @ ground_truth_direction(rep, 24) / np.linalg.norm(diff)
    assert cos >= 0.99


def test_split_counts_exact():
    assert split_counts(100, PLAN) == {Split.TRAIN: 60, Split.CALIBRATION: 20, Split.PROBE_TRAIN: 20}
    assert sum(split_counts(7, PLAN).values()) == 7


def test_expert_corpus_all_succeed():
    env = EnvConfig(seed=4)
    corpus = generate_corpus(env, [(PolicyProfile(), 1.0)], RepresentationConfig(dim=8), 100, PLAN)
    assert all(t.final_reward >= env.threshold for t in corpus)
    assert all(len(s.activations) == 4 for t in corpus for s in t.steps)


def test_half_drifting_fails_about_half():
    env = EnvConfig(seed=6)
    profiles = [(PolicyProfile(), 0.5), (PolicyProfile(kind="drifting", drift_onset=(0, 8)), 0.5)]
    corpus = generate_corpus(env, profiles, RepresentationConfig(dim=8), 100, PLAN)
    fail = np.mean([t.final_reward < env.threshold for t in corpus])
    assert abs(fail - 0.5) <= 3 * np.sqrt(0.25 / 100)


def test_corpus_determinism_and_disjoint_ranges():
    env, rep = EnvConfig(seed=8), RepresentationConfig(dim=8)
    profiles = [(PolicyProfile(), 1.0)]
    a = generate_corpus(env, profiles, rep, 10, PLAN)
    assert a == generate_corpus(env, profiles, rep, 10, PLAN)
    b = generate_corpus(env, profiles, rep, 10, {Split.TEST_ID: 1.0}, id_prefix="t", first_episode=10)
    assert not {t.task.seed for t in a} & {t.task.seed for t in b}


def test_ood_split_uses_shifted_vocabulary():
    env = EnvConfig(seed=9)
    corpus = generate_corpus(env, [(PolicyProfile(), 1.0)], RepresentationConfig(dim=8), 5, {Split.TEST_OOD: 1.0})
    base, _, _ = reset(env, corpus[0].task.seed)
    assert corpus[0].actions != list(base.world.plan)
