import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepconf.conformal import (
    CalibrationStore,
    Cell,
    Label,
    Thresholds,
    audit_error_rates,
    calibrate,
    label_many,
    label_step,
    nonconformity,
    p_value,
    p_value_classical,
    store_from_json,
    store_to_json,
)
from stepconf.errors import EmptyCalibration, InsufficientCalibration, OutOfRangeReward, StoreNotFrozen

THR = Thresholds()


def test_nonconformity_pair():
    assert nonconformity(0.25) == (0.75, 0.25)
    with pytest.raises(OutOfRangeReward):
        nonconformity(1.5)


def test_p_value_hand_computed():
    # 4 scores >= 0.5 out of 5 -> (4 + 1) / 6
    assert p_value(0.5, [0.1, 0.5, 0.5, 0.7, 0.9]) == 5 / 6
    assert p_value(1.0, [0.1, 0.2]) == 1 / 3
    assert p_value(0.0, [0.1, 0.2]) == 1.0
    with pytest.raises(EmptyCalibration):
        p_value(0.3, [])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=50), st.integers(-1, 21))
def test_p_value_equals_rank_count(scores, x):
    # integer-valued scores force many ties
    vals = [s / 20 for s in scores]
    assert p_value(x / 20, sorted(vals)) == p_value_classical(x / 20, vals)


def _store(succ_r, fail_r, t=2):
    return calibrate([(t, r, True) for r in succ_r] + [(t, r, False) for r in fail_r], min_per_cell=1)


def test_label_rule():
    store = _store(np.linspace(0.6, 1.0, 20), np.linspace(0.0, 0.4, 20))
    assert label_step(0.95, 2, store, THR).value is Label.SUCCESS
    assert label_step(0.05, 2, store, THR).value is Label.FAILURE
    assert label_step(0.5, 2, store, THR).value is Label.ABSTAIN


def test_label_carries_p_values():
    store = _store([0.9] * 9, [0.1] * 9)
    lab = label_step(0.9, 2, store, THR)
    assert lab.pvalues.p_s == 1.0 and lab.pvalues.p_f == 0.1 and lab.pvalues.n_s == 9


def test_label_many_matches_scalar():
    rng = np.random.default_rng(0)
    store = _store(rng.beta(5, 2, 50), rng.beta(2, 5, 50))
    r = rng.random(200)
    ts = np.full(200, 2)
    assert label_many(r, ts, store, THR) == [label_step(x, 2, store, THR).value for x in r]


def test_unfrozen_store_rejected():
    store = CalibrationStore({}, Cell([0.1], [0.1]))
    with pytest.raises(StoreNotFrozen):
        label_step(0.5, 2, store, THR)


def test_calibrate_requires_both_populations():
    with pytest.raises(InsufficientCalibration):
        calibrate([(2, 0.9, True)] * 30 + [(2, 0.1, False)] * 5, min_per_cell=20)


def test_sparse_timesteps_fall_back_to_pooled():
    triples = [(2, 0.9, True)] * 25 + [(2, 0.1, False)] * 25 + [(3, 0.8, True)] * 3 + [(3, 0.2, False)] * 3
    store = calibrate(triples, min_per_cell=20)
    assert set(store.per_timestep) == {2}
    assert store.cell_for(3) is store.pooled and len(store.pooled.success) == 28


def test_audit_separates_abstain():
    store = _store(np.linspace(0.6, 1.0, 20), np.linspace(0.0, 0.4, 20))
    res = audit_error_rates(store, THR, [(2, 0.95, True), (2, 0.05, True), (2, 0.5, False), (2, 0.95, False)])
    assert (res.fnr, res.fpr, res.abstain_rate) == (0.5, 0.5, 0.25)


def test_store_json_roundtrip():
    store = _store([0.9, 0.8, 0.7], [0.1, 0.3])
    back, thr = store_from_json(store_to_json(store, Thresholds(0.05, 0.2)))
    assert back == store and thr == Thresholds(0.05, 0.2)


def test_store_json_tamper_detected():
    text = store_to_json(_store([0.9], [0.1]), THR).replace("0.1", "0.2", 1)
    with pytest.raises(ValueError):
        store_from_json(text)


def test_threshold_bounds():
    with pytest.raises(ValueError):
        Thresholds(0.0, 0.1)
