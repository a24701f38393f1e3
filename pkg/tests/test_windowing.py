import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from emltrack.data_model import TrialKey
from emltrack.windowing import assign_folds, assign_user_folds, check_no_leakage, partition, window_count


def starts(d, w, s):
    return [x.start_s for x in partition(d, w, s)]


def test_overlap_example():
    assert starts(90, 30, 20) == [0, 20, 40, 60]


def test_single_window_boundary():
    ws = partition(30, 30, 15)
    assert len(ws) == 1 and (ws[0].start_s, ws[0].end_s) == (0.0, 30.0)


def test_sixty_seconds():
    assert starts(60, 30, 15) == [0, 15, 30]


def test_too_short_trial():
    assert partition(29.999, 30, 15) == []


def test_invalid_step():
    with pytest.raises(ValueError):
        partition(90, 30, 40)
    with pytest.raises(ValueError):
        partition(90, 30, 0)


@given(st.integers(0, 600_000), st.integers(1000, 60_000), st.data())
def test_window_count_formula(d_ms, w_ms, data):
    s_ms = data.draw(st.integers(1, w_ms))
    d, w, s = d_ms / 1000, w_ms / 1000, s_ms / 1000
    expected = math.floor((d_ms - w_ms) / s_ms) + 1 if d_ms >= w_ms else 0
    assert window_count(d, w, s) == expected
    ws = partition(d, w, s)
    assert len(ws) == expected
    # coverage: consecutive windows overlap or touch, so their union has no gaps
    for a, b in zip(ws, ws[1:]):
        assert b.start_s <= a.end_s
    if ws:
        assert ws[0].start_s == 0 and ws[-1].end_s <= d + 1e-9


def test_fold_sizes_pigeonhole():
    keys = [TrialKey("u", i) for i in range(1, 30)]
    fa = assign_folds(keys, 5, 11)
    assert sorted(fa.sizes()) == [5, 6, 6, 6, 6]


def test_folds_deterministic():
    keys = [TrialKey(u, i) for u in "abc" for i in range(1, 30)]
    assert assign_folds(keys, 5, 4) == assign_folds(keys, 5, 4)


def test_folds_balanced_per_user():
    keys = [TrialKey(u, i) for u in "abcd" for i in range(1, 30)]
    fa = assign_folds(keys, 5, 0)
    for u in "abcd":
        counts = [sum(1 for k in keys if k.user_id == u and fa[k] == f) for f in range(5)]
        assert max(counts) - min(counts) <= 1


@given(st.integers(2, 8), st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(8, 30))
def test_fold_partition_property(k, seed, n_users, n_trials):
    keys = [TrialKey(f"u{u}", t) for u in range(n_users) for t in range(1, n_trials + 1)]
    fa = assign_folds(keys, k, seed)
    assert set(fa.folds) == set(keys)
    for f in range(k):
        check_no_leakage(fa.train_keys(f), fa.test_keys(f))
        assert fa.train_keys(f) | fa.test_keys(f) == set(keys)


def test_assign_folds_errors():
    keys = [TrialKey("u", i) for i in range(1, 4)]
    with pytest.raises(ValueError):
        assign_folds(keys, 5, 0)
    with pytest.raises(ValueError):
        assign_folds(keys, 1, 0)


def test_user_folds():
    keys = [TrialKey(u, i) for u in "ab" for i in range(1, 4)]
    fa = assign_user_folds(keys)
    assert fa.k == 2 and {fa[k] for k in keys if k.user_id == "a"} == {0}


def test_leakage_check_raises():
    with pytest.raises(AssertionError):
        check_no_leakage({TrialKey("u", 1)}, {TrialKey("u", 1)})
