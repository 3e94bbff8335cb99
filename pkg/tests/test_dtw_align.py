import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facemotor.dtw_align import (AlignmentPath, FeatureSequence, check_path, dtw,
                                 warp_to_reference)

STEPS = ((1, 0), (0, 1), (1, 1))


def brute_force_dtw(a, b):
    """Minimum path cost by enumerating every monotone path from (0, 0)."""
    n, m = len(a), len(b)
    d = [[float(np.linalg.norm(a[i] - b[j])) for j in range(m)] for i in range(n)]
    best = [np.inf]

    def walk(i, j, acc):
        acc = acc + d[i][j]
        if (i, j) == (n - 1, m - 1):
            best[0] = min(best[0], acc)
            return
        for di, dj in STEPS:
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best[0]


def random_pair(rng):
    dim = int(rng.integers(1, 4))
    a = rng.normal(size=(int(rng.integers(1, 7)), dim))
    b = rng.normal(size=(int(rng.integers(1, 7)), dim))
    return a, b


def sequences(max_len=6, dim=2):
    return st.integers(1, max_len).flatmap(
        lambda n: arrays(np.float64, (n, dim), elements=st.floats(-10, 10)))


def test_identical_sequences():
    a = np.random.default_rng(0).normal(size=(7, 3))
    path = dtw(a, a)
    assert path.total_cost == 0.0
    assert path.pairs == [(i, i) for i in range(7)]


def test_worked_example():
    path = dtw(np.array([[0.0]]), np.array([[0.0], [1.0], [2.0]]))
    assert path.pairs == [(0, 0), (0, 1), (0, 2)]
    assert path.total_cost == 3.0


def test_matches_brute_force(rng):
    for _ in range(300):
        a, b = random_pair(rng)
        path = dtw(a, b)
        check_path(path, len(a), len(b))
        assert abs(path.total_cost - brute_force_dtw(a, b)) <= 1e-12


def test_total_cost_is_path_sum(rng):
    a, b = random_pair(rng)
    path = dtw(a, b)
    assert path.total_cost == sum(float(np.linalg.norm(a[i] - b[j])) for i, j in path.pairs)


@settings(max_examples=100)
@given(sequences(), sequences())
def test_symmetric_cost(a, b):
    assert dtw(a, b).total_cost == pytest.approx(dtw(b, a).total_cost, rel=1e-12, abs=1e-12)


@settings(max_examples=100)
@given(sequences(), sequences())
def test_path_valid_and_nonnegative(a, b):
    path = dtw(a, b)
    check_path(path, len(a), len(b))
    assert path.total_cost >= 0


@settings(max_examples=50)
@given(sequences(), st.lists(st.integers(1, 3), min_size=1, max_size=6))
def test_zero_cost_iff_matching_path(a, repeats):
    # stretching a sequence keeps a perfect match available
    reps = np.resize(np.array(repeats), len(a))
    stretched = np.repeat(a, reps, axis=0)
    assert dtw(a, stretched).total_cost == 0.0


def test_tie_break_prefers_diagonal():
    # every cell costs 0, so all paths tie; the diagonal must win
    a = np.zeros((3, 1))
    assert dtw(a, a).pairs == [(0, 0), (1, 1), (2, 2)]
    b = np.zeros((4, 1))
    assert dtw(a, b).pairs == [(0, 0), (0, 1), (1, 2), (2, 3)]


def test_band_matches_full_when_wide(rng):
    a, b = rng.normal(size=(12, 2)), rng.normal(size=(10, 2))
    assert dtw(a, b, band=12).pairs == dtw(a, b).pairs
    narrow = dtw(a, b, band=2)
    assert all(abs(i - j) <= 2 for i, j in narrow.pairs)
    assert narrow.total_cost >= dtw(a, b).total_cost
    with pytest.raises(ValueError):
        dtw(a, b, band=1)


def test_errors():
    with pytest.raises(ValueError, match="dimension"):
        dtw(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        dtw(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        FeatureSequence(np.array([[np.nan]]))


def test_warp_diagonal_is_identity():
    a = FeatureSequence(np.arange(5.0))
    path = AlignmentPath([(i, i) for i in range(5)], 0.0)
    assert np.array_equal(warp_to_reference(a, path, "a").frames, a.frames)


def test_warp_worked_example():
    sa, sb = FeatureSequence([0.0]), FeatureSequence([0.0, 1.0, 2.0])
    path = dtw(sa, sb)
    wb, wa = warp_to_reference(sb, path, "b"), warp_to_reference(sa, path, "a")
    assert wb.frames.ravel().tolist() == [0.0, 1.0, 2.0]
    assert wa.frames.ravel().tolist() == [0.0, 0.0, 0.0]


@settings(max_examples=50)
@given(sequences(), sequences())
def test_warped_sides_equal_length(a, b):
    path = dtw(a, b)
    assert len(warp_to_reference(a, path, "a")) == len(warp_to_reference(b, path, "b")) == len(path)


def test_warp_out_of_range():
    path = AlignmentPath([(0, 0), (1, 1), (2, 2)], 0.0)
    with pytest.raises(IndexError):
        warp_to_reference(FeatureSequence(np.zeros((2, 1))), path, "a")


def test_fseq_round_trip(tmp_path, rng):
    seq = FeatureSequence(rng.normal(size=(9, 4)), frame_rate=25.0)
    seq.save(tmp_path / "a.fseq")
    raw = (tmp_path / "a.fseq").read_bytes()
    assert raw[:4] == b"FSEQ"
    assert len(raw) == 4 + 2 + 4 + 4 + 8 + 9 * 4 * 8
    back = FeatureSequence.load(tmp_path / "a.fseq")
    assert np.array_equal(back.frames, seq.frames) and back.frame_rate == 25.0


def test_path_json_round_trip(rng):
    path = dtw(rng.normal(size=(4, 2)), rng.normal(size=(5, 2)))
    back = AlignmentPath.from_json(path.to_json())
    assert back == path
    assert set(json.loads(path.to_json())) == {"pairs", "total_cost"}


def test_thousand_pairs_fast(rng):
    t0 = time.perf_counter()
    for _ in range(1000):
        a, b = random_pair(rng)
        dtw(a, b)
    assert time.perf_counter() - t0 < 30
