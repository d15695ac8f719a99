import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mpedrnn.datagen import SceneSpec, generate
from mpedrnn.tracking import TrackState, hungarian_assign, pair_cost, skeleton_cost, track
from mpedrnn.trajectory import Detection
from oracles import brute_force_assignment

# ---------------------------------------------------------------------------
# assignment


def test_hungarian_examples():
    a = hungarian_assign([[1, 2], [2, 1]])
    assert sorted(a.pairs) == [(0, 0), (1, 1)] and a.total == 2
    a = hungarian_assign([[0, 9], [9, 0]])
    assert sorted(a.pairs) == [(0, 0), (1, 1)] and a.total == 0
    a = hungarian_assign([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert sorted(a.pairs) == [(0, 1), (1, 0), (2, 2)] and a.total == 5


def test_hungarian_rectangular_and_empty():
    a = hungarian_assign([[5, 1, 7]])
    assert a.pairs == [(0, 1)] and a.total == 1
    a = hungarian_assign([[5], [1], [7]])
    assert a.pairs == [(1, 0)]
    assert hungarian_assign(np.zeros((0, 3))).pairs == []


def test_hungarian_gate_leaves_expensive_pairs_unmatched():
    a = hungarian_assign([[0.2, 3.0], [3.0, 2.0]], gate=1.5)
    assert a.pairs == [(0, 0)] and a.total == pytest.approx(0.2)


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian_assign([[np.inf, 1.0]])
    with pytest.raises(ValueError):
        hungarian_assign([1.0, 2.0])


costs_st = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(0, 10, allow_nan=False)))


@given(costs_st)
def test_hungarian_matches_brute_force(c):
    a = hungarian_assign(c)
    assert len(a.pairs) == min(c.shape)
    assert len({i for i, _ in a.pairs}) == len({j for _, j in a.pairs}) == len(a.pairs)
    assert a.total == pytest.approx(brute_force_assignment(c), abs=1e-9)


@given(costs_st, st.randoms(use_true_random=False))
def test_hungarian_total_invariant_under_permutation(c, rnd):
    rows = list(range(c.shape[0]))
    cols = list(range(c.shape[1]))
    rnd.shuffle(rows)
    rnd.shuffle(cols)
    assert hungarian_assign(c[np.ix_(rows, cols)]).total == pytest.approx(hungarian_assign(c).total, abs=1e-9)


@given(costs_st, st.floats(0.5, 8))
def test_gated_assignment_is_optimal_partial_matching(c, gate):
    a = hungarian_assign(c, gate)
    assert all(c[i, j] <= gate for i, j in a.pairs)
    # brute force: every partial matching, unmatched rows pay the gate
    n, m = c.shape
    best = np.inf
    for k in range(min(n, m) + 1):
        for rs in itertools.combinations(range(n), k):
            for cs in itertools.permutations(range(m), k):
                best = min(best, sum(c[i, j] for i, j in zip(rs, cs)) + gate * (n - k))
    assert a.total + gate * (n - len(a.pairs)) == pytest.approx(best, abs=1e-9)


# ---------------------------------------------------------------------------
# similarity


def _state(joints):
    return TrackState(0, 0, np.asarray(joints, dtype=float))


def _det(joints, frame=1):
    return Detection("v", frame, np.asarray(joints, dtype=float))


def test_pair_cost_examples():
    sk = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert pair_cost(_state(sk), _det(sk)) == 0.0
    assert pair_cost(_state(sk), _det(sk + 100)) > 1
    # box 3x4 (diagonal 5) moved by (1.5, 2): overlap 1.5 x 2 = 3, union 21
    assert pair_cost(_state(sk), _det(sk + [1.5, 2.0])) == pytest.approx(0.5 + (1 - 3 / 21), abs=1e-12)


def test_skeleton_cost_symmetric_in_identical_boxes():
    sk = np.array([[0.0, 0.0], [2.0, 2.0], [1.0, 0.5]])
    moved = sk.copy()
    moved[2] = [1.0, 1.5]
    # same box, so only the joint term remains: one joint moved by 1 over diagonal sqrt(8)
    assert skeleton_cost(sk, moved) == pytest.approx((1 / 3) / np.sqrt(8))


# ---------------------------------------------------------------------------
# tracking


def _walker(frames, x0, vx, y=100.0, person=None):
    base = np.array([[0.0, 0.0], [10.0, 30.0], [5.0, 10.0]])
    return [Detection("v", f, base + [x0 + vx * f, y], None, person) for f in frames]


def test_single_person_one_trajectory():
    out = track(_walker(range(20), 0, 1))
    assert len(out) == 1 and len(out[0]) == 20 and out[0].start_frame == 0


def test_two_people_crossing_slowly():
    a = _walker(range(40), 0, 1.0, y=100)
    b = _walker(range(40), 40, -1.0, y=160)
    out = track(a + b)
    assert len(out) == 2
    starts = sorted((t.joints[0, 0, 0], t.joints[-1, 0, 0]) for t in out)
    assert starts == [(0.0, 39.0), (40.0, 1.0)]


def test_single_missing_frame_is_interpolated():
    dets = _walker([f for f in range(10) if f != 4], 0, 1)
    (tr,) = track(dets)
    assert len(tr) == 10 and tr.interpolated.tolist() == [i == 4 for i in range(10)]
    np.testing.assert_allclose(tr.joints[4], dets[3].joints + [1, 0])


def test_long_gap_splits():
    dets = _walker([f for f in range(20) if not 8 <= f <= 11], 0, 1)
    out = track(dets, max_gap=2)
    assert [(t.start_frame, len(t)) for t in out] == [(0, 8), (12, 8)]


def test_empty_input():
    assert track([]) == []


def _key(j):
    return np.round(j, 9).tobytes()


@given(seed=st.integers(0, 2**31 - 1), drop=st.floats(0, 0.3))
def test_track_partitions_detections(seed, drop):
    rng = np.random.default_rng(seed)
    dets = []
    for p in range(3):
        frames = [f for f in range(30) if rng.random() >= drop]
        dets += _walker(frames, 50 * p + rng.uniform(0, 5), rng.uniform(-1, 1), y=80 * p)
    out = track(dets)
    seen = [_key(j) for t in out for j, interp in zip(t.joints, t.interpolated) if not interp]
    assert sorted(seen) == sorted(_key(d.joints) for d in dets)
    for t in out:
        assert len(t) == len(t.interpolated)


def test_tracks_reproduce_generator_ids():
    video = generate(SceneSpec(walkers=6, seed=5), [], 150, "v")
    out = track(video.detections)
    truth = {(d.frame, _key(d.joints)): d.person_id for d in video.detections}
    assert len(out) == 6
    mapping = set()
    for t in out:
        ids = {truth[(f, _key(j))] for f, j in zip(t.frames, t.joints)}
        assert len(ids) == 1
        mapping.add(ids.pop())
    assert mapping == set(range(6))
