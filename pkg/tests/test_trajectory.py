import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mpedrnn.trajectory import (
    DegenerateBox,
    Detection,
    FormatError,
    GlobalFeature,
    LocalFeature,
    SkeletonFrame,
    Trajectory,
    apply_standardizer,
    decompose,
    decompose_array,
    fit_standardizer,
    group_trajectories,
    invert_standardizer,
    load_trajectories,
    parse_record,
    read_detections,
    recompose,
    recompose_array,
    save_trajectories,
    write_detections,
)
from oracles import linear_quantile

coord = st.floats(-1000, 1000, allow_nan=False)


@st.composite
def valid_frames(draw, k=None):
    k = draw(st.integers(2, 17)) if k is None else k
    pts = draw(arrays(np.float64, (k, 2), elements=coord))
    # force a non-degenerate box
    pts[0] = pts[:, :].min(axis=0) - draw(st.floats(0.5, 50))
    pts[1] = pts[:, :].max(axis=0) + draw(st.floats(0.5, 50))
    return pts


# ---------------------------------------------------------------------------
# decomposition examples


def test_decompose_two_joint_example():
    g, l = decompose(SkeletonFrame([(0, 0), (2, 4)]))
    assert g == GlobalFeature(1, 2, 2, 4)
    np.testing.assert_array_equal(l.joints, [(-0.5, -0.5), (0.5, 0.5)])


def test_decompose_three_joint_example():
    g, l = decompose(SkeletonFrame([(-1, -1), (1, 1), (0, 0)]))
    assert g == GlobalFeature(0, 0, 2, 2)
    np.testing.assert_array_equal(l.joints, [(-0.5, -0.5), (0.5, 0.5), (0, 0)])


def test_decompose_degenerate_raises():
    with pytest.raises(DegenerateBox):
        decompose(SkeletonFrame([(5, 5), (5, 5)]))
    with pytest.raises(DegenerateBox):
        decompose(SkeletonFrame([(1, 5), (3, 5)]))  # zero height


def test_recompose_examples():
    f = SkeletonFrame([(0, 0), (2, 4)])
    np.testing.assert_array_equal(recompose(*decompose(f)).joints, f.joints)
    out = recompose(GlobalFeature(0, 0, 1, 1), LocalFeature(np.array([[0.5, 0.5]])))
    np.testing.assert_array_equal(out.joints, [[0.5, 0.5]])
    out = recompose(GlobalFeature(10, 20, 4, 2), LocalFeature(np.array([[-0.5, 0.5]])))
    np.testing.assert_array_equal(out.joints, [[8, 21]])


def test_recompose_rejects_non_positive_extent():
    with pytest.raises(DegenerateBox):
        recompose(GlobalFeature(0, 0, 0, 1), LocalFeature(np.zeros((1, 2))))
    with pytest.raises(DegenerateBox):
        recompose(GlobalFeature(0, 0, 1, -2), LocalFeature(np.zeros((1, 2))))


@given(valid_frames())
def test_round_trip(f):
    g, l = decompose_array(f)
    np.testing.assert_allclose(recompose_array(g, l), f, rtol=0, atol=1e-9)


@given(valid_frames(), st.floats(-500, 500), st.floats(-500, 500))
def test_translation_equivariance(f, dx, dy):
    g, l = decompose_array(f)
    g2, l2 = decompose_array(f + np.array([dx, dy]))
    np.testing.assert_allclose(g2[:2], g[:2] + [dx, dy], atol=1e-9)
    np.testing.assert_allclose(g2[2:], g[2:], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(l2, l, atol=1e-9)


@given(valid_frames(), st.floats(0.1, 10))
def test_scale_covariance(f, s):
    g, l = decompose_array(f)
    center = g[:2]
    g2, l2 = decompose_array(center + s * (f - center))
    np.testing.assert_allclose(g2[2:], s * g[2:], rtol=1e-9)
    np.testing.assert_allclose(g2[:2], center, atol=1e-9 * max(1, np.abs(center).max()))
    np.testing.assert_allclose(l2, l, atol=1e-9)


@given(valid_frames())
def test_local_range_attains_half(f):
    g, l = decompose_array(f)
    assert np.all(l >= -0.5) and np.all(l <= 0.5)
    np.testing.assert_allclose(l.min(axis=0), [-0.5, -0.5])
    np.testing.assert_allclose(l.max(axis=0), [0.5, 0.5])
    # center lies within the joint hull's extent
    assert np.all(g[:2] >= f.min(axis=0)) and np.all(g[:2] <= f.max(axis=0))


def test_decompose_array_batches():
    rng = np.random.default_rng(0)
    f = rng.uniform(0, 100, size=(3, 5, 4, 2))
    g, l = decompose_array(f)
    assert g.shape == (3, 5, 4) and l.shape == (3, 5, 4, 2)
    g0, l0 = decompose_array(f[1, 2])
    np.testing.assert_array_equal(g[1, 2], g0)


# ---------------------------------------------------------------------------
# standardization


def test_standardizer_eleven_points():
    s = fit_standardizer(np.arange(11.0))
    assert s.median[0] == 5 and s.scale[0] == 8
    assert apply_standardizer(s, np.array([9.0]))[0] == 0.5


def test_standardizer_constant_feature_falls_back():
    s = fit_standardizer([7.0, 7.0, 7.0])
    assert s.median[0] == 7 and s.scale[0] == 1.0
    assert apply_standardizer(s, np.array([7.0]))[0] == 0


def test_standardizer_two_samples():
    s = fit_standardizer([0.0, 10.0])
    assert s.median[0] == 5
    assert apply_standardizer(s, np.array([5.0]))[0] == 0


def test_standardizer_errors():
    with pytest.raises(ValueError):
        fit_standardizer([])
    with pytest.raises(ValueError):
        fit_standardizer([[1.0, 2.0]])
    s = fit_standardizer(np.zeros((5, 3)))
    with pytest.raises(ValueError, match="3 features"):
        apply_standardizer(s, np.zeros(2))


@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 4)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_standardizer_matches_quantile_oracle(x):
    s = fit_standardizer(x)
    for j in range(x.shape[1]):
        col = list(x[:, j])
        spread = linear_quantile(col, 0.9) - linear_quantile(col, 0.1)
        assert s.median[j] == pytest.approx(linear_quantile(col, 0.5), abs=1e-9)
        expected = spread if spread > 0 else 1.0
        assert s.scale[j] == pytest.approx(expected, rel=1e-9, abs=1e-9)
        assert s.scale[j] > 0


@given(arrays(np.float64, (20, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)),
       arrays(np.float64, 3, elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_standardizer_inverse(x, v):
    s = fit_standardizer(x)
    back = invert_standardizer(s, apply_standardizer(s, v))
    np.testing.assert_allclose(back, v, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(s.median).max()))


# ---------------------------------------------------------------------------
# ingestion


def _rec(**kw):
    base = {"video_id": "v", "frame": 0, "person_id": 1, "joints": [[0, 0], [1, 2]]}
    base.update(kw)
    return json.dumps(base)


def test_parse_record_validates_fields():
    d = parse_record(_rec(conf=[0.5, 1.0]), 1)
    assert d.video_id == "v" and d.frame == 0 and d.person_id == 1
    for bad, msg in [("{", "invalid JSON"), ("[1]", "object"),
                     (json.dumps({"video_id": "v", "joints": [[0, 0]]}), "frame"),
                     (_rec(frame=1.5), "integer"), (_rec(joints=[[0, 0, 0]]), "joints"),
                     (_rec(joints=[[0, "x"]]), "joints"), (_rec(conf=[1.0]), "conf"),
                     (_rec(person_id="a"), "person_id")]:
        with pytest.raises(FormatError, match=msg) as exc:
            parse_record(bad, 7)
        assert "line 7" in str(exc.value)


def test_read_detections_reports_line_number(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(_rec() + "\n\n" + "not json\n")
    with pytest.raises(FormatError) as exc:
        read_detections(p)
    assert exc.value.line == 3


def test_group_sorts_and_splits(tmp_path):
    j = np.array([[0.0, 0.0], [1.0, 2.0]])
    dets = [Detection("v", f, j + f, None, 4) for f in [5, 3, 4, 7, 12, 13]]
    trajs = group_trajectories(dets)
    # 3,4,5 + interpolated 6 + 7 form one run; 12-13 start a new person id
    assert [(t.person_id, t.start_frame, len(t)) for t in trajs] == [(4, 3, 5), (5, 12, 2)]
    np.testing.assert_allclose(trajs[0].joints[3], j + 6)
    assert trajs[0].interpolated.tolist() == [False, False, False, True, False]


def test_group_drops_degenerate_and_splits():
    good = np.array([[0.0, 0.0], [1.0, 2.0]])
    bad = np.array([[1.0, 1.0], [1.0, 1.0]])
    dets = [Detection("v", 0, good, None, 0), Detection("v", 1, bad, None, 0),
            Detection("v", 2, good, None, 0), Detection("v", 3, good, None, 0)]
    trajs = group_trajectories(dets)
    assert [(t.start_frame, len(t)) for t in trajs] == [(0, 1), (2, 2)]


def test_group_rejects_duplicates_and_missing_person():
    j = np.array([[0.0, 0.0], [1.0, 2.0]])
    with pytest.raises(FormatError, match="duplicate"):
        group_trajectories([Detection("v", 1, j, None, 0), Detection("v", 1, j, None, 0)])
    with pytest.raises(FormatError, match="person_id"):
        group_trajectories([Detection("v", 1, j)])


def test_trajectory_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    trajs = [Trajectory("a", 0, 10, rng.uniform(0, 100, (6, 3, 2))),
             Trajectory("b", 2, 0, rng.uniform(0, 100, (4, 3, 2)), rng.uniform(0, 1, (4, 3)))]
    p = tmp_path / "t.jsonl"
    save_trajectories(p, trajs)
    back = load_trajectories(p)
    assert [(t.video_id, t.person_id, t.start_frame) for t in back] == [("a", 0, 10), ("b", 2, 0)]
    for a, b in zip(trajs, back):
        np.testing.assert_array_equal(a.joints, b.joints)
    np.testing.assert_array_equal(back[1].conf, trajs[1].conf)
    assert back[0].conf is None


def test_write_detections_is_deterministic(tmp_path):
    dets = [Detection("v", 0, np.array([[0.1, 0.2], [0.3, 0.4]]), None, 0)]
    write_detections(tmp_path / "a.jsonl", dets)
    write_detections(tmp_path / "b.jsonl", dets)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_skeleton_frame_validation():
    with pytest.raises(ValueError):
        SkeletonFrame(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        SkeletonFrame([[0, np.nan]])
