import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from caveseg import caveline3d as L
from caveseg.errors import (BehindCameraError, DataError, DegenerateGeometryError, FormatError,
                            ParallelRayError, ParameterError)

I3 = np.eye(3)


def cam(R=I3, t=(0, 0, 0), f=100.0, c=0.0, segments=(), **kw):
    return L.CameraView(f, f, c, c, R, t, np.array(segments, dtype=float).reshape(-1, 2, 2), **kw)


def project_segment(view, seg3):
    uv, z = view.project(seg3)
    assert np.all(z > 0)
    return uv


# --- camera ---------------------------------------------------------------------


def test_camera_validation():
    with pytest.raises(ParameterError):
        cam(f=0.0)
    with pytest.raises(ParameterError):
        cam(R=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ParameterError):
        cam(R=2 * I3)
    with pytest.raises(ParameterError):
        cam(segments=[[[0, 0], [700, 0]]], width=640, height=480)
    v = cam(segments=[[[0, 0], [640, 480]]], width=640, height=480)
    assert v.segments.shape == (1, 2, 2)


def test_center_is_minus_rt_t():
    R = Rotation.from_euler("xyz", [10, -20, 30], degrees=True).as_matrix()
    t = np.array([1.0, 2.0, 3.0])
    v = cam(R, t)
    np.testing.assert_allclose(v.center, -R.T @ t, atol=1e-15)
    np.testing.assert_allclose(v.to_camera(v.center), 0, atol=1e-14)


# --- back-projection -------------------------------------------------------------


def test_principal_point_ray_along_z():
    v = L.CameraView(500, 400, 320, 240, I3, np.zeros(3))
    r = L.backproject_ray(v, (320, 240))
    np.testing.assert_array_equal(r.origin, 0)
    np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-15)


def test_ray_closed_form():
    r = L.backproject_ray(cam(), (100, 0))
    np.testing.assert_allclose(r.direction, np.array([1, 0, 1]) / math.sqrt(2), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-500, 500), st.floats(-500, 500), st.integers(0, 1000))
def test_ray_unit_norm_and_reprojects(u, v, seed):
    R = Rotation.random(random_state=seed).as_matrix()
    view = L.CameraView(300, 250, 10, -5, R, np.array([0.5, -1, 2]))
    ray = L.backproject_ray(view, (u, v))
    assert abs(np.linalg.norm(ray.direction) - 1) < 1e-12
    uv, z = view.project(ray.origin + 3.0 * ray.direction)
    assert z > 0
    np.testing.assert_allclose(uv, [u, v], atol=1e-8)


# --- planes ----------------------------------------------------------------------


def test_plane_normal_orthogonal_to_rays():
    v = cam(Rotation.from_euler("y", 17, degrees=True).as_matrix(), (0.3, 0, 1))
    seg = np.array([[12.0, -40.0], [-30.0, 55.0]])
    pl = L.segment_plane(v, seg)
    for p in seg:
        assert abs(pl.normal @ L.backproject_ray(v, p).direction) < 1e-12
    assert abs(pl.normal @ v.center + pl.offset) < 1e-12
    assert abs(np.linalg.norm(pl.normal) - 1) < 1e-15


def test_horizontal_segment_on_principal_row_gives_y_normal():
    pl = L.segment_plane(cam(), [[-50, 0], [80, 0]])
    np.testing.assert_allclose(np.abs(pl.normal), [0, 1, 0], atol=1e-15)


def test_zero_length_segment_is_degenerate():
    with pytest.raises(DegenerateGeometryError):
        L.segment_plane(cam(), [[3, 4], [3, 4]])


# --- triangulation ------------------------------------------------------------------


def test_thirty_degree_round_trip():
    truth = np.array([[-0.4, 0.2, 0.1], [0.5, -0.3, 0.4]])
    views, _ = L.synthetic_views(0, n_segments=1, baseline_deg=30)
    a, b = views
    sa, sb = project_segment(a, truth), project_segment(b, truth)
    got = L.triangulate_segment(a, b, sa, sb)
    assert np.abs(got - truth).max() <= 1e-6
    got2 = L.triangulate_segment(b, a, sb, sa)
    assert np.abs(got2 - truth).max() <= 1e-6


def test_ray_in_plane_is_parallel_error():
    # both views share the optical centre line y=0 plane; a ray in that plane is parallel
    a = cam()
    b = cam(t=(-1, 0, 0))
    with pytest.raises(ParallelRayError):
        L.triangulate_segment(a, b, [[-50, 0], [50, 0]], [[10, 0], [20, 0]])


def test_intersection_behind_camera_rejected():
    a = cam()
    b = cam(t=(-1, 0, 0))
    # plane of a vertical line in view a at x = 0; view b sits at x = 1 looking along +z
    # and a ray pointing to +x never meets it in front of b
    with pytest.raises(BehindCameraError):
        L.triangulate_segment(a, b, [[0, -50], [0, 50]], [[30, 0], [40, 10]])


def test_triangulate_views_reports_rejections():
    a = cam(segments=[[[0, -50], [0, 50]], [[-40, -30], [40, 30]]])
    b = cam(t=(-1, 0, 0), segments=[[[30, 0], [40, 10]], [[-60, -35], [20, 25]]])
    res = L.triangulate_views([a, b], plane_role="first")
    assert res.summary()["rejected_count"] == 1
    assert res.rejected[0].index == 0 and "BehindCamera" in res.rejected[0].reason
    assert len(res.polyline) == 1 and res.polyline.source_index == [1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(20, 60))
def test_noiseless_round_trip_property(seed, baseline):
    views, truth = L.synthetic_views(seed, n_segments=20, baseline_deg=baseline)
    res = L.triangulate_views(views)
    assert not res.rejected
    assert np.abs(res.polyline.segments - truth).max() <= 1e-6
    assert res.polyline.errors.max() <= 1e-8


@pytest.mark.parametrize("role", L.PLANE_ROLES)
def test_plane_roles_agree_noiseless(role):
    views, truth = L.synthetic_views(3)
    res = L.triangulate_views(views, plane_role=role)
    assert np.abs(res.polyline.segments - truth).max() <= 1e-6


def test_bad_role_and_view_count():
    views, _ = L.synthetic_views(0)
    with pytest.raises(ParameterError):
        L.triangulate_views(views, plane_role="both")
    with pytest.raises(ParameterError):
        L.triangulate_views(views[:1])
    with pytest.raises(DataError):
        L.triangulate_views([views[0], views[1].with_segments(views[1].segments[:3])])


def rigid(R_world, s_world, view):
    """Re-express a view after mapping world points x -> R_world x + s_world."""
    R = view.rotation @ R_world.T
    t = view.translation - R @ s_world
    return L.CameraView(view.fx, view.fy, view.cx, view.cy, R, t, view.segments)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_rigid_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    views, _ = L.synthetic_views(seed, sigma=0.5)
    Q = Rotation.random(random_state=seed).as_matrix()
    s = rng.normal(scale=5.0, size=3)
    base = L.triangulate_views(views).polyline.segments
    moved = L.triangulate_views([rigid(Q, s, v) for v in views]).polyline.segments
    np.testing.assert_allclose(moved, base @ Q.T + s, atol=1e-9)


# --- reprojection error --------------------------------------------------------------


def test_exact_reconstruction_has_zero_error():
    views, truth = L.synthetic_views(5, n_segments=1)
    obs = [v.segments[0] for v in views]
    assert L.reprojection_error(views, obs, truth[0]) < 1e-8


def test_two_pixel_perpendicular_shift_gives_one_pixel():
    views, truth = L.synthetic_views(6, n_segments=1)
    a, b = (v.segments[0] for v in views)
    d = a[1] - a[0]
    n = np.array([-d[1], d[0]]) / np.linalg.norm(d)
    err = L.reprojection_error(views, [a + 2 * n, b], truth[0])
    assert err == pytest.approx(1.0, abs=1e-9)


def test_error_invariant_to_endpoint_reparametrisation():
    views, truth = L.synthetic_views(7, n_segments=1, sigma=1.0)
    a, b = (v.segments[0] for v in views)
    d = a[1] - a[0]
    slid = np.array([a[0] - 0.3 * d, a[1] + 0.7 * d])
    base = L.reprojection_error(views, [a, b], truth[0] + 0.01)
    assert L.reprojection_error(views, [slid, b], truth[0] + 0.01) == pytest.approx(base, abs=1e-12)


def test_views_behind_are_skipped_and_all_behind_is_error():
    views, truth = L.synthetic_views(8, n_segments=1)
    behind = L.CameraView(100, 100, 0, 0, views[0].rotation, views[0].translation - [0, 0, 12.0])
    assert np.all(behind.project(truth[0])[1] < 0)
    obs = [views[0].segments[0], [[0, 0], [1, 1]]]
    assert L.reprojection_error([views[0], behind], obs, truth[0]) < 1e-8
    with pytest.raises(DegenerateGeometryError):
        L.reprojection_error([behind], [[[0, 0], [1, 1]]], truth[0])


def median_error(sigma, trials=100):
    return float(np.median([np.median(L.triangulate_views(L.synthetic_views(s, sigma=sigma, n_views=3)[0])
                                      .polyline.errors) for s in range(trials)]))


def test_noise_monotonicity_with_held_out_view():
    meds = [median_error(s) for s in (0.25, 0.5, 1.0)]
    assert 0 < meds[0] < meds[1] < meds[2]


def test_two_view_errors_are_self_consistent_even_with_noise():
    # ray-plane triangulation reproduces both observations exactly
    views, _ = L.synthetic_views(2, sigma=1.0)
    assert L.triangulate_views(views).polyline.errors.max() < 1e-8


# --- connectivity graph ------------------------------------------------------------------


def test_single_segment_graph():
    edges, sm = L.build_connectivity_graph([[[0, 0, 0], [1, 0, 0]]], [3.5])
    assert edges == [] and sm.tolist() == [3.5]


def test_two_touching_segments_average():
    segs = [[[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [2, 0, 0]]]
    edges, sm = L.build_connectivity_graph(segs, [0.0, 2.0], radius=0.5)
    assert edges == [(0, 1)]
    np.testing.assert_array_equal(sm, [1.0, 1.0])


def test_isolated_segment_keeps_own_error():
    segs = [[[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [2, 0, 0]], [[50, 0, 0], [51, 0, 0]]]
    edges, sm = L.build_connectivity_graph(segs, [0.0, 2.0, 7.0])
    assert edges == [(0, 1)]
    assert sm[2] == 7.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_graph_symmetric_and_mean_bounds(seed):
    rng = np.random.default_rng(seed)
    segs = rng.normal(size=(12, 2, 3))
    err = rng.uniform(0, 3, 12)
    edges, sm = L.build_connectivity_graph(segs, err, radius=1.0)
    d = L._min_endpoint_distance(segs)
    np.testing.assert_array_equal(d, d.T)
    expected = {(i, j) for i in range(12) for j in range(i + 1, 12) if d[i, j] < 1.0}
    assert set(edges) == expected
    assert np.all(sm >= err.min() - 1e-12) and np.all(sm <= err.max() + 1e-12)


def test_graph_parameter_errors():
    with pytest.raises(ParameterError):
        L.build_connectivity_graph([[[0, 0, 0], [1, 0, 0]]], [1.0], radius=0.0)
    with pytest.raises(ParameterError):
        L.build_connectivity_graph([[[0, 0, 0], [1, 0, 0]]], [1.0, 2.0])


def test_default_radius_is_twice_median_length():
    segs = np.array([[[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [0, 3, 0]], [[0, 0, 0], [0, 0, 2]]], float)
    assert L.default_radius(segs) == 4.0


# --- helpers and I/O -------------------------------------------------------------------


def test_match_segments_recovers_permutation():
    a = np.array([[[10, 10], [100, 12]], [[20, 200], [30, 300]], [[300, 50], [400, 150]],
                  [[300, 400], [420, 380]], [[150, 100], [160, 110]]], dtype=float)
    perm = np.array([3, 0, 4, 1, 2])
    b = a[perm] + np.array([6.0, -3.0])
    matches = L.match_segments(a, b)
    assert sorted(matches) == sorted((int(perm[j]), j) for j in range(5))


def test_segments_from_mask_line():
    labels = np.full((40, 60), 3, dtype=np.uint8)
    labels[10, 5:50] = 0
    labels[30:35, 20] = 0
    segs = L.segments_from_mask(labels, 0, min_pixels=3)
    assert len(segs) == 2
    ends = {tuple(sorted(map(tuple, s))) for s in segs.tolist()}
    assert ((5.0, 10.0), (49.0, 10.0)) in ends


def test_view_json_round_trip(tmp_path):
    views, _ = L.synthetic_views(1)
    v = L.CameraView(views[0].fx, views[0].fy, views[0].cx, views[0].cy, views[0].rotation,
                     views[0].translation, views[0].segments, 640, 480)
    L.write_view(v, tmp_path / "v.json")
    back = L.read_view(tmp_path / "v.json")
    np.testing.assert_array_equal(back.rotation, v.rotation)
    np.testing.assert_array_equal(back.segments, v.segments)
    assert (back.width, back.height) == (640, 480)
    doc = json.loads((tmp_path / "v.json").read_text())
    assert len(doc["rotation"]) == 3 and len(doc["rotation"][0]) == 3


def test_view_json_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(FormatError):
        L.read_view(tmp_path / "bad.json")
    (tmp_path / "missing.json").write_text('{"rotation": []}')
    with pytest.raises(FormatError):
        L.read_view(tmp_path / "missing.json")


def test_ply_round_trip():
    views, truth = L.synthetic_views(2, n_segments=5, sigma=0.3, n_views=3)
    res = L.triangulate_views(views)
    segs, err, sm = L.read_ply(L.format_ply(res.polyline))
    np.testing.assert_array_equal(segs, res.polyline.segments)
    np.testing.assert_array_equal(err, res.polyline.errors)
    np.testing.assert_array_equal(sm, res.polyline.smoothed_errors)
    summary = res.summary()
    assert summary["segment_count"] == 5
    assert summary["reprojection_error"]["max"] == err.max()
