import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from lidarfuse.errors import ContractError
from lidarfuse.geometry import (
    TTA_YAW_ANGLES,
    AugmentParams,
    Calibration,
    PointCloud,
    aggregate_tta,
    augment,
    calibrate_points,
    default_tta,
    perturb_calibration,
    project_to_range,
    range_input_features,
    rotation_about,
    tta_compose,
    voxel_index,
    voxelize,
)


def pinhole(f=100.0, width=200, height=100, t=(0.1, -0.2, 0.3), yaw=0.0):
    s = np.array([[f, 0, width / 2, 0], [0, f, height / 2, 0], [0, 0, 1, 0]], dtype=float)
    ext = np.eye(4)
    ext[:3, :3] = rotation_about([0, 1, 0], yaw) @ np.array([[0, -1, 0], [0, 0, -1], [1, 0, 0]])
    ext[:3, 3] = t
    return Calibration(s, ext, height=height, width=width)


def test_projection_matches_analytic_pixels(rng):
    calib = pinhole(yaw=0.1)
    pts = np.column_stack([rng.uniform(2, 30, 300), rng.uniform(-15, 15, 300), rng.uniform(-5, 5, 300)])
    uv = calibrate_points(pts, calib)
    for p, got in zip(pts, uv):
        ref = oracles.project(p, calib.intrinsic, calib.extrinsic, calib.width, calib.height)
        if ref is None:
            assert np.all(np.isnan(got))
        else:
            np.testing.assert_allclose(got, ref, atol=1e-9, rtol=0)


def test_projection_closed_form_on_axis():
    # camera at LiDAR origin, point straight ahead at distance d lands on the principal point
    calib = pinhole(t=(0, 0, 0))
    np.testing.assert_allclose(calibrate_points(np.array([[7.0, 0, 0]]), calib), [[100.0, 50.0]], atol=1e-12)
    # one metre left at 10 m -> u shifts by -f/10
    np.testing.assert_allclose(calibrate_points(np.array([[10.0, 1.0, 0]]), calib), [[90.0, 50.0]], atol=1e-12)


def test_behind_camera_and_out_of_view_have_no_pixel():
    calib = pinhole(t=(0, 0, 0))
    pts = np.array([[-5.0, 0, 0], [0.0, 0, 0], [5.0, 100.0, 0], [5.0, 0, 0]])
    uv = calibrate_points(pts, calib)
    assert np.all(np.isnan(uv[:3]))
    assert np.all(np.isfinite(uv[3]))


def test_calibration_rejects_bad_rotation():
    s = np.eye(3, 4)
    with pytest.raises(ContractError):
        Calibration(s, np.diag([1.0, 1.0, 1.01, 1.0]), 10, 10)
    with pytest.raises(ContractError):
        Calibration(s, np.diag([1.0, 1.0, -1.0, 1.0]), 10, 10)
    with pytest.raises(ContractError):
        Calibration(np.eye(3), np.eye(4), 10, 10)


def test_perturbation_zero_is_identity_and_seeded():
    calib = pinhole()
    assert perturb_calibration(calib, 0.0, 0.0, seed=3) is calib
    a = perturb_calibration(calib, 0.01, 0.1, seed=3)
    b = perturb_calibration(calib, 0.01, 0.1, seed=3)
    np.testing.assert_array_equal(a.extrinsic, b.extrinsic)
    np.testing.assert_array_equal(a.intrinsic, calib.intrinsic)
    rot = a.extrinsic[:3, :3]
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)


def test_range_projection_winner_is_nearest():
    pc = PointCloud(np.array([[10.0, 0, 0], [5.0, 0, 0], [5.0, 0, 0]]), np.array([0.1, 0.2, 0.3]))
    rv = project_to_range(pc, 8, 16, 3.0, -25.0)
    assert len(rv.occupied()) == 1
    assert rv.pixel_to_point.reshape(-1)[rv.occupied()[0]] == 1  # nearest, lowest index on tie
    feats = range_input_features(pc, rv).reshape(-1, 5)[rv.occupied()[0]]
    np.testing.assert_allclose(feats, [5.0, 5.0, 0.0, 0.0, 0.2])


def test_range_projection_pixel_layout():
    # yaw 0 sits on the column boundary at W/2; pitch fov_up maps to row 0
    pc = PointCloud(np.array([[1.0, -1e-9, np.tan(np.radians(3.0)) * 1.0]]), np.zeros(1))
    rv = project_to_range(pc, 8, 16, 3.0, -25.0)
    np.testing.assert_allclose(rv.point_rc[0], [-0.5, 7.5], atol=1e-6)
    assert tuple(rv.point_to_pixel[0]) == (0, 7)


@given(arrays(np.float64, (40, 3), elements=st.floats(-20, 20, allow_nan=False)))
def test_range_projection_invariants(coords):
    coords = coords + np.array([0.01, 0.0, 0.0])
    pc = PointCloud(coords, np.zeros(len(coords)))
    rv = project_to_range(pc, 16, 64, 3.0, -25.0)
    occ = rv.occupied()
    winners = rv.pixel_to_point.reshape(-1)[occ]
    assert len(set(winners.tolist())) == len(winners)
    # every winner maps back to its own pixel and is no farther than any rival there
    r = np.linalg.norm(coords, axis=1)
    flat = rv.point_to_pixel[:, 0] * 64 + rv.point_to_pixel[:, 1]
    for pix, w in zip(occ, winners):
        assert flat[w] == pix
        assert r[w] <= r[flat == pix].min()


@given(
    arrays(np.float64, (30, 3), elements=st.floats(-5, 5, allow_nan=False)),
    st.sampled_from([0.1, 0.25, 0.5, 1.0]),
)
def test_voxel_index_partition(coords, size):
    occ, p2v = voxel_index(coords, size)
    np.testing.assert_array_equal(occ[p2v], np.floor(coords / size).astype(np.int64))
    assert len(np.unique(occ, axis=0)) == len(occ)
    assert set(p2v.tolist()) == set(range(len(occ)))


def test_voxelize_max_pools(rng):
    coords = rng.uniform(0, 2, (50, 3))
    feats = rng.normal(size=(50, 4))
    vg = voxelize(PointCloud(coords, np.zeros(50)), feats, 1.0)
    for v in range(vg.n_voxels):
        np.testing.assert_array_equal(vg.features.data[v], feats[vg.point_to_voxel == v].max(axis=0))
    np.testing.assert_allclose(vg.centers, vg.occupied + 0.5)


def test_augment_order_rotate_scale_flip_translate():
    pc = PointCloud(np.array([[1.0, 0.0, 0.5]]), np.zeros(1))
    p = AugmentParams(flip="x", scale=2.0, rotation=np.pi / 2, translation=(1.0, 0.0, 0.0))
    np.testing.assert_allclose(augment(pc, p).coords, [[1.0, 2.0, 1.0]], atol=1e-12)
    assert augment(pc, AugmentParams()) is pc


def test_augment_params_validation():
    with pytest.raises(ContractError):
        AugmentParams(flip="z")
    with pytest.raises(ContractError):
        AugmentParams(scale=0.0)
    p = AugmentParams.sample(np.random.default_rng(0))
    assert 0.9 <= p.scale <= 1.1


def test_tta_identity_first_and_angles():
    pc = PointCloud(np.ones((3, 3)), np.zeros(3))
    clouds = tta_compose(pc, [AugmentParams(rotation=0.3)])
    assert clouds[0] is pc and len(clouds) == 2
    with pytest.raises(ContractError):
        tta_compose(pc, [])
    assert len(default_tta(scales=(0.9, 1.0), flips=("none", "x"))) == 4 * len(TTA_YAW_ANGLES)
    assert len(TTA_YAW_ANGLES) == 10


@given(st.permutations(list(range(4))))
def test_aggregate_tta_order_independent(perm):
    sets = [np.random.default_rng(i).normal(size=(6, 3)) for i in range(4)]
    ref = aggregate_tta(sets)
    np.testing.assert_array_equal(aggregate_tta([sets[i] for i in perm]), ref)


def test_aggregate_tta_empty():
    with pytest.raises(ContractError):
        aggregate_tta([])
