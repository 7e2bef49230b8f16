import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volpose.errors import ChannelMismatch, DegenerateDepth, EmptyRig
from volpose.geometry import (Camera, CameraRig, FeatureVolume, PlaneFeature, VoxelGrid, bev_project,
                              bilinear_sample, build_workspace, load_rig, project_point, save_rig,
                              triplane_project, unproject_features, warp_plane)

from conftest import corner_rig, identity_camera


# --- cameras -----------------------------------------------------------------

def test_principal_axis_point_hits_principal_point():
    pix, depth = project_point(identity_camera(), (0, 0, 2000))
    np.testing.assert_allclose(pix, [500, 500])
    assert depth == 2000


def test_projection_matches_homogeneous_oracle():
    cam = identity_camera()
    pix, depth = project_point(cam, (2000, 0, 2000))
    P = cam.K @ np.hstack([cam.R, cam.t[:, None]])
    h = P @ np.array([2000, 0, 2000, 1.0])
    np.testing.assert_allclose(pix, h[:2] / h[2])
    np.testing.assert_allclose(pix, [1500, 500])


def test_zero_depth_is_degenerate():
    with pytest.raises(DegenerateDepth):
        project_point(identity_camera(), (10, 10, 0))


def test_vectorised_projection_matches_single_point():
    cam = corner_rig().cameras[0]
    pts = np.random.default_rng(0).uniform(-1000, 1000, (20, 3)) + [0, 0, 1000]
    pix, depth = cam.project(pts)
    for p, q, d in zip(pts, pix, depth):
        qq, dd = project_point(cam, p)
        np.testing.assert_allclose(q, qq, rtol=1e-12)
        assert d == pytest.approx(dd, rel=1e-12)


def test_camera_validation():
    K = np.diag([100.0, 100.0, 1.0])
    with pytest.raises(ValueError, match="orthonormal"):
        Camera("a", K, np.diag([1.0, 1.0, 1.001]), np.zeros(3), (10, 10))
    with pytest.raises(ValueError, match="focal"):
        Camera("a", np.diag([-1.0, 1.0, 1.0]), np.eye(3), np.zeros(3), (10, 10))
    bad = K.copy()
    bad[1, 0] = 0.5
    with pytest.raises(ValueError, match="triangular"):
        Camera("a", bad, np.eye(3), np.zeros(3), (10, 10))
    with pytest.raises(ValueError, match="image size"):
        Camera("a", K, np.eye(3), np.zeros(3), (0, 10))


def test_look_at_centre_projects_to_principal_point():
    cam = Camera.look_at("c", (3000, -2000, 2500), (100, 200, 900), 300.0, (401, 301))
    pix, depth = project_point(cam, (100, 200, 900))
    np.testing.assert_allclose(pix, [200, 150], atol=1e-9)
    assert depth > 0
    np.testing.assert_allclose(cam.center, [3000, -2000, 2500], atol=1e-9)


def test_rig_rejects_duplicates_and_empty():
    cam = identity_camera()
    with pytest.raises(EmptyRig):
        CameraRig(())
    with pytest.raises(ValueError, match="duplicate"):
        CameraRig((cam, cam))


def test_rig_json_round_trip(tmp_path):
    rig = corner_rig()
    save_rig(rig, tmp_path / "rig.json")
    raw = json.loads((tmp_path / "rig.json").read_text())
    assert set(raw) == {"cameras", "fps"}
    assert set(raw["cameras"][0]) == {"id", "K", "R", "t", "width", "height"}
    back = load_rig(tmp_path / "rig.json")
    for a, b in zip(rig.cameras, back.cameras):
        assert a.id == b.id and a.image_size == b.image_size
        np.testing.assert_array_equal(a.K, b.K)
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.t, b.t)


# --- workspace ---------------------------------------------------------------

def _cams_at(points):
    return CameraRig(tuple(Camera.look_at(f"c{i}", p, (0, 0, 900.0) if p[:2] != (0, 0) else (1, 0, 900.0),
                                          300.0, (64, 48)) for i, p in enumerate(points)))


def test_workspace_from_square_rig():
    rig = _cams_at([(-3000, -3000, 2500), (3000, -3000, 2500), (3000, 3000, 2500), (-3000, 3000, 2500)])
    grid = build_workspace(rig, 100)
    assert grid.dims == (60, 60, 20)
    np.testing.assert_allclose(grid.origin, [-3000, -3000, 0], atol=1e-9)


def test_single_camera_workspace_clamps_to_one_voxel():
    grid = build_workspace(_cams_at([(0.0, 0.0, 3000.0)]), 100)
    assert grid.dims == (1, 1, 20)


def test_eight_metre_rig_gives_80_80_20(rig5):
    assert build_workspace(rig5, 100).dims == (80, 80, 20)


def test_workspace_height_is_two_metres():
    for pitch in (50.0, 100.0, 250.0):
        g = build_workspace(corner_rig(), pitch)
        assert g.origin[2] == 0 and g.dims[2] * pitch == 2000


def test_empty_rig_workspace():
    with pytest.raises(EmptyRig):
        build_workspace(None)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-5000, 5000), st.floats(-5000, 5000)), min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_workspace_invariant_to_camera_order(xy, rnd):
    pts = [(x, y, 2500.0) for x, y in xy]
    shuffled = list(pts)
    rnd.shuffle(shuffled)
    a = build_workspace(_cams_at(pts))
    b = build_workspace(_cams_at(shuffled))
    assert a == b


# --- bilinear sampling -------------------------------------------------------

def _naive_bilinear(img, r, c):
    # independent oracle: explicit neighbour loop with zero padding
    out = np.zeros(img.shape[2])
    r0, c0 = int(np.floor(r)), int(np.floor(c))
    for dr in (0, 1):
        for dc in (0, 1):
            rr, cc = r0 + dr, c0 + dc
            w = (1 - abs(r - rr)) * (1 - abs(c - cc))
            if 0 <= rr < img.shape[0] and 0 <= cc < img.shape[1]:
                out += w * img[rr, cc]
    return out


def test_bilinear_node_midpoint_and_outside():
    img = np.arange(12.0).reshape(3, 4)
    f = PlaneFeature("image", img)
    assert bilinear_sample(f, (1, 2))[0] == img[1, 2]
    assert bilinear_sample(f, (1, 2.5))[0] == pytest.approx((img[1, 2] + img[1, 3]) / 2)
    np.testing.assert_array_equal(bilinear_sample(f, (-1, -1)), [0.0])


@settings(max_examples=100, deadline=None)
@given(st.floats(-2, 7), st.floats(-2, 8))
def test_bilinear_matches_neighbour_loop(r, c):
    img = np.random.default_rng(3).random((5, 6, 2))
    got = bilinear_sample(PlaneFeature("image", img), (r, c))
    np.testing.assert_allclose(got, _naive_bilinear(img, r, c), atol=1e-12)


# --- unprojection ------------------------------------------------------------

def _small_setup():
    rig = corner_rig()
    grid = VoxelGrid((-1000, -1000, 0), 200.0, (10, 10, 10))
    return rig, grid


def test_unproject_constant_map_single_camera():
    rig, grid = _small_setup()
    rig1 = rig.subset([0])
    cam = rig1.cameras[0]
    view = PlaneFeature("image", np.full((cam.height, cam.width, 1), 0.7))
    vol = unproject_features([view], rig1, grid)
    pix, depth = cam.project(grid.centers())
    inside = (pix[:, 0] >= 0) & (pix[:, 0] <= cam.width - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= cam.height - 1)
    assert inside.all()
    np.testing.assert_allclose(vol.data.ravel(), 0.7, rtol=1e-12)


def test_unproject_sums_constant_maps_over_views():
    rig, grid = _small_setup()
    consts = [0.1, 0.2, 0.3, 0.4]
    views = [PlaneFeature("image", np.full((c.height, c.width, 1), k)) for c, k in zip(rig.cameras, consts)]
    vol = unproject_features(views, rig, grid)
    np.testing.assert_allclose(vol.data, sum(consts), rtol=1e-12)
    assert vol.n_views == 4


def test_unproject_matches_per_view_oracle():
    rig, grid = _small_setup()
    rng = np.random.default_rng(1)
    views = [PlaneFeature("image", rng.random((c.height, c.width, 3))) for c in rig.cameras]
    vol = unproject_features(views, rig, grid)
    centers = grid.centers()
    for k in rng.choice(len(centers), 40, replace=False):
        expect = np.zeros(3)
        for cam, v in zip(rig.cameras, views):
            pix, depth = project_point(cam, centers[k])
            if depth > 0:
                expect += _naive_bilinear(v.data, pix[1], pix[0])
        got = vol.data.reshape(-1, 3)[k]
        np.testing.assert_allclose(got, expect, rtol=1e-12, atol=1e-15)


def test_behind_camera_contributes_zero():
    cam = identity_camera(f=100.0, c=50.0, size=(101, 101))
    rig = CameraRig((cam,))
    grid = VoxelGrid((-50, -50, -1050), 100.0, (1, 1, 1))  # centre at z = -1000, behind the camera
    view = PlaneFeature("image", np.ones((101, 101, 1)))
    assert unproject_features([view], rig, grid).data.max() == 0.0


def test_unproject_triangulates_gaussian_peak():
    rig = corner_rig(2)
    grid = VoxelGrid((-1000, -1000, 0), 100.0, (20, 20, 20))
    target = np.array([230.0, -170.0, 940.0])
    views = []
    for cam in rig.cameras:
        pix, _ = project_point(cam, target)
        rr, cc = np.mgrid[0:cam.height, 0:cam.width]
        views.append(PlaneFeature("image", np.exp(-((cc - pix[0]) ** 2 + (rr - pix[1]) ** 2) / (2 * 3.0 ** 2))))
    vol = unproject_features(views, rig, grid)
    # brute-force oracle: evaluate the summed Gaussians at every voxel centre directly
    centers = grid.centers()
    dense = np.zeros(len(centers))
    for cam in rig.cameras:
        pix, _ = cam.project(centers)
        tp, _ = project_point(cam, target)
        dense += np.exp(-((pix - tp) ** 2).sum(1) / (2 * 3.0 ** 2))
    got = np.unravel_index(np.argmax(vol.data[..., 0]), grid.dims)
    want = np.unravel_index(np.argmax(dense), grid.dims)
    assert max(abs(a - b) for a, b in zip(got, want)) <= 1
    true_idx = grid.world_to_index(target)
    assert np.all(np.abs(np.array(got) - true_idx) <= 1.0)


def test_unproject_channel_and_count_errors():
    rig, grid = _small_setup()
    views = [PlaneFeature("image", np.zeros((c.height, c.width, 2))) for c in rig.cameras]
    views[1] = PlaneFeature("image", np.zeros((300, 400, 3)))
    with pytest.raises(ChannelMismatch):
        unproject_features(views, rig, grid)
    with pytest.raises(ChannelMismatch):
        unproject_features(views[:2], rig, grid)


def test_mean_reduction_divides_by_valid_views():
    rig, grid = _small_setup()
    views = [PlaneFeature("image", np.full((c.height, c.width, 1), 2.0)) for c in rig.cameras]
    vol = unproject_features(views, rig, grid, reduce="mean")
    np.testing.assert_allclose(vol.data, 2.0)


def test_voxel_mask_leaves_zeros():
    rig, grid = _small_setup()
    views = [PlaneFeature("image", np.ones((c.height, c.width, 1))) for c in rig.cameras]
    mask = np.zeros(grid.dims, bool)
    mask[:5] = True
    vol = unproject_features(views, rig, grid, voxel_mask=mask)
    assert np.all(vol.data[5:] == 0) and np.all(vol.data[:5] > 0)


# --- projections -------------------------------------------------------------

def test_bev_examples():
    data = np.zeros((1, 1, 3, 1))
    data[0, 0, :, 0] = [0.1, 0.9, 0.3]
    vol = FeatureVolume(VoxelGrid((0, 0, 0), 1, (1, 1, 3)), data)
    assert bev_project(vol).data[0, 0, 0] == 0.9
    zero = FeatureVolume(VoxelGrid((0, 0, 0), 1, (2, 2, 2)), np.zeros((2, 2, 2, 1)))
    assert not bev_project(zero).data.any()


def test_bev_matches_nested_loops():
    data = np.random.default_rng(2).random((5, 5, 4, 2))
    vol = FeatureVolume(VoxelGrid((0, 0, 0), 1, (5, 5, 4)), data)
    got = bev_project(vol)
    assert got.axes == "bev"
    for x, y, c in itertools.product(range(5), range(5), range(2)):
        assert got.data[x, y, c] == max(data[x, y, z, c] for z in range(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_bev_dominates_every_slice(seed):
    data = np.random.default_rng(seed).normal(size=(4, 3, 5, 2))
    bev = bev_project(FeatureVolume(VoxelGrid((0, 0, 0), 1, (4, 3, 5)), data)).data
    assert np.all(bev[:, :, None, :] >= data)


def test_triplane_single_voxel_and_constant():
    data = np.zeros((6, 6, 6, 1))
    data[1, 2, 4] = 1.0
    xy, xz, yz = triplane_project(FeatureVolume(VoxelGrid((0, 0, 0), 1, (6, 6, 6)), data))
    assert np.unravel_index(xy.data[..., 0].argmax(), (6, 6)) == (1, 2)
    assert np.unravel_index(xz.data[..., 0].argmax(), (6, 6)) == (1, 4)
    assert np.unravel_index(yz.data[..., 0].argmax(), (6, 6)) == (2, 4)
    const = triplane_project(FeatureVolume(VoxelGrid((0, 0, 0), 1, (3, 3, 3)), np.full((3, 3, 3, 1), 0.4)))
    for p in const:
        np.testing.assert_array_equal(p.data, 0.4)


def test_triplane_matches_nested_loops():
    data = np.random.default_rng(5).random((8, 8, 8, 1))
    xy, xz, yz = triplane_project(FeatureVolume(VoxelGrid((0, 0, 0), 1, (8, 8, 8)), data))
    r = range(8)
    for a, b in itertools.product(r, r):
        assert xy.data[a, b, 0] == max(data[a, b, k, 0] for k in r)
        assert xz.data[a, b, 0] == max(data[a, k, b, 0] for k in r)
        assert yz.data[a, b, 0] == max(data[k, a, b, 0] for k in r)


# --- warping -----------------------------------------------------------------

def _plane(data, pitch=100.0):
    return PlaneFeature("xy", data, np.zeros(3), pitch)


def test_warp_zero_is_identity():
    data = np.random.default_rng(0).random((7, 7, 2))
    np.testing.assert_array_equal(warp_plane(_plane(data), (0, 0)).data, data)


def test_integer_warp_moves_delta_exactly():
    data = np.zeros((9, 9, 1))
    data[4, 4] = 1.0
    out = warp_plane(_plane(data), (200.0, -300.0)).data
    expect = np.zeros_like(data)
    expect[6, 1] = 1.0
    np.testing.assert_array_equal(out, expect)


def test_warp_round_trip_away_from_border():
    rng = np.random.default_rng(4)
    data = np.zeros((20, 20, 2))
    data[4:16, 4:16] = rng.random((12, 12, 2))
    d = np.array([130.0, -70.0])
    back = warp_plane(warp_plane(_plane(data), d), -d).data
    # a fractional shift interpolates, so the round trip is exact only for whole-cell shifts
    d_int = np.array([200.0, -100.0])
    back_int = warp_plane(warp_plane(_plane(data), d_int), -d_int).data
    assert np.max(np.abs(back_int - data)[2:-2, 2:-2]) <= 1e-9
    assert np.max(np.abs(back - data)) < 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(-400, 400), st.floats(-400, 400), st.floats(-3, 3), st.floats(-3, 3))
def test_warp_is_linear(dx, dy, a, b):
    rng = np.random.default_rng(7)
    A, B = rng.random((10, 10, 2)), rng.random((10, 10, 2))
    lhs = warp_plane(_plane(a * A + b * B), (dx, dy)).data
    rhs = a * warp_plane(_plane(A), (dx, dy)).data + b * warp_plane(_plane(B), (dx, dy)).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


def test_warp_needs_pitch_and_finite_displacement():
    with pytest.raises(ValueError):
        warp_plane(PlaneFeature("image", np.zeros((3, 3))), (1, 1))
    with pytest.raises(ValueError):
        warp_plane(_plane(np.zeros((3, 3))), (np.nan, 0))


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_accepted_rotations_are_orthonormal(a, b, c):
    from scipy.spatial.transform import Rotation

    R = Rotation.from_rotvec([a, b, c]).as_matrix()
    cam = Camera("r", np.diag([100.0, 100.0, 1.0]), R, np.zeros(3), (10, 10))
    assert np.max(np.abs(cam.R.T @ cam.R - np.eye(3))) <= 1e-9
