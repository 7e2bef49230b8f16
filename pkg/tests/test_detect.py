import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volpose import heatmap as hm
from volpose import simkit
from volpose.detect import (BBox3D, DetectionTargets, bbox_map, detect_people, detection_loss,
                            regress_bboxes)
from volpose.errors import ShapeMismatch
from volpose.geometry import CameraRig, FeatureVolume, PlaneFeature, VoxelGrid, build_workspace

from conftest import frame_volume, translate_camera


def _bev(data, pitch=100.0):
    return PlaneFeature("bev", data, np.zeros(3), pitch)


# --- boxes -------------------------------------------------------------------

def test_isotropic_support_gives_square_box():
    h = hm.render_gaussian((41, 41), (20, 20), 2.5)
    (box,) = regress_bboxes(_bev(h), [hm.Peak(np.array([20.0, 20.0]), 1.0)])
    assert box.width == box.length
    # cells above 0.3 of the peak: |d| < sigma * sqrt(2 ln(1/0.3)) = 3.88 cells
    assert box.width == 700.0


def test_block_support_counts_cells():
    h = np.zeros((20, 20))
    h[5:8, 10:16] = 1.0
    (box,) = regress_bboxes(_bev(h), [hm.Peak(np.array([6.0, 12.0]), 1.0)])
    assert abs(box.width - 300.0) <= 100.0 and abs(box.length - 600.0) <= 100.0
    assert (box.width, box.length) == (300.0, 600.0)
    # centre of the block in world mm; plane centre (9.5, 9.5) sits at the anchor
    np.testing.assert_allclose(box.center[:2], [(6 - 9.5) * 100, (12.5 - 9.5) * 100])


def test_empty_support_clamps_to_minimum_box():
    (box,) = regress_bboxes(_bev(np.zeros((10, 10))), [hm.Peak(np.array([4.0, 4.0]), 0.0)])
    assert (box.width, box.length) == (200.0, 200.0)
    assert regress_bboxes(_bev(np.zeros((10, 10))), []) == []


def test_neighbouring_supports_are_split():
    h = np.zeros((30, 30))
    h[5:10, 5:25] = 1.0
    boxes = regress_bboxes(_bev(h), [hm.Peak(np.array([7.0, 8.0]), 1.0), hm.Peak(np.array([7.0, 20.0]), 1.0)])
    assert all(b.length < 2000 for b in boxes)
    assert sum(b.length for b in boxes) == 2000.0


def test_bbox_validation_and_iou():
    with pytest.raises(ValueError):
        BBox3D(np.zeros(3), 0.0, 100.0)
    a = BBox3D(np.zeros(3), 200.0, 200.0)
    b = BBox3D(np.array([100.0, 0, 0]), 200.0, 200.0)
    assert a.iou_xy(a) == 1.0
    assert a.iou_xy(b) == pytest.approx(1 / 3)


# --- losses ------------------------------------------------------------------

def _targets(rng, shape=(8, 8), k=3, nz=5):
    return DetectionTargets(rng.random(shape), rng.random((k, nz)), rng.random((*shape, 3)))


def test_identical_targets_have_zero_loss():
    t = _targets(np.random.default_rng(0))
    assert detection_loss(t, t) == {"l2d": 0.0, "l1d": 0.0, "lbbox": 0.0, "total": 0.0}


def test_single_cell_deviation():
    t = _targets(np.random.default_rng(0))
    h = t.heatmap.copy()
    h[3, 4] += 0.5
    out = detection_loss(DetectionTargets(h, t.columns, t.bbox_map), t)
    assert out["l2d"] == 0.25 and out["total"] == 0.25


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_detection_loss_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    p, g = _targets(rng), _targets(rng)
    support = rng.random((8, 8)) < 0.4
    g.support = support
    l2 = sum((p.heatmap[i, j] - g.heatmap[i, j]) ** 2 for i, j in itertools.product(range(8), range(8)))
    l1 = sum((p.columns[k, z] - g.columns[k, z]) ** 2 for k in range(3) for z in range(5))
    lb = sum(abs(p.bbox_map[i, j, c] - g.bbox_map[i, j, c])
             for i, j in itertools.product(range(8), range(8)) if support[i, j] for c in range(3))
    out = detection_loss(p, g)
    assert out["l2d"] == pytest.approx(l2, rel=1e-12)
    assert out["l1d"] == pytest.approx(l1, rel=1e-12)
    assert out["lbbox"] == pytest.approx(lb, rel=1e-12, abs=1e-15)
    assert out["total"] == pytest.approx(l2 + l1 + lb, rel=1e-12)
    assert min(out.values()) >= 0


def test_default_support_is_positive_centerness():
    g = DetectionTargets(np.zeros((4, 4)), np.zeros((1, 3)),
                         bbox_map((4, 4), [(1, 2)], [BBox3D(np.zeros(3), 300.0, 500.0)], [0.9]))
    p = DetectionTargets(np.zeros((4, 4)), np.zeros((1, 3)), np.ones((4, 4, 3)))
    assert detection_loss(p, g)["lbbox"] == pytest.approx(299 + 499 + 0.1)


def test_loss_shape_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeMismatch):
        detection_loss(_targets(rng), _targets(rng, shape=(8, 9)))


# --- detection on synthetic scenes ------------------------------------------

def test_single_person_detected_within_one_voxel(rig5, grid5):
    scene = simkit.generate_scene(simkit.SceneConfig(persons=1, frames=1, positions=[(300.0, -450.0)]), rig5, grid5)
    _, vol = frame_volume(scene, rig5, grid5)
    dets = detect_people(vol)
    assert len(dets) == 1
    assert np.linalg.norm(dets[0].root - scene.poses[0][0].root) <= grid5.pitch
    assert 0 < dets[0].confidence <= 1


def test_three_people_matched_one_to_one(rig5, grid5, three_people):
    _, vol = frame_volume(three_people, rig5, grid5)
    dets = detect_people(vol)
    gts = [p.root for p in three_people.poses[0]]
    assert min(np.linalg.norm(a - b) for a, b in itertools.combinations(gts, 2)) >= 600
    assert len(dets) == 3
    d = np.array([[np.linalg.norm(det.root - g) for g in gts] for det in dets])
    assert sorted(d.argmin(axis=1).tolist()) == [0, 1, 2]
    assert np.all(d.min(axis=1) <= grid5.pitch)
    conf = [det.confidence for det in dets]
    assert conf == sorted(conf, reverse=True)


def test_empty_scene_has_no_detections(rig5, grid5):
    scene = simkit.generate_scene(simkit.SceneConfig(persons=0, frames=1), rig5, grid5)
    _, vol = frame_volume(scene, rig5, grid5)
    assert detect_people(vol) == []


def test_detection_count_bounded_by_k(rig5, grid5, three_people):
    _, vol = frame_volume(three_people, rig5, grid5)
    assert len(detect_people(vol, k=2)) == 2


def test_detection_translates_with_scene_and_rig(rig5):
    offset = np.array([1000.0, -2000.0, 0.0])
    moved = CameraRig(tuple(translate_camera(c, offset) for c in rig5.cameras), rig5.frame_rate)
    pos = [(400.0, 900.0), (-1200.0, -600.0)]
    grid_a, grid_b = build_workspace(rig5), build_workspace(moved)
    np.testing.assert_allclose(grid_b.origin - grid_a.origin, offset, atol=1e-9)
    a = simkit.generate_scene(simkit.SceneConfig(persons=2, frames=1, positions=pos), rig5, grid_a)
    b = simkit.generate_scene(simkit.SceneConfig(persons=2, frames=1, positions=[(x + offset[0], y + offset[1])
                                                                                 for x, y in pos]), moved, grid_b)
    da = detect_people(frame_volume(a, rig5, grid_a)[1])
    db = detect_people(frame_volume(b, moved, grid_b)[1])
    assert len(da) == len(db) == 2
    for p, q in zip(da, db):
        np.testing.assert_allclose(q.root - p.root, offset, atol=1e-9)
        assert q.confidence == pytest.approx(p.confidence, abs=1e-12)


def test_synthetic_root_volume_without_cameras():
    grid = VoxelGrid((0, 0, 0), 100.0, (30, 30, 20))
    data = np.zeros((30, 30, 20, 1))
    for (x, y, z) in ((5, 7, 9), (20, 22, 8)):
        data[..., 0] += np.multiply.outer(np.multiply.outer(hm.render_gaussian(30, x, 1.5),
                                                            hm.render_gaussian(30, y, 1.5)),
                                          hm.render_gaussian(20, z, 1.5))
    dets = detect_people(FeatureVolume(grid, data))
    want = [grid.index_to_world(np.array(c, float)) for c in ((5, 7, 9), (20, 22, 8))]
    assert len(dets) == 2
    for det in dets:
        assert min(np.linalg.norm(det.root - w) for w in want) <= 1e-6
