"""Per-person feature cubes, tri-plane pose decoding and the joint loss.

The learned plane decoders are identity maps on the unprojected joint
channels, and the learned weighting network is replaced by weighting each
plane's 2D estimate with that plane's peak value.  :data:`FUSERS` holds the
fusion rule so a learned one can be registered instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import heatmap as hm
from .detect import Detection
from .errors import AllZeroWeights, ShapeMismatch
from .geometry import (CameraRig, FeatureVolume, PlaneFeature, SamplingPlan, VoxelGrid,
                       triplane_project)

CUBE_SIDE = 2000.0
CUBE_DIM = 32
NUM_JOINTS = 15


@dataclass
class PersonCube:
    volume: FeatureVolume
    detection: Detection

    @property
    def grid(self) -> VoxelGrid:
        return self.volume.grid


@dataclass
class Pose3D:
    joints: np.ndarray             # (J, 3) mm, joint 0 is the mid-hip root
    confidence: np.ndarray | None = None
    pid: int | None = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        if self.confidence is None:
            self.confidence = np.ones(len(self.joints))
        self.confidence = np.asarray(self.confidence, dtype=np.float64)

    @property
    def root(self) -> np.ndarray:
        return self.joints[0]


@dataclass
class PlaneHeatmaps:
    """Per-joint heatmaps on the three cube planes, each ``(rows, cols, J)``."""

    xy: np.ndarray
    xz: np.ndarray
    yz: np.ndarray

    def as_tuple(self):
        return self.xy, self.xz, self.yz


def cube_grid(center, side: float = CUBE_SIDE, dim: int = CUBE_DIM) -> VoxelGrid:
    center = np.asarray(center, dtype=np.float64)
    return VoxelGrid(center - side / 2.0, side / dim, (dim, dim, dim))


def bbox_mask(grid: VoxelGrid, detection: Detection) -> np.ndarray:
    xs, ys, _ = grid.axis_centers()
    inside = detection.bbox.contains_xy(xs[:, None], ys[None, :])
    return np.broadcast_to(inside[:, :, None], grid.dims)


def build_person_cube(views: Sequence[PlaneFeature], rig: CameraRig, detection: Detection,
                      side: float = CUBE_SIDE, dim: int = CUBE_DIM, mask: bool = True,
                      reduce: str = "sum") -> PersonCube:
    """Unproject ``views`` into a cube centred on the detection's root.

    Voxels whose centre falls outside the detection's top-down box are left
    at exactly zero (and never sampled).
    """
    grid = cube_grid(detection.root, side, dim)
    voxel_mask = bbox_mask(grid, detection) if mask else None
    volume = SamplingPlan(rig, grid, voxel_mask).apply(views, reduce=reduce)
    return PersonCube(volume, detection)


def fuse_planes(xy, xz, yz) -> tuple[np.ndarray, float]:
    """Fuse ``(a, b, weight)`` estimates from the xy, xz and yz planes into a 3D point.

    Each coordinate is the weight-averaged value from the two planes that
    observe it; a coordinate whose two weights are both zero falls back to
    their plain mean.  Returns the point and the mean weight.
    """
    (x1, y1, w1), (x2, z1, w2), (y2, z2, w3) = xy, xz, yz
    if min(w1, w2, w3) < 0:
        raise ValueError("fusion weights must be non-negative")
    if w1 == 0 and w2 == 0 and w3 == 0:
        raise AllZeroWeights("all three plane weights are zero")

    def avg(a, wa, b, wb):
        s = wa + wb
        return (a + b) / 2.0 if s == 0 else a + (b - a) * (wb / s)

    point = np.array([avg(x1, w1, x2, w2), avg(y1, w1, y2, w3), avg(z1, w2, z2, w3)])
    return point, (w1 + w2 + w3) / 3.0


FUSERS: dict[str, Callable] = {"confidence": fuse_planes}


def decode_planes(planes: PlaneHeatmaps, anchor, pitch: float,
                  temperature: float = hm.DEFAULT_TEMPERATURE, fuser: str = "confidence",
                  pid: int | None = None) -> Pose3D:
    """Decode joints from tri-plane heatmaps of a cube centred at ``anchor``."""
    anchor = np.asarray(anchor, dtype=np.float64)
    n = planes.xy.shape[0]
    if planes.xy.shape[:2] != (n, n) or planes.xz.shape[:2] != (n, n) or planes.yz.shape[:2] != (n, n):
        raise ShapeMismatch("tri-plane decoding expects square planes of one size")
    centre = (n - 1) / 2.0
    fuse = FUSERS[fuser]
    J = planes.xy.shape[2]
    # temperature scales with each channel's peak so decoding is invariant to the map's gain
    est = []
    for plane in planes.as_tuple():
        peaks = plane.reshape(-1, J).max(axis=0)
        est.append(hm.soft_argmax_channels(plane, temperature * peaks))
    joints = np.empty((J, 3))
    conf = np.zeros(J)
    for j in range(J):
        parts = [(0.0, 0.0, 0.0) if not w[j] > 0 else (pos[j, 0], pos[j, 1], w[j]) for pos, w in est]
        try:
            idx, c = fuse(*parts)
        except AllZeroWeights:
            joints[j] = anchor
            continue
        joints[j] = anchor + (idx - centre) * pitch
        conf[j] = c
    return Pose3D(joints, conf, pid)


def decode_planes_backward(planes: PlaneHeatmaps, pitch: float, grad_joints: np.ndarray,
                           temperature: float = hm.DEFAULT_TEMPERATURE) -> PlaneHeatmaps:
    """Gradient of ``sum(grad_joints * decode_planes(planes).joints)`` w.r.t. the planes.

    Exact almost everywhere: includes the dependence of each plane's
    temperature and fusion weight on its peak cell.
    """
    grads = [np.zeros_like(p) for p in planes.as_tuple()]
    J = planes.xy.shape[2]
    g_world = np.asarray(grad_joints, dtype=np.float64).reshape(J, 3) * pitch
    for j in range(J):
        info = []
        for plane in planes.as_tuple():
            ch = plane[..., j]
            m = float(ch.max())
            if not m > 0:
                info.append(None)
                continue
            t = temperature * m
            pos = hm.soft_argmax(ch, t).position
            info.append((ch, m, t, pos))
        if all(i is None for i in info):
            continue
        # coordinate -> the two (plane, axis) pairs that estimate it
        feeders = {0: [(0, 0), (1, 0)], 1: [(0, 1), (2, 0)], 2: [(1, 1), (2, 1)]}
        for coord, pairs in feeders.items():
            g = g_world[j, coord]
            if g == 0:
                continue
            vals = [(info[p][3][a], info[p][1]) if info[p] is not None else (0.0, 0.0) for p, a in pairs]
            s = vals[0][1] + vals[1][1]
            for (p, a), (v, w) in zip(pairs, vals):
                if info[p] is None:
                    continue
                ch, m, t, pos = info[p]
                if s > 0:
                    fused = (vals[0][0] * vals[0][1] + vals[1][0] * vals[1][1]) / s
                    dv = w / s
                    dw = (v - fused) / s
                else:
                    dv, dw = 0.5, 0.0
                gpos = np.zeros(2)
                gpos[a] = g * dv
                grads[p][..., j] += hm.soft_argmax_backward(ch, t, gpos)
                # d position / d temperature, temperature = T * max
                wts = hm._softmax_weights(ch, t)
                q = np.arange(ch.shape[a], dtype=np.float64)
                q = q[:, None] if a == 0 else q[None, :]
                q = np.broadcast_to(q, ch.shape)
                cov = (wts * (q - (wts * q).sum()) * (ch - (wts * ch).sum())).sum()
                dpos_dt = -cov / (t * t)
                amax = np.unravel_index(np.argmax(ch), ch.shape)
                grads[p][amax + (j,)] += g * dv * dpos_dt * temperature + g * dw
    return PlaneHeatmaps(*grads)


def decode_pose(cube: PersonCube, temperature: float = hm.DEFAULT_TEMPERATURE,
                fuser: str = "confidence") -> tuple[Pose3D, PlaneHeatmaps]:
    """Tri-plane projection, per-plane soft-argmax and fusion into world-frame joints."""
    xy, xz, yz = triplane_project(cube.volume)
    planes = PlaneHeatmaps(xy.data, xz.data, yz.data)
    pose = decode_planes(planes, cube.grid.center, cube.grid.pitch, temperature, fuser)
    # joints with no evidence fall back to the detection root
    dead = pose.confidence == 0
    pose.joints[dead] = cube.detection.root
    return pose, planes


def pose_loss(pred: tuple[Pose3D, PlaneHeatmaps], gt: tuple[Pose3D, PlaneHeatmaps]) -> float:
    """Plane MSE terms plus the summed absolute joint error, unit weights."""
    (pp, ph), (gp, gh) = pred, gt
    if pp.joints.shape != gp.joints.shape:
        raise ShapeMismatch(f"joint arrays differ: {pp.joints.shape} vs {gp.joints.shape}")
    total = 0.0
    for a, b in zip(ph.as_tuple(), gh.as_tuple()):
        if a.shape != b.shape:
            raise ShapeMismatch(f"plane heatmaps differ: {a.shape} vs {b.shape}")
        total += float(np.mean((a - b) ** 2))
    return total + float(np.abs(pp.joints - gp.joints).sum())


def render_plane_targets(pose: Pose3D, anchor, pitch: float, dim: int = CUBE_DIM,
                         sigma: float = 2.0) -> PlaneHeatmaps:
    """Ground-truth tri-plane heatmaps: one unit Gaussian per joint and plane."""
    anchor = np.asarray(anchor, dtype=np.float64)
    idx = (pose.joints - anchor) / pitch + (dim - 1) / 2.0
    J = len(pose.joints)
    out = [np.zeros((dim, dim, J)) for _ in range(3)]
    for j in range(J):
        for plane, (a, b) in zip(out, ((0, 1), (0, 2), (1, 2))):
            plane[..., j] = hm.render_gaussian((dim, dim), (idx[j, a], idx[j, b]), sigma)
    return PlaneHeatmaps(*out)
