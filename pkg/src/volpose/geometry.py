"""Camera models, voxel workspaces and feature (un)projection.

World coordinates are millimetres with z pointing up and the floor at z = 0.
Image-space feature maps are stored ``(rows, cols, channels)`` with pixel
``(u, v)`` living at array index ``(v, u)``.  Every sampling routine in this
module addresses maps in array-index order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import ChannelMismatch, DegenerateDepth, EmptyRig, ShapeMismatch

DEPTH_EPS = 1e-6
ORTHO_TOL = 1e-9
WORKSPACE_HEIGHT = 2000.0

PLANE_AXES = ("xy", "xz", "yz", "bev", "image")


@dataclass(frozen=True, eq=False)
class Camera:
    """Calibrated pinhole camera, ``x_cam = R @ x_world + t``."""

    id: str
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError(f"camera {self.id!r}: focal entries must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError(f"camera {self.id!r}: intrinsics must be upper triangular")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError(f"camera {self.id!r}: rotation is not orthonormal")
        w, h = (int(v) for v in self.image_size)
        if w <= 0 or h <= 0:
            raise ValueError(f"camera {self.id!r}: image size must be positive")
        for name, arr in (("K", K), ("R", R), ("t", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "image_size", (w, h))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised projection of ``(..., 3)`` world points.

        Returns pixels ``(..., 2)`` as ``(u, v)`` and camera-frame depth
        ``(...,)``.  Points at zero depth produce non-finite pixels; callers
        that care must check ``depth``.
        """
        pts = np.asarray(points, dtype=np.float64)
        cam = pts @ self.R.T + self.t
        depth = cam[..., 2]
        hom = cam @ self.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = hom[..., :2] / hom[..., 2:3]
        return pix, depth

    @classmethod
    def look_at(cls, id: str, position, target, focal: float,
                image_size: tuple[int, int], up=(0.0, 0.0, 1.0)) -> "Camera":
        """Build a camera at ``position`` whose optical axis passes through ``target``."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            # looking straight along ``up``; any horizontal right vector works
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        w, h = image_size
        K = np.array([[focal, 0.0, (w - 1) / 2.0],
                      [0.0, focal, (h - 1) / 2.0],
                      [0.0, 0.0, 1.0]])
        return cls(id=id, K=K, R=R, t=-R @ position, image_size=(w, h))


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]
    frame_rate: float = 18.0

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise EmptyRig("a rig needs at least one camera")
        ids = [c.id for c in cams]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate camera ids in rig: {ids}")
        object.__setattr__(self, "cameras", cams)

    def __len__(self):
        return len(self.cameras)

    def subset(self, indices: Sequence[int]) -> "CameraRig":
        return CameraRig(tuple(self.cameras[i] for i in indices), self.frame_rate)

    def to_dict(self) -> dict:
        return {
            "cameras": [
                {
                    "id": c.id,
                    "K": c.K.tolist(),
                    "R": c.R.tolist(),
                    "t": c.t.tolist(),
                    "width": c.width,
                    "height": c.height,
                }
                for c in self.cameras
            ],
            "fps": self.frame_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        cams = []
        for i, c in enumerate(d["cameras"]):
            try:
                cams.append(Camera(id=str(c["id"]), K=np.array(c["K"], dtype=float),
                                   R=np.array(c["R"], dtype=float), t=np.array(c["t"], dtype=float),
                                   image_size=(int(c["width"]), int(c["height"]))))
            except KeyError as exc:
                raise ValueError(f"camera #{i} is missing field {exc.args[0]!r}") from None
        return cls(tuple(cams), float(d.get("fps", 18.0)))


def save_rig(rig: CameraRig, path) -> None:
    Path(path).write_text(json.dumps(rig.to_dict(), indent=2) + "\n")


def load_rig(path) -> CameraRig:
    return CameraRig.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Axis-aligned voxel grid; ``origin`` is the min corner, voxel centres sit at half-pitch offsets."""

    origin: np.ndarray
    pitch: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        origin.setflags(write=False)
        if not self.pitch > 0:
            raise ValueError("voxel pitch must be positive")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"grid dims must be three positive counts, got {self.dims}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "dims", dims)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (self.dims == other.dims and self.pitch == other.pitch
                and np.array_equal(self.origin, other.origin))

    def __hash__(self):
        return hash((self.dims, self.pitch, tuple(self.origin)))

    @property
    def size(self) -> np.ndarray:
        return np.array(self.dims, dtype=np.float64) * self.pitch

    @property
    def center(self) -> np.ndarray:
        return self.origin + self.size / 2.0

    def axis_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.pitch for a in range(3))

    def centers(self) -> np.ndarray:
        """All voxel centres as an ``(nx*ny*nz, 3)`` array in C order."""
        xs, ys, zs = self.axis_centers()
        g = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)

    def index_to_world(self, index) -> np.ndarray:
        """Continuous voxel index (``(..., k)`` for the first k axes) to world mm."""
        index = np.asarray(index, dtype=np.float64)
        k = index.shape[-1]
        return self.origin[:k] + (index + 0.5) * self.pitch

    def world_to_index(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=np.float64)
        k = point.shape[-1]
        return (point - self.origin[:k]) / self.pitch - 0.5

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= self.origin) and np.all(p <= self.origin + self.size))

    def translated(self, offset) -> "VoxelGrid":
        return VoxelGrid(self.origin + np.asarray(offset, dtype=np.float64), self.pitch, self.dims)


@dataclass(eq=False)
class FeatureVolume:
    """Dense ``(nx, ny, nz, channels)`` features on a grid.

    ``n_views`` records how many camera views were summed into ``data``;
    detection uses it to bring confidences back to ``[0, 1]``.
    """

    grid: VoxelGrid
    data: np.ndarray
    n_views: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        if self.data.shape[:3] != self.grid.dims:
            raise ShapeMismatch(f"volume shape {self.data.shape[:3]} does not match grid {self.grid.dims}")

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass(eq=False)
class PlaneFeature:
    """A 2D multi-channel feature map.

    ``world_anchor`` is the world position of the plane's centre (the centre
    of the volume it came from); ``pitch`` is mm per cell and is ``None`` for
    image-space maps.
    """

    axes: str
    data: np.ndarray
    world_anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pitch: float | None = None

    def __post_init__(self):
        if self.axes not in PLANE_AXES:
            raise ValueError(f"unknown plane axes {self.axes!r}")
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[..., None]
        if self.data.ndim != 3:
            raise ShapeMismatch(f"plane data must be (rows, cols, channels), got {self.data.shape}")
        self.world_anchor = np.asarray(self.world_anchor, dtype=np.float64).reshape(3)

    @property
    def extent(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "PlaneFeature":
        return PlaneFeature(self.axes, data, self.world_anchor.copy(), self.pitch)


def project_point(camera: Camera, point) -> tuple[np.ndarray, float]:
    point = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    cam = camera.R @ point + camera.t
    depth = float(cam[2])
    if abs(depth) < DEPTH_EPS:
        raise DegenerateDepth(f"point {point.tolist()} has depth {depth} in camera {camera.id!r}")
    hom = camera.K @ cam
    return hom[:2] / hom[2], depth


def build_workspace(rig: CameraRig, pitch: float = 100.0, height: float = WORKSPACE_HEIGHT) -> VoxelGrid:
    """Voxel grid spanning the top-down bounding box of the camera positions.

    The x/y extent is centred on the mean camera position; z spans
    ``[0, height]`` from the floor.  A zero-width extent (all cameras at one
    x/y point) is clamped to a single voxel.
    """
    if rig is None or len(rig.cameras) == 0:
        raise EmptyRig("cannot build a workspace from an empty rig")
    if not pitch > 0:
        raise ValueError("pitch must be positive")
    centers = np.array([c.center for c in rig.cameras])
    origin = np.zeros(3)
    dims = []
    for a in range(2):
        vals = centers[:, a]
        span = float(vals.max() - vals.min())
        n = max(1, math.ceil(span / pitch - 1e-9))
        mean = math.fsum(vals.tolist()) / len(vals)
        origin[a] = mean - n * pitch / 2.0
        dims.append(n)
    dims.append(max(1, math.ceil(height / pitch - 1e-9)))
    return VoxelGrid(origin, pitch, tuple(dims))


def bilinear_taps(rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]):
    """Flat indices and weights of the four bilinear neighbours.

    Neighbours falling outside the map get weight 0 (zero padding), so a
    sample whose whole footprint is outside returns exactly zero.
    Returns ``(idx, w)`` each of shape ``(n, 4)``.
    """
    rows = np.asarray(rows, dtype=np.float64).ravel()
    cols = np.asarray(cols, dtype=np.float64).ravel()
    nr, nc = shape
    finite = np.isfinite(rows) & np.isfinite(cols)
    rows = np.where(finite, rows, -10.0)
    cols = np.where(finite, cols, -10.0)
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    idx = np.empty((rows.size, 4), dtype=np.int64)
    w = np.empty((rows.size, 4), dtype=np.float64)
    for k, (dr, dc, wk) in enumerate((
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    )):
        rr = r0 + dr
        cc = c0 + dc
        inside = (rr >= 0) & (rr < nr) & (cc >= 0) & (cc < nc) & finite
        idx[:, k] = np.where(inside, rr * nc + cc, 0)
        w[:, k] = np.where(inside, wk, 0.0)
    return idx, w


def bilinear_sample(feature: PlaneFeature, point) -> np.ndarray:
    """Sample ``feature`` at continuous array index ``point = (row, col)``."""
    p = np.asarray(point, dtype=np.float64).reshape(2)
    idx, w = bilinear_taps(p[:1], p[1:], feature.extent)
    flat = feature.data.reshape(-1, feature.channels)
    return (w[0][:, None] * flat[idx[0]]).sum(axis=0)


class SamplingPlan:
    """Precomputed bilinear unprojection from a rig's image maps into a grid.

    Building the plan projects every voxel centre into every camera once; it
    can then be applied to any number of frames.  ``voxel_mask`` restricts
    the computation to a subset of voxels, the others stay exactly zero.
    """

    def __init__(self, rig: CameraRig, grid: VoxelGrid, voxel_mask: np.ndarray | None = None):
        self.rig = rig
        self.grid = grid
        n_vox = int(np.prod(grid.dims))
        if voxel_mask is None:
            self.rows = None
            pts = grid.centers()
        else:
            voxel_mask = np.asarray(voxel_mask, dtype=bool)
            if voxel_mask.shape != grid.dims:
                raise ShapeMismatch(f"voxel mask {voxel_mask.shape} does not match grid {grid.dims}")
            self.rows = np.flatnonzero(voxel_mask.ravel())
            pts = grid.centers()[self.rows]
        self.n_active = pts.shape[0]
        self.n_vox = n_vox
        self.matrices = []
        valid_count = np.zeros(self.n_active)
        for cam in rig.cameras:
            pix, depth = cam.project(pts)
            front = depth > DEPTH_EPS
            idx, w = bilinear_taps(pix[:, 1], pix[:, 0], (cam.height, cam.width))
            w[~front] = 0.0
            valid_count += (w.sum(axis=1) > 0)
            m = sparse.csr_matrix(
                (w.ravel(), idx.ravel(), np.arange(0, 4 * self.n_active + 1, 4)),
                shape=(self.n_active, cam.height * cam.width),
            )
            self.matrices.append(m)
        self.valid_count = valid_count

    def apply(self, views: Sequence[PlaneFeature], reduce: str = "sum") -> FeatureVolume:
        if len(views) != len(self.rig.cameras):
            raise ChannelMismatch(f"expected {len(self.rig.cameras)} views, got {len(views)}")
        channels = {v.channels for v in views}
        if len(channels) != 1:
            raise ChannelMismatch(f"views disagree on channel count: {sorted(channels)}")
        (c,) = channels
        acc = np.zeros((self.n_active, c))
        for cam, m, view in zip(self.rig.cameras, self.matrices, views):
            if view.extent != (cam.height, cam.width):
                raise ShapeMismatch(f"view for camera {cam.id!r} has extent {view.extent}, "
                                    f"expected {(cam.height, cam.width)}")
            acc += m @ view.data.reshape(-1, c)
        if reduce == "mean":
            acc /= np.maximum(self.valid_count, 1.0)[:, None]
        elif reduce != "sum":
            raise ValueError(f"unknown reduction {reduce!r}")
        if self.rows is None:
            data = acc.reshape(*self.grid.dims, c)
        else:
            data = np.zeros((self.n_vox, c))
            data[self.rows] = acc
            data = data.reshape(*self.grid.dims, c)
        return FeatureVolume(self.grid, data, n_views=len(views))


def unproject_features(views: Sequence[PlaneFeature], rig: CameraRig, grid: VoxelGrid,
                       reduce: str = "sum", voxel_mask: np.ndarray | None = None) -> FeatureVolume:
    """Lift per-camera maps into ``grid`` by summing bilinear samples of every view.

    Samples behind a camera or outside its image contribute zero.  With
    ``reduce="mean"`` each voxel is divided by the number of views it
    projects into instead.
    """
    if len(views) != len(rig.cameras):
        raise ChannelMismatch(f"expected {len(rig.cameras)} views, got {len(views)}")
    if len({v.channels for v in views}) > 1:
        raise ChannelMismatch("all views must share a channel count")
    return SamplingPlan(rig, grid, voxel_mask).apply(views, reduce=reduce)


def bev_project(volume: FeatureVolume) -> PlaneFeature:
    return PlaneFeature("bev", volume.data.max(axis=2), volume.grid.center, volume.grid.pitch)


def triplane_project(cube: FeatureVolume) -> tuple[PlaneFeature, PlaneFeature, PlaneFeature]:
    """Max-project a volume onto its xy, xz and yz planes."""
    d = cube.data
    anchor = cube.grid.center
    pitch = cube.grid.pitch
    return (
        PlaneFeature("xy", d.max(axis=2), anchor, pitch),
        PlaneFeature("xz", d.max(axis=1), anchor, pitch),
        PlaneFeature("yz", d.max(axis=0), anchor, pitch),
    )


def _shift_axis(a: np.ndarray, axis: int, shift: float) -> np.ndarray:
    # out[i] = a(i - shift) with linear interpolation and zero fill
    s = -shift
    m = math.floor(s)
    f = s - m
    out = np.zeros_like(a)
    n = a.shape[axis]
    for off, wk in ((m, 1.0 - f), (m + 1, f)):
        if wk == 0.0:
            continue
        lo = max(0, -off)
        hi = min(n, n - off)
        if lo >= hi:
            continue
        dst = [slice(None)] * a.ndim
        src = [slice(None)] * a.ndim
        dst[axis] = slice(lo, hi)
        src[axis] = slice(lo + off, hi + off)
        out[tuple(dst)] += wk * a[tuple(src)]
    return out


def warp_plane(feature: PlaneFeature, displacement) -> PlaneFeature:
    """Translate plane content by ``displacement`` mm (bilinear, zero-filled)."""
    if feature.pitch is None:
        raise ValueError("warp_plane needs a plane with a metric pitch")
    d = np.asarray(displacement, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(d)):
        raise ValueError("displacement must be finite")
    shift = d / feature.pitch
    data = feature.data
    if shift[0] != 0.0:
        data = _shift_axis(data, 0, float(shift[0]))
    if shift[1] != 0.0:
        data = _shift_axis(data, 1, float(shift[1]))
    if data is feature.data:
        data = data.copy()
    return feature.with_data(data)
