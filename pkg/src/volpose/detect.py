"""Root-joint proposals from a unprojected volume, plus the detection losses.

The learned heads are replaced by deterministic stand-ins: the root heatmap
is the bird's-eye max projection of the root-joint channel, the height
heatmap of a proposal is the raw voxel column under it, and boxes come from
the thresholded support of the root blob (:func:`regress_bboxes`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import heatmap as hm
from .errors import AllZeroHeatmap, ShapeMismatch
from .geometry import FeatureVolume, PlaneFeature, VoxelGrid, bev_project

BOX_HEIGHT = 2000.0
MIN_BOX = 200.0
SUPPORT_FRACTION = 0.3
# normalised root score; a blob seen by fewer than ~70% of the views is treated as a ray-crossing ghost
DETECTION_THRESHOLD = 0.7


@dataclass(frozen=True)
class BBox3D:
    center: np.ndarray
    width: float   # extent along world x, mm
    length: float  # extent along world y, mm
    height: float = BOX_HEIGHT

    def __post_init__(self):
        if not (self.width > 0 and self.length > 0):
            raise ValueError("box width and length must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    def contains_xy(self, x, y):
        cx, cy = self.center[0], self.center[1]
        return (np.abs(np.asarray(x) - cx) <= self.width / 2) & (np.abs(np.asarray(y) - cy) <= self.length / 2)

    def iou_xy(self, other: "BBox3D") -> float:
        """Top-down intersection over union."""
        ix = max(0.0, min(self.center[0] + self.width / 2, other.center[0] + other.width / 2)
                 - max(self.center[0] - self.width / 2, other.center[0] - other.width / 2))
        iy = max(0.0, min(self.center[1] + self.length / 2, other.center[1] + other.length / 2)
                 - max(self.center[1] - self.length / 2, other.center[1] - other.length / 2))
        inter = ix * iy
        union = self.width * self.length + other.width * other.length - inter
        return inter / union if union > 0 else 0.0


@dataclass
class Detection:
    root: np.ndarray
    bbox: BBox3D
    confidence: float
    frame: int = 0

    def __post_init__(self):
        self.root = np.asarray(self.root, dtype=np.float64).reshape(3)


@dataclass
class DetectionTargets:
    """Detector outputs or their ground truth.

    ``heatmap`` is the BEV root map, ``columns`` the ``(K, nz)`` height
    heatmaps of the proposals, ``bbox_map`` a ``(rows, cols, 3)`` map of
    (width, length, centerness) and ``support`` the cell set U on which the
    box term is evaluated (taken from the ground truth).
    """

    heatmap: np.ndarray
    columns: np.ndarray
    bbox_map: np.ndarray
    support: np.ndarray | None = None


def _plane_to_world(plane: PlaneFeature, pos) -> np.ndarray:
    rows, cols = plane.extent
    pos = np.asarray(pos, dtype=np.float64)
    centre = np.array([(rows - 1) / 2.0, (cols - 1) / 2.0])
    return plane.world_anchor[:2] + (pos - centre) * plane.pitch


def regress_bboxes(bev: PlaneFeature, peaks: list[hm.Peak],
                   fraction: float = SUPPORT_FRACTION, min_size: float = MIN_BOX) -> list[BBox3D]:
    """Support-counting box regressor.

    For each peak, the support is the 4-connected set of cells above
    ``fraction * peak value`` that contains the peak and is closer to it
    than to any other peak.  The box spans the support's cell extent; an
    empty support gives a ``min_size`` square.
    """
    h = bev.data[..., 0]
    rows, cols = h.shape
    if not peaks:
        return []
    cells = np.array([np.clip(np.rint(p.position), 0, [rows - 1, cols - 1]).astype(int) for p in peaks])
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    d2 = (ii[..., None] - cells[:, 0]) ** 2 + (jj[..., None] - cells[:, 1]) ** 2
    owner = np.argmin(d2, axis=-1)
    boxes = []
    for n, (p, (ci, cj)) in enumerate(zip(peaks, cells)):
        value = h[ci, cj]
        region = (h > fraction * value) & (owner == n) if value > 0 else np.zeros_like(h, bool)
        labels, _ = ndimage.label(region)
        lab = labels[ci, cj]
        if lab == 0:
            centre = _plane_to_world(bev, p.position)
            width = length = 0.0
        else:
            sel = np.argwhere(labels == lab)
            lo, hi = sel.min(axis=0), sel.max(axis=0)
            centre = _plane_to_world(bev, (lo + hi) / 2.0)
            width, length = (hi - lo + 1) * bev.pitch
        boxes.append(BBox3D(np.array([centre[0], centre[1], BOX_HEIGHT / 2]),
                            max(float(width), min_size), max(float(length), min_size)))
    return boxes


def detect_people(volume: FeatureVolume, grid: VoxelGrid | None = None, k: int = hm.DEFAULT_K, *,
                  threshold: float = DETECTION_THRESHOLD, nms_radius: int = hm.DEFAULT_NMS_RADIUS,
                  temperature: float = hm.DEFAULT_TEMPERATURE, frame: int = 0) -> list[Detection]:
    """Find up to ``k`` people in channel 0 (root joint) of ``volume``.

    Values are divided by ``volume.n_views`` so that a root seen by every
    camera scores 1.  Each BEV peak is refined with a windowed soft-argmax,
    then its height comes from a soft-argmax over the voxel column below.
    """
    grid = volume.grid if grid is None else grid
    root = FeatureVolume(grid, volume.data[..., :1] / max(volume.n_views, 1), volume.n_views)
    bev = bev_project(root)
    h = bev.data[..., 0]
    peaks = hm.top_k_peaks(h, k, nms_radius, threshold)
    if not peaks:
        return []
    refined = []
    for p in peaks:
        i, j = (int(v) for v in p.position)
        i0, j0 = max(0, i - nms_radius), max(0, j - nms_radius)
        win = h[i0:i + nms_radius + 1, j0:j + nms_radius + 1]
        local = hm.soft_argmax(win, temperature * p.confidence)
        refined.append(hm.Peak(local.position + [i0, j0], p.confidence))
    boxes = regress_bboxes(bev, refined)
    dets = []
    for p, box in zip(refined, boxes):
        i, j = (int(v) for v in np.rint(p.position))
        column = root.data[i, j, :, 0]
        try:
            z, _ = hm.peak_1d(column, temperature * column.max())
        except AllZeroHeatmap:
            z = (grid.dims[2] - 1) / 2.0
        pos = grid.index_to_world(np.array([p.position[0], p.position[1], z]))
        dets.append(Detection(pos, box, float(min(p.confidence, 1.0)), frame))
    dets.sort(key=lambda d: -d.confidence)
    return dets


def bbox_map(extent: tuple[int, int], cells, boxes: list[BBox3D], confidences) -> np.ndarray:
    """Rasterise boxes into a ``(rows, cols, 3)`` (width, length, centerness) map at their peak cells."""
    out = np.zeros((*extent, 3))
    for (i, j), box, c in zip(cells, boxes, confidences):
        out[int(i), int(j)] = (box.width, box.length, c)
    return out


def detection_loss(pred: DetectionTargets, gt: DetectionTargets) -> dict[str, float]:
    """Sum of the squared-L2 heatmap terms and the L1 box term over the support U."""
    for name in ("heatmap", "columns", "bbox_map"):
        a, b = np.shape(getattr(pred, name)), np.shape(getattr(gt, name))
        if a != b:
            raise ShapeMismatch(f"{name}: prediction {a} vs ground truth {b}")
    l2d = float(np.sum((np.asarray(pred.heatmap) - gt.heatmap) ** 2))
    l1d = float(np.sum((np.asarray(pred.columns) - gt.columns) ** 2))
    support = gt.support
    if support is None:
        support = np.asarray(gt.bbox_map)[..., 2] > 0
    if np.shape(support) != np.shape(gt.bbox_map)[:2]:
        raise ShapeMismatch("support mask does not match the box map")
    diff = np.abs(np.asarray(pred.bbox_map) - gt.bbox_map)[np.asarray(support, bool)]
    lbbox = float(diff.sum())
    return {"l2d": l2d, "l1d": l1d, "lbbox": lbbox, "total": l2d + l1d + lbbox}
