"""Constant-velocity Kalman tracking of person roots with optimal assignment.

State is ``(x, y, z, vx, vy, vz)`` in mm and mm/frame.  Association cost is
the Euclidean distance between a detection root and a track's predicted
position (or ``1 - IoU`` of top-down boxes); pairs above the gate are
dropped after the assignment is solved.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .detect import BBox3D, Detection
from .errors import NonPSDCovariance
from .temporal import TemporalState

PSD_TOL = 1e-9

TENTATIVE = "tentative"
CONFIRMED = "confirmed"
DEAD = "dead"


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray
    q: float = 1e-2
    r: float = 400.0  # (20 mm)^2

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(6))
        object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=np.float64).reshape(6, 6))

    @property
    def position(self) -> np.ndarray:
        return self.mean[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[3:]

    @classmethod
    def from_measurement(cls, root, q: float = 1e-2, r: float = 400.0,
                         velocity_var: float = 1e4) -> "KalmanState":
        mean = np.concatenate([np.asarray(root, dtype=np.float64).reshape(3), np.zeros(3)])
        cov = np.diag([r] * 3 + [velocity_var] * 3)
        return cls(mean, cov, q, r)


def _check_psd(cov: np.ndarray) -> None:
    if not np.all(np.isfinite(cov)):
        raise NonPSDCovariance("covariance has non-finite entries")
    if np.max(np.abs(cov - cov.T)) > 1e-9 * max(1.0, np.max(np.abs(cov))):
        raise NonPSDCovariance("covariance is not symmetric")
    lo = np.linalg.eigvalsh(cov).min()
    if lo < -PSD_TOL * max(1.0, np.max(np.abs(cov))):
        raise NonPSDCovariance(f"covariance has negative eigenvalue {lo:.3g}")


def transition(dt: float) -> np.ndarray:
    F = np.eye(6)
    F[:3, 3:] = dt * np.eye(3)
    return F


H = np.hstack([np.eye(3), np.zeros((3, 3))])


def kalman_predict(state: KalmanState, dt: float = 1.0) -> KalmanState:
    if dt < 1:
        raise ValueError("dt must be >= 1 frame")
    _check_psd(state.covariance)
    F = transition(dt)
    P = F @ state.covariance @ F.T + state.q * dt * np.eye(6)
    return replace(state, mean=F @ state.mean, covariance=0.5 * (P + P.T))


def kalman_update(state: KalmanState, measurement) -> KalmanState:
    _check_psd(state.covariance)
    z = np.asarray(measurement, dtype=np.float64).reshape(3)
    P = state.covariance
    R = state.r * np.eye(3)
    S = H @ P @ H.T + R
    K = np.linalg.solve(S.T, (P @ H.T).T).T
    mean = state.mean + K @ (z - H @ state.mean)
    A = np.eye(6) - K @ H
    # Joseph form keeps the covariance PSD under round-off
    P = A @ P @ A.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    _check_psd(P)
    return replace(state, mean=mean, covariance=P)


@dataclass
class Track:
    id: int
    kalman: KalmanState
    bbox: BBox3D | None = None
    temporal: TemporalState | None = None
    hits: int = 1
    misses: int = 0
    age: int = 1
    status: str = TENTATIVE
    confidence: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return self.kalman.position

    @property
    def alive(self) -> bool:
        return self.status != DEAD


def cost_matrix(dets: Sequence[Detection], tracks: Sequence[Track], metric: str = "distance") -> np.ndarray:
    """``A[i, j]`` between detection ``i`` and track ``j``: root distance in mm or ``1 - IoU``."""
    A = np.zeros((len(dets), len(tracks)))
    if not len(dets) or not len(tracks):
        return A
    if metric == "distance":
        d = np.array([det.root for det in dets])
        t = np.array([trk.position for trk in tracks])
        return np.linalg.norm(d[:, None, :] - t[None, :, :], axis=-1)
    if metric == "iou":
        for i, det in enumerate(dets):
            for j, trk in enumerate(tracks):
                box = trk.bbox if trk.bbox is not None else det.bbox
                moved = BBox3D(np.r_[trk.position[:2], box.center[2]], box.width, box.length, box.height)
                A[i, j] = 1.0 - det.bbox.iou_xy(moved)
        return A
    raise ValueError(f"unknown cost metric {metric!r}")


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched_rows: list[int]
    unmatched_cols: list[int]
    total: float


def hungarian(cost, gate: float = np.inf) -> Assignment:
    """Minimum-cost one-to-one assignment, then drop pairs whose cost exceeds ``gate``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    n, m = cost.shape
    if n == 0 or m == 0:
        return Assignment([], list(range(n)), list(range(m)), 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] <= gate]
    mr = {r for r, _ in pairs}
    mc = {c for _, c in pairs}
    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(pairs, [i for i in range(n) if i not in mr], [j for j in range(m) if j not in mc], total)


@dataclass
class TrackerConfig:
    gate: float = 500.0
    max_age: int = 3
    min_hits: int = 2
    q: float = 1e-2
    r: float = 400.0
    metric: str = "distance"
    iou_gate: float = 0.9  # max 1 - IoU when metric == "iou"


@dataclass
class Tracker:
    """Owns the live track list and the id counter for one run."""

    config: TrackerConfig = field(default_factory=TrackerConfig)
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 1
    frame: int = 0

    def step(self, detections: Sequence[Detection]) -> list[tuple[int, Track]]:
        """Advance one frame; returns ``(detection index, track)`` for every matched or new track."""
        cfg = self.config
        self.frame += 1
        for t in self.tracks:
            t.kalman = kalman_predict(t.kalman, 1.0)
            t.age += 1
        self.tracks.sort(key=lambda t: t.id)
        A = cost_matrix(detections, self.tracks, cfg.metric)
        gate = cfg.gate if cfg.metric == "distance" else cfg.iou_gate
        # a vanishing per-column penalty breaks exact cost ties towards lower ids
        tie = 1e-9 * np.arange(A.shape[1])[None, :]
        res = hungarian(A + tie, gate)
        out = []
        for di, tj in res.pairs:
            t = self.tracks[tj]
            det = detections[di]
            t.kalman = kalman_update(t.kalman, det.root)
            t.bbox = det.bbox
            t.confidence = det.confidence
            t.hits += 1
            t.misses = 0
            if t.status == TENTATIVE and t.hits >= cfg.min_hits:
                t.status = CONFIRMED
            out.append((di, t))
        for tj in res.unmatched_cols:
            t = self.tracks[tj]
            t.misses += 1
            if t.misses > cfg.max_age:
                t.status = DEAD
        for di in res.unmatched_rows:
            det = detections[di]
            t = Track(self.next_id, KalmanState.from_measurement(det.root, cfg.q, cfg.r), det.bbox,
                      confidence=det.confidence)
            if cfg.min_hits <= 1:
                t.status = CONFIRMED
            self.next_id += 1
            self.tracks.append(t)
            out.append((di, t))
        self.tracks = [t for t in self.tracks if t.alive]
        out.sort(key=lambda p: p[0])
        return out

    def reportable(self, matched: Sequence[tuple[int, Track]]) -> list[tuple[int, Track]]:
        """Tracks to emit this frame: confirmed ones, plus anything during the warm-up frames."""
        return [(d, t) for d, t in matched
                if t.status == CONFIRMED or self.frame <= self.config.min_hits]


def step_tracker(tracker: Tracker, detections: Sequence[Detection]) -> list[tuple[int, Track]]:
    return tracker.step(detections)
