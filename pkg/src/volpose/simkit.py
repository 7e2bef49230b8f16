"""Synthetic multi-person scenes and per-camera joint heatmaps.

People are 15-joint skeletons (joint 0 is the mid-hip root) built from
:data:`SKELETON`, with arms and legs swinging about the body's lateral
axis while the root follows the configured motion.  Every random draw is
seeded by ``(seed, frame, camera)`` so renders are reproducible frame by
frame and independent of evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import heatmap as hm
from .errors import WorkspaceOverflow
from .geometry import Camera, CameraRig, PlaneFeature, VoxelGrid, build_workspace
from .posecube import NUM_JOINTS, Pose3D

JOINT_NAMES = (
    "mid_hip", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "l_hip", "l_knee", "l_ankle",
    "r_shoulder", "r_elbow", "r_wrist", "r_hip", "r_knee", "r_ankle",
)

ROOT_HEIGHT = 920.0

# rest pose, mm relative to the root; x lateral (left negative), y forward, z up
SKELETON = np.array([
    [0.0, 0.0, 0.0],
    [0.0, 0.0, 520.0],
    [0.0, 20.0, 720.0],
    [-180.0, 0.0, 480.0],
    [-200.0, 0.0, 200.0],
    [-210.0, 30.0, -40.0],
    [-100.0, 0.0, 0.0],
    [-100.0, 20.0, -450.0],
    [-100.0, 0.0, -860.0],
    [180.0, 0.0, 480.0],
    [200.0, 0.0, 200.0],
    [210.0, 30.0, -40.0],
    [100.0, 0.0, 0.0],
    [100.0, 20.0, -450.0],
    [100.0, 0.0, -860.0],
])

# (pivot joint, moved joints, amplitude sign) for the swinging limbs
SWING = (
    (6, (7, 8), 1.0), (12, (13, 14), -1.0),
    (3, (4, 5), -1.0), (9, (10, 11), 1.0),
)

MOTIONS = ("stationary", "constant-velocity", "crossing")


@dataclass
class SceneConfig:
    persons: int = 1
    frames: int = 10
    fps: float = 18.0
    motion: str = "stationary"
    speed: float = 30.0                 # mm per frame
    heading: float = 0.0                # radians, direction of travel in the x/y plane
    closest_approach: float = 800.0     # crossing motion, mm
    spacing: float = 1500.0             # radius of the default ring layout, mm
    positions: list | None = None       # explicit (x, y) per person overrides the layout
    dropouts: list = field(default_factory=list)   # (pid, start, end) frames hidden from the cameras
    joints: int = NUM_JOINTS
    seed: int = 0
    sigma_px: float = 10.0
    jitter_px: float = 0.0
    miss_rate: float = 0.0
    fp_rate: float = 0.0
    swing_deg: float = 20.0
    swing_period: float = 24.0          # frames

    def __post_init__(self):
        if self.persons < 0 or self.frames < 1:
            raise ValueError("persons must be >= 0 and frames >= 1")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}, got {self.motion!r}")
        if self.joints != NUM_JOINTS:
            raise ValueError(f"only the {NUM_JOINTS}-joint skeleton is available")
        for name in ("miss_rate", "fp_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.sigma_px <= 0 or self.jitter_px < 0:
            raise ValueError("sigma_px must be positive and jitter_px non-negative")
        if self.motion == "crossing" and self.persons % 2:
            raise ValueError("crossing motion needs an even number of persons")
        self.dropouts = [tuple(int(v) for v in d) for d in self.dropouts]


@dataclass
class SceneSequence:
    poses: list[list[Pose3D]]          # per frame, every person, sorted by pid
    hidden: list[frozenset[int]]       # per frame, pids invisible to every camera
    rig: CameraRig | None = None
    config: SceneConfig | None = None

    def __len__(self):
        return len(self.poses)

    def visible(self, t: int) -> list[Pose3D]:
        return [p for p in self.poses[t] if p.pid not in self.hidden[t]]


def default_rig(n_cameras: int = 5, image_size: tuple[int, int] = (400, 300), focal: float = 300.0,
                fps: float = 18.0) -> CameraRig:
    """Cameras on the corners of an 8 m square, then the middle of one side, all aimed at the centre."""
    spots = [(-4000.0, -4000.0, 2600.0), (4000.0, 4000.0, 2600.0), (4000.0, -4000.0, 2600.0),
             (-4000.0, 4000.0, 2600.0), (0.0, 4000.0, 3000.0)]
    if not 1 <= n_cameras <= len(spots):
        raise ValueError(f"default rig supports 1..{len(spots)} cameras")
    target = (0.0, 0.0, 900.0)
    cams = [Camera.look_at(f"cam{i}", spots[i], target, focal, image_size) for i in range(n_cameras)]
    return CameraRig(tuple(cams), fps)


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skeleton_pose(root, heading: float = 0.0, swing: float = 0.0) -> np.ndarray:
    """World joints for a body at ``root`` facing ``heading`` with limbs swung by ``swing`` rad."""
    local = SKELETON.copy()
    if swing:
        for pivot, moved, sign in SWING:
            R = _rot_x(sign * swing)
            idx = list(moved)
            local[idx] = (local[idx] - local[pivot]) @ R.T + local[pivot]
    # local +y is forward; rotate so that it points along the heading
    R = _rot_z(heading - math.pi / 2)
    return local @ R.T + np.asarray(root, dtype=np.float64)


def _layout(cfg: SceneConfig) -> np.ndarray:
    if cfg.positions is not None:
        pos = np.asarray(cfg.positions, dtype=np.float64).reshape(-1, 2)
        if len(pos) != cfg.persons:
            raise ValueError(f"{len(pos)} positions given for {cfg.persons} persons")
        return pos
    if cfg.persons <= 1:
        return np.zeros((cfg.persons, 2))
    ang = 2 * math.pi * np.arange(cfg.persons) / cfg.persons + math.pi / 2
    return cfg.spacing * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _trajectories(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Root positions ``(frames, persons, 3)`` and headings ``(persons,)``."""
    t = np.arange(cfg.frames, dtype=np.float64)
    n = cfg.persons
    roots = np.zeros((cfg.frames, n, 3))
    roots[..., 2] = ROOT_HEIGHT
    headings = np.full(n, cfg.heading)
    base = _layout(cfg)
    if cfg.motion == "stationary":
        roots[..., :2] = base[None]
    elif cfg.motion == "constant-velocity":
        v = cfg.speed * np.array([math.cos(cfg.heading), math.sin(cfg.heading)])
        # centre each path on its layout position
        start = base - v * ((cfg.frames - 1) // 2)
        roots[..., :2] = start[None] + t[:, None, None] * v
    else:
        # pairs walk in opposite directions along x, closest at the middle frame
        mid = cfg.frames // 2
        for k in range(n // 2):
            c = base[2 * k] if cfg.positions is not None else np.array([0.0, k * 2.0 * cfg.spacing])
            off = cfg.closest_approach / 2.0
            for s, pid in ((1.0, 2 * k), (-1.0, 2 * k + 1)):
                roots[:, pid, 0] = c[0] + s * cfg.speed * (t - mid)
                roots[:, pid, 1] = c[1] - s * off
                headings[pid] = 0.0 if s > 0 else math.pi
    return roots, headings


def generate_scene(config: SceneConfig, rig: CameraRig, grid: VoxelGrid | None = None) -> SceneSequence:
    """Ground-truth poses for every frame; raises :class:`WorkspaceOverflow` if anyone leaves the grid."""
    grid = build_workspace(rig) if grid is None else grid
    roots, headings = _trajectories(config)
    lo, hi = grid.origin, grid.origin + grid.size
    poses, hidden = [], []
    amp = 0.0 if config.motion == "stationary" else math.radians(config.swing_deg)
    for f in range(config.frames):
        swing = amp * math.sin(2 * math.pi * f / config.swing_period)
        frame = []
        for pid in range(config.persons):
            joints = skeleton_pose(roots[f, pid], headings[pid], swing)
            if np.any(joints < lo) or np.any(joints > hi):
                raise WorkspaceOverflow(f"person {pid} leaves the workspace at frame {f}")
            frame.append(Pose3D(joints, None, pid))
        poses.append(frame)
        hidden.append(frozenset(pid for pid, a, b in config.dropouts if a <= f < b))
    return SceneSequence(poses, hidden, rig, config)


def render_view(camera: Camera, poses: Sequence[Pose3D], rng: np.random.Generator, sigma_px: float,
                jitter_px: float = 0.0, miss_rate: float = 0.0, fp_rate: float = 0.0,
                joints: int = NUM_JOINTS) -> PlaneFeature:
    """One camera's ``(height, width, joints)`` heatmap stack; overlapping blobs combine by max."""
    out = np.zeros((camera.height, camera.width, joints))
    # fixed draw order: jitter and miss per (person, joint), then false positives per joint
    for pose in poses:
        pix, depth = camera.project(pose.joints)
        noise = rng.standard_normal((joints, 2)) * jitter_px
        miss = rng.random(joints) < miss_rate
        for j in range(joints):
            if miss[j] or depth[j] <= 0:
                continue
            u, v = pix[j] + noise[j]
            hm.splat_gaussian(out[..., j], (v, u), sigma_px)
    fp = rng.random(joints) < fp_rate
    spots = rng.random((joints, 3))
    for j in np.flatnonzero(fp):
        r, c, a = spots[j]
        hm.splat_gaussian(out[..., j], (r * (camera.height - 1), c * (camera.width - 1)), sigma_px, 0.5 + 0.5 * a)
    return PlaneFeature("image", out)


def render_views(scene: SceneSequence, rig: CameraRig, frame: int, sigma_px: float | None = None,
                 noise: dict | None = None, seed: int | None = None) -> list[PlaneFeature]:
    """Per-camera heatmaps for one frame, deterministic in ``(seed, frame, camera index)``.

    ``noise`` may hold ``jitter_px``, ``miss_rate`` and ``fp_rate``; values
    default to the scene config.
    """
    if not 0 <= frame < len(scene):
        raise IndexError(f"frame {frame} outside 0..{len(scene) - 1}")
    cfg = scene.config or SceneConfig()
    sigma = cfg.sigma_px if sigma_px is None else sigma_px
    params = {"jitter_px": cfg.jitter_px, "miss_rate": cfg.miss_rate, "fp_rate": cfg.fp_rate}
    params.update(noise or {})
    seed = cfg.seed if seed is None else seed
    people = scene.visible(frame)
    views = []
    for ci, cam in enumerate(rig.cameras):
        rng = np.random.default_rng([seed, frame, ci])
        views.append(render_view(cam, people, rng, sigma, joints=cfg.joints, **params))
    return views


def save_scene(scene: SceneSequence, path) -> None:
    """``scene.jsonl``: one ``{"t", "persons": [{"pid", "joints"}]}`` line per frame."""
    lines = []
    for t, frame in enumerate(scene.poses):
        persons = []
        for p in frame:
            rec = {"pid": int(p.pid), "joints": np.round(p.joints, 6).tolist()}
            if p.pid in scene.hidden[t]:
                rec["visible"] = False
            persons.append(rec)
        lines.append(json.dumps({"t": t, "persons": persons}, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path, rig: CameraRig | None = None, config: SceneConfig | None = None) -> SceneSequence:
    poses, hidden = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            frame = [Pose3D(np.array(p["joints"], dtype=float), None, int(p["pid"])) for p in rec["persons"]]
            gone = frozenset(int(p["pid"]) for p in rec["persons"] if p.get("visible", True) is False)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{n}: malformed scene record ({exc})") from None
        poses.append(sorted(frame, key=lambda p: p.pid))
        hidden.append(gone)
    return SceneSequence(poses, hidden, rig, config)
