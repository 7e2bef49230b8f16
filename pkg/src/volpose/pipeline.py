"""Frame loop tying detection, tracking, temporal fusion, decoding and forecasting together."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import heatmap as hm
from .detect import DETECTION_THRESHOLD, Detection, detect_people
from .geometry import CameraRig, PlaneFeature, SamplingPlan, VoxelGrid, build_workspace, triplane_project
from .metrics import EvalFrame, MetricReport, evaluate, match_roots, reports_to_csv
from .posecube import CUBE_DIM, CUBE_SIDE, Pose3D, build_person_cube
from .simkit import SceneConfig, SceneSequence, default_rig, generate_scene, render_views
from .temporal import (GruParams, PoseEmbedding, TemporalState, forecast, forecast_horizon_seconds,
                       initial_state, propagate, temporal_fuse)
from .track import Tracker, TrackerConfig

STAGES = ("unproject", "detect", "track", "cube", "temporal_decode")


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    rig_path: str | None = None
    scene_path: str | None = None
    output_dir: str | None = None
    cameras: list[int] | None = None     # subset of rig cameras; the workspace always uses the full rig
    pitch: float = 100.0
    cube_side: float = CUBE_SIDE
    cube_dim: int = CUBE_DIM
    history: int = 3                     # 1 turns temporal fusion off
    warp: bool = True
    forecast_steps: int = 2
    forecast_stride: int = 3
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    detection_threshold: float = DETECTION_THRESHOLD
    max_people: int = hm.DEFAULT_K
    temperature: float = hm.DEFAULT_TEMPERATURE
    gru_update: float = 0.8
    gru_gain: float = 0.5
    gru_params_path: str | None = None
    threads: int = 1
    seed: int | None = None              # overrides scene.seed when set
    match_distance: float = 500.0
    svg: bool = False
    run_name: str = "run"

    def __post_init__(self):
        if self.history < 1:
            raise ValueError("history length must be >= 1")
        if self.forecast_steps < 0 or self.forecast_stride < 1:
            raise ValueError("forecast steps must be >= 0 and stride >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")


@dataclass
class TrackOutput:
    tid: int
    pose: Pose3D
    confidence: float
    forecasts: list[tuple[int, Pose3D]]


@dataclass
class RunResult:
    frames: list[list[TrackOutput]]
    report: MetricReport
    timings: dict[str, list[float]]
    frame_ms: list[float]
    scene: SceneSequence

    def results_lines(self) -> list[str]:
        return [results_line(t, outs) for t, outs in enumerate(self.frames)]


def _r(a, nd: int = 3):
    return np.round(np.asarray(a, dtype=np.float64), nd).tolist()


def results_line(t: int, outs: Sequence[TrackOutput]) -> str:
    tracks = []
    for o in outs:
        tracks.append({
            "tid": o.tid,
            "root": _r(o.pose.joints[0]),
            "joints": _r(o.pose.joints),
            "conf": round(float(o.confidence), 4),
            "forecast": [{"dt_frames": dt, "joints": _r(p.joints)} for dt, p in o.forecasts],
        })
    return json.dumps({"t": t, "tracks": tracks}, separators=(",", ":"))


def gru_params(cfg: RunConfig, channels: int) -> GruParams:
    if cfg.gru_params_path:
        return GruParams.load(cfg.gru_params_path)
    return GruParams.smoothing(channels, cfg.gru_update, cfg.gru_gain)


def embed(cube_volume, anchor) -> PoseEmbedding:
    """Observation embedding: tri-plane max projections scaled by the view count."""
    scale = 1.0 / max(cube_volume.n_views, 1)
    xy, xz, yz = triplane_project(cube_volume)
    return PoseEmbedding.from_arrays(xy.data * scale, xz.data * scale, yz.data * scale, anchor,
                                     cube_volume.grid.pitch)


class Pipeline:
    """Stateful per-run processor; feed frames in order with :meth:`process`."""

    def __init__(self, cfg: RunConfig, rig: CameraRig, grid: VoxelGrid | None = None):
        self.cfg = cfg
        self.full_rig = rig
        self.rig = rig.subset(cfg.cameras) if cfg.cameras is not None else rig
        self.grid = build_workspace(rig, cfg.pitch) if grid is None else grid
        self.root_plan = SamplingPlan(self.rig, self.grid)
        self.tracker = Tracker(replace(cfg.tracker))
        self.params: GruParams | None = None
        self.last_frame: dict[int, int] = {}
        self.timings = {s: [] for s in STAGES}
        self.pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def _map(self, fn, items):
        if self.pool is None:
            return [fn(i) for i in items]
        return list(self.pool.map(fn, items))

    def _person(self, views, t, det: Detection, track):
        cfg = self.cfg
        t0 = time.perf_counter()
        cube = build_person_cube(views, self.rig, det, cfg.cube_side, cfg.cube_dim)
        t1 = time.perf_counter()
        obs = embed(cube.volume, cube.grid.center)
        velocity = track.kalman.velocity.copy()
        if cfg.history > 1:
            state = track.temporal
            if state is not None:
                gap = t - self.last_frame.get(track.id, t - 1)
                state = propagate(state, velocity * gap)
            fused, state = temporal_fuse(state, obs, self.params, warp=cfg.warp)
        else:
            fused = obs
            state = TemporalState(obs, obs.anchor.copy(), 1)
        pose = fused.decode(cfg.temperature, pid=track.id)
        pose.joints[pose.confidence == 0] = det.root
        futures = []
        if cfg.forecast_steps:
            embs = forecast(state, self.params, cfg.forecast_steps, velocity, cfg.forecast_stride)
            for k, e in enumerate(embs, 1):
                fp = e.decode(cfg.temperature, pid=track.id)
                fp.joints[fp.confidence == 0] = e.anchor
                futures.append((k * cfg.forecast_stride, fp))
        t2 = time.perf_counter()
        return state, TrackOutput(track.id, pose, det.confidence, futures), (t1 - t0, t2 - t1)

    def process(self, t: int, views: Sequence[PlaneFeature]) -> list[TrackOutput]:
        cfg = self.cfg
        t0 = time.perf_counter()
        volume = self.root_plan.apply([v.with_data(v.data[..., :1]) for v in views])
        t1 = time.perf_counter()
        dets = detect_people(volume, self.grid, cfg.max_people, threshold=cfg.detection_threshold,
                             temperature=cfg.temperature, frame=t)
        t2 = time.perf_counter()
        matched = self.tracker.step(dets)
        report = self.tracker.reportable(matched)
        t3 = time.perf_counter()
        if self.params is None:
            self.params = gru_params(cfg, views[0].channels)
        # every matched track keeps its temporal state current, reported or not
        results = self._map(lambda p: self._person(views, t, dets[p[0]], p[1]), matched)
        cube_s = sum(r[2][0] for r in results)
        pose_s = sum(r[2][1] for r in results)
        shown = {id(tr) for _, tr in report}
        outs = []
        for (di, track), (state, out, _) in zip(matched, results):
            track.temporal = state
            self.last_frame[track.id] = t
            if id(track) in shown:
                outs.append(out)
        outs.sort(key=lambda o: o.tid)
        for name, v in zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, cube_s, pose_s)):
            self.timings[name].append(v * 1000.0)
        return outs


def load_inputs(cfg: RunConfig) -> tuple[CameraRig, SceneSequence, SceneConfig]:
    from .geometry import load_rig
    from .simkit import load_scene

    scfg = cfg.scene if cfg.seed is None else replace(cfg.scene, seed=cfg.seed)
    rig = load_rig(cfg.rig_path) if cfg.rig_path else default_rig(fps=scfg.fps)
    grid = build_workspace(rig, cfg.pitch)
    if cfg.scene_path:
        scene = load_scene(cfg.scene_path, rig, scfg)
    else:
        scene = generate_scene(scfg, rig, grid)
    return rig, scene, scfg


def run_pipeline(cfg: RunConfig, rig: CameraRig | None = None, scene: SceneSequence | None = None) -> RunResult:
    if rig is None or scene is None:
        rig, scene, _ = load_inputs(cfg)
    pipe = Pipeline(cfg, rig)
    frames, frame_ms = [], []
    try:
        for t in range(len(scene)):
            # render every camera so a subset sees exactly the same noise draws as the full rig
            views = render_views(scene, rig, t)
            if cfg.cameras is not None:
                views = [views[i] for i in cfg.cameras]
            s = time.perf_counter()
            frames.append(pipe.process(t, views))
            frame_ms.append((time.perf_counter() - s) * 1000.0)
    finally:
        pipe.close()
    report = score(frames, scene, cfg)
    return RunResult(frames, report, pipe.timings, frame_ms, scene)


def score(frames: Sequence[Sequence[TrackOutput]], scene: SceneSequence, cfg: RunConfig) -> MetricReport:
    evals = []
    pairs = []
    last = cfg.forecast_steps * cfg.forecast_stride
    for t, outs in enumerate(frames):
        gt = scene.visible(t)
        preds = [o.pose for o in outs]
        evals.append(EvalFrame(t, preds, gt, [o.confidence for o in outs]))
        if not last or t + last >= len(scene):
            continue
        future = {p.pid: p for p in scene.visible(t + last)}
        for pi, gi in match_roots(preds, gt, cfg.match_distance):
            fc = dict(outs[pi].forecasts).get(last)
            if fc is not None and gt[gi].pid in future:
                pairs.append((fc, future[gt[gi].pid]))
    fps = scene.rig.frame_rate if scene.rig is not None else 18.0
    horizon = forecast_horizon_seconds(cfg.forecast_steps, cfg.forecast_stride, fps) if last else 0.0
    return evaluate(evals, pairs, horizon, cfg.match_distance, cfg.run_name)


def latency_table(timings: dict[str, list[float]], frame_ms: Sequence[float]) -> list[dict]:
    rows = []
    for name, vals in list(timings.items()) + [("frame", list(frame_ms))]:
        a = np.asarray(vals, dtype=np.float64)
        rows.append({"stage": name, "frames": len(a),
                     "median_ms": float(np.median(a)) if len(a) else 0.0,
                     "p95_ms": float(np.percentile(a, 95)) if len(a) else 0.0,
                     "mean_ms": float(a.mean()) if len(a) else 0.0})
    return rows


def latency_csv(rows: Sequence[dict]) -> str:
    out = ["stage,frames,median_ms,p95_ms,mean_ms"]
    for r in rows:
        out.append(f"{r['stage']},{r['frames']},{r['median_ms']:.3f},{r['p95_ms']:.3f},{r['mean_ms']:.3f}")
    return "\n".join(out) + "\n"


def write_outputs(result: RunResult, out_dir, svg: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.jsonl").write_text("\n".join(result.results_lines()) + "\n")
    (out / "metrics.csv").write_text(reports_to_csv([result.report]))
    (out / "metrics.json").write_text(result.report.to_json() + "\n")
    (out / "latency.csv").write_text(latency_csv(latency_table(result.timings, result.frame_ms)))
    if svg:
        (out / "bev.svg").write_text(bev_svg(result))


def benchmark(cfg: RunConfig, frames: int = 100) -> list[dict]:
    """Per-stage wall-clock statistics over a ``frames``-long run (rendering excluded)."""
    cfg = replace(cfg, scene=replace(cfg.scene, frames=frames), scene_path=None)
    result = run_pipeline(cfg)
    return latency_table(result.timings, result.frame_ms)


def ablate(cfg: RunConfig, camera_counts: Sequence[int] = (1, 3)) -> list[MetricReport]:
    """Metric rows for the full system and its switched-off variants on one scene."""
    rig, scene, _ = load_inputs(cfg)
    variants = [("full", cfg), ("no-warp", replace(cfg, warp=False)),
                ("no-temporal", replace(cfg, history=1))]
    n = len(rig.cameras)
    for k in camera_counts:
        if k < n:
            variants.append((f"cams-{k}", replace(cfg, cameras=camera_subset(n, k))))
    reports = []
    for name, c in variants:
        r = run_pipeline(replace(c, run_name=name), rig, scene).report
        reports.append(r)
    return reports


def camera_subset(n: int, k: int) -> list[int]:
    """The first ``k`` cameras; the default rig lists opposite corners first."""
    if not 1 <= k <= n:
        raise ValueError(f"cannot pick {k} of {n} cameras")
    return list(range(k))


def bev_svg(result: RunResult, size: int = 600) -> str:
    """Top-down plot of ground-truth roots (grey) and tracked roots (one colour per id)."""
    scene = result.scene
    pts = [p.root[:2] for fr in scene.poses for p in fr] + \
          [o.pose.root[:2] for fr in result.frames for o in fr]
    if not pts:
        pts = [np.zeros(2)]
    pts = np.array(pts)
    lo, hi = pts.min(axis=0) - 500, pts.max(axis=0) + 500
    scale = size / float(max(hi - lo))

    def xy(p):
        return (p[0] - lo[0]) * scale, size - (p[1] - lo[1]) * scale

    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    paths: dict[int, list] = {}
    for fr in scene.poses:
        for p in fr:
            paths.setdefault(-1 - int(p.pid), []).append(xy(p.root))
    for fr in result.frames:
        for o in fr:
            paths.setdefault(o.tid, []).append(xy(o.pose.root))
    for key in sorted(paths):
        colour = "#999999" if key < 0 else palette[key % len(palette)]
        width = 6 if key < 0 else 2
        d = " ".join(f"{x:.1f},{y:.1f}" for x, y in paths[key])
        parts.append(f'<polyline points="{d}" fill="none" stroke="{colour}" stroke-width="{width}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
