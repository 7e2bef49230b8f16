"""Pose, detection, tracking and forecasting scores.

All distances are in mm.  Scores reported as percentages lie in [0, 100]
(MOTA may be negative).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .posecube import Pose3D

AP_THRESHOLDS = (25, 50, 100, 150)
MATCH_DISTANCE = 500.0

# 15-joint skeleton: 0 mid-hip, 1 neck, 2 head, 3-5 left arm, 6-8 left leg, 9-11 right arm, 12-14 right leg
LIMBS = (
    (0, 1), (1, 2),
    (3, 4), (4, 5), (9, 10), (10, 11),
    (6, 7), (7, 8), (12, 13), (13, 14),
)


@dataclass
class EvalFrame:
    """Predictions and ground truth for one frame.

    ``pred[i].pid`` is the track id, ``gt[i].pid`` the person id.
    ``scores`` are detection confidences; they default to the mean joint
    confidence of each prediction.
    """

    frame: int
    pred: list[Pose3D]
    gt: list[Pose3D]
    scores: list[float] | None = None

    def pred_scores(self) -> list[float]:
        if self.scores is not None:
            return list(self.scores)
        return [float(np.mean(p.confidence)) for p in self.pred]


def mpjpe(pred: Pose3D, gt: Pose3D) -> float:
    a, b = _joints(pred), _joints(gt)
    if a.shape != b.shape:
        raise ValueError(f"joint arrays differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=1).mean())


def _joints(p) -> np.ndarray:
    return p.joints if isinstance(p, Pose3D) else np.asarray(p, dtype=np.float64).reshape(-1, 3)


def ap_at(frames: Sequence[EvalFrame], threshold: float) -> float:
    """Average precision (percent) at an MPJPE threshold.

    Predictions from all frames are ranked by score.  Each one, in turn, is
    matched to the closest still-unmatched ground truth of its frame whose
    MPJPE is below ``threshold``; otherwise it is a false positive.  The
    score is the all-point interpolated area under the precision/recall curve.
    """
    n_gt = sum(len(f.gt) for f in frames)
    entries = []
    for f in frames:
        for i, s in enumerate(f.pred_scores()):
            entries.append((-s, f.frame, i, f))
    if n_gt == 0 or not entries:
        return 0.0
    entries.sort(key=lambda e: e[:3])
    taken: dict[int, set[int]] = {}
    tp = np.zeros(len(entries))
    for k, (_, _, i, f) in enumerate(entries):
        used = taken.setdefault(id(f), set())
        best, best_d = None, threshold
        for g, gt in enumerate(f.gt):
            if g in used:
                continue
            d = mpjpe(f.pred[i], gt)
            if d < best_d:
                best, best_d = g, d
        if best is not None:
            used.add(best)
            tp[k] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(entries) + 1)
    # precision envelope, then area under the step curve at recall changes
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(100.0 * np.sum((recall - prev) * env))


def pcp3d(pred: Pose3D, gt: Pose3D, limbs: Sequence[tuple[int, int]] = LIMBS) -> float:
    """Percent of limbs whose mean endpoint error is at most half the true limb length."""
    a, b = _joints(pred), _joints(gt)
    if not limbs:
        raise ValueError("empty limb list")
    correct = 0
    for j, k in limbs:
        err = 0.5 * (np.linalg.norm(a[j] - b[j]) + np.linalg.norm(a[k] - b[k]))
        half = 0.5 * np.linalg.norm(b[j] - b[k])
        # inclusive boundary, robust to the last bit of round-off
        if err <= half * (1.0 + 1e-12) + 1e-12:
            correct += 1
    return 100.0 * correct / len(limbs)


def match_roots(pred: Sequence[Pose3D], gt: Sequence[Pose3D], gate: float = MATCH_DISTANCE) -> list[tuple[int, int]]:
    """Optimal one-to-one ``(pred index, gt index)`` pairs by root distance, gated."""
    if not pred or not gt:
        return []
    A = np.linalg.norm(np.array([p.root for p in pred])[:, None] - np.array([g.root for g in gt])[None], axis=-1)
    rows, cols = linear_sum_assignment(A)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if A[r, c] <= gate]


@dataclass
class MotCounts:
    gt: int = 0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    matches: int = 0
    idtp: int = 0
    idfp: int = 0
    idfn: int = 0

    @property
    def mota(self) -> float:
        return 100.0 * (1.0 - (self.fn + self.fp + self.idsw) / max(self.gt, 1))

    @property
    def idf1(self) -> float:
        denom = 2 * self.idtp + self.idfp + self.idfn
        return 100.0 * 2 * self.idtp / denom if denom else 100.0


def mot_counts(frames: Sequence[EvalFrame], threshold: float = MATCH_DISTANCE) -> MotCounts:
    c = MotCounts()
    current: dict[int, int] = {}   # gt pid -> pred pid matched in the previous frame
    last_seen: dict[int, int] = {}  # gt pid -> last pred pid it was ever matched to
    pair_frames: dict[tuple[int, int], int] = {}
    gt_total: dict[int, int] = {}
    pred_total: dict[int, int] = {}
    for f in sorted(frames, key=lambda f: f.frame):
        gts = {g.pid: g.root for g in f.gt}
        preds = {p.pid: p.root for p in f.pred}
        for g in gts:
            gt_total[g] = gt_total.get(g, 0) + 1
        for p in preds:
            pred_total[p] = pred_total.get(p, 0) + 1
        for g, groot in gts.items():
            for p, proot in preds.items():
                if np.linalg.norm(groot - proot) <= threshold:
                    pair_frames[(g, p)] = pair_frames.get((g, p), 0) + 1
        matched: dict[int, int] = {}
        # continuity: keep last frame's pairs that are still within the gate
        for g, p in current.items():
            if g in gts and p in preds and np.linalg.norm(gts[g] - preds[p]) <= threshold:
                matched[g] = p
        free_g = sorted(g for g in gts if g not in matched)
        used_p = set(matched.values())
        free_p = sorted(p for p in preds if p not in used_p)
        if free_g and free_p:
            A = np.array([[np.linalg.norm(gts[g] - preds[p]) for p in free_p] for g in free_g])
            big = threshold * 10.0 + 1.0 + float(A.max())
            rows, cols = linear_sum_assignment(np.where(A <= threshold, A, big))
            for r, col in zip(rows, cols):
                if A[r, col] <= threshold:
                    matched[free_g[r]] = free_p[col]
        for g, p in matched.items():
            if g in last_seen and last_seen[g] != p:
                c.idsw += 1
            last_seen[g] = p
        c.gt += len(gts)
        c.matches += len(matched)
        c.fn += len(gts) - len(matched)
        c.fp += len(preds) - len(matched)
        current = matched
    # global identity mapping maximising frames of agreement
    g_ids, p_ids = sorted(gt_total), sorted(pred_total)
    if g_ids and p_ids:
        W = np.array([[pair_frames.get((g, p), 0) for p in p_ids] for g in g_ids], dtype=float)
        rows, cols = linear_sum_assignment(-W)
        c.idtp = int(sum(W[r, col] for r, col in zip(rows, cols)))
    c.idfn = sum(gt_total.values()) - c.idtp
    c.idfp = sum(pred_total.values()) - c.idtp
    return c


def mot_metrics(frames: Sequence[EvalFrame], threshold: float = MATCH_DISTANCE) -> tuple[float, float]:
    """``(MOTA, IDF1)`` in percent, associating on root distance."""
    c = mot_counts(frames, threshold)
    return c.mota, c.idf1


def forecast_mpjpe(pred: Sequence[Pose3D], gt: Sequence[Pose3D], horizon: float | None = None) -> float:
    """Mean MPJPE over aligned future-pose pairs; ``horizon`` (s) is informational."""
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} forecasts vs {len(gt)} ground-truth poses")
    if not pred:
        return float("nan")
    return float(np.mean([mpjpe(p, g) for p, g in zip(pred, gt)]))


CSV_COLUMNS = ("run", "frames", "mpjpe", "ap25", "ap50", "ap100", "ap150", "pcp3d",
               "mota", "idf1", "idsw", "fp", "fn", "forecast_mpjpe", "forecast_horizon_s")


@dataclass
class MetricReport:
    mpjpe: float
    ap: dict[int, float]
    pcp3d_per_actor: dict[int, float]
    pcp3d: float
    mota: float
    idf1: float
    idsw: int = 0
    fp: int = 0
    fn: int = 0
    forecast_mpjpe: float = float("nan")
    forecast_horizon_s: float = 0.0
    frames: int = 0
    run: str = "run"
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        r = {"run": self.run, "frames": self.frames, "mpjpe": self.mpjpe,
             "pcp3d": self.pcp3d, "mota": self.mota, "idf1": self.idf1, "idsw": self.idsw,
             "fp": self.fp, "fn": self.fn, "forecast_mpjpe": self.forecast_mpjpe,
             "forecast_horizon_s": self.forecast_horizon_s}
        for t in AP_THRESHOLDS:
            r[f"ap{t}"] = self.ap.get(t, float("nan"))
        return {k: _round(r[k]) for k in CSV_COLUMNS}

    def to_json(self) -> str:
        d = asdict(self)
        d["ap"] = {str(k): v for k, v in self.ap.items()}
        d["pcp3d_per_actor"] = {str(k): v for k, v in self.pcp3d_per_actor.items()}
        return json.dumps(_clean(d), indent=2, sort_keys=True)


def _round(v):
    if isinstance(v, float):
        return None if math.isnan(v) else round(v, 4)
    return v


def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return None if math.isnan(v) else round(v, 6)
    if isinstance(v, np.integer):
        return int(v)
    return v


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: ("" if v is None else v) for k, v in r.row().items()})
    return buf.getvalue()


def evaluate(frames: Sequence[EvalFrame], forecasts: Sequence[tuple[Pose3D, Pose3D]] = (),
             horizon_s: float = 0.0, match_distance: float = MATCH_DISTANCE, run: str = "run") -> MetricReport:
    """Full report: root-matched MPJPE and PCP3D, AP at the standard thresholds, CLEAR-MOT and forecast error."""
    errs = []
    pcp_sum: dict[int, float] = {}
    pcp_n: dict[int, int] = {}
    for f in frames:
        pairs = dict((g, p) for p, g in match_roots(f.pred, f.gt, match_distance))
        for gi, g in enumerate(f.gt):
            pcp_n[g.pid] = pcp_n.get(g.pid, 0) + 1
            if gi in pairs:
                p = f.pred[pairs[gi]]
                errs.append(mpjpe(p, g))
                pcp_sum[g.pid] = pcp_sum.get(g.pid, 0.0) + pcp3d(p, g)
    per_actor = {pid: pcp_sum.get(pid, 0.0) / n for pid, n in sorted(pcp_n.items())}
    counts = mot_counts(frames, match_distance)
    fc = forecast_mpjpe([p for p, _ in forecasts], [g for _, g in forecasts]) if forecasts else float("nan")
    return MetricReport(
        mpjpe=float(np.mean(errs)) if errs else float("nan"),
        ap={t: ap_at(frames, t) for t in AP_THRESHOLDS},
        pcp3d_per_actor=per_actor,
        pcp3d=float(np.mean(list(per_actor.values()))) if per_actor else float("nan"),
        mota=counts.mota, idf1=counts.idf1, idsw=counts.idsw, fp=counts.fp, fn=counts.fn,
        forecast_mpjpe=fc, forecast_horizon_s=horizon_s, frames=len(frames), run=run,
    )
