"""Convolutional GRU fusion of per-person plane features over time.

Each person carries a hidden :class:`PoseEmbedding` (xy, xz and yz planes).
At every frame the hidden planes are translated into the current cube's
frame and merged with the new observation by a spatial GRU cell::

    z  = sigmoid(conv_z([x, h]))
    r  = sigmoid(conv_r([x, h]))
    h~ = tanh(conv_h([x, r * h]))
    h' = (1 - z) * h + z * h~

All convolutions are 3x3 cross-correlations with zero padding, computed in
float64.  The encoder and decoder networks around the cell are identity
maps here.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import heatmap as hm
from .errors import LengthMismatch, ShapeMismatch
from .geometry import PlaneFeature, warp_plane
from .posecube import (PlaneHeatmaps, Pose3D, decode_planes, decode_planes_backward,
                       pose_loss)

PARAM_NAMES = ("wz", "bz", "wr", "br", "wh", "bh")
# world axes spanned by the xy, xz and yz planes
PLANE_WORLD_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass
class GruParams:
    """Gate kernels ``(C, 2C, 3, 3)`` and biases ``(C,)`` for z, r and the candidate."""

    wz: np.ndarray
    bz: np.ndarray
    wr: np.ndarray
    br: np.ndarray
    wh: np.ndarray
    bh: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        c = self.bz.shape[0]
        for w, b in ((self.wz, self.bz), (self.wr, self.br), (self.wh, self.bh)):
            if w.shape != (c, 2 * c, 3, 3) or b.shape != (c,):
                raise ShapeMismatch(f"GRU kernel {w.shape} / bias {b.shape} inconsistent with C={c}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("GRU parameters must be finite")

    @property
    def channels(self) -> int:
        return self.bz.shape[0]

    @classmethod
    def zeros(cls, channels: int) -> "GruParams":
        c = channels
        return cls(*(np.zeros((c, 2 * c, 3, 3)) if n.startswith("w") else np.zeros(c) for n in PARAM_NAMES))

    @classmethod
    def identity(cls, channels: int, saturation: float = 30.0) -> "GruParams":
        """Update gate pinned shut: ``h' = h`` up to ``sigmoid(-saturation)``."""
        p = cls.zeros(channels)
        p.bz[:] = -saturation
        return p

    @classmethod
    def smoothing(cls, channels: int, update: float = 0.8, gain: float = 1.0) -> "GruParams":
        """Hand-set parameters giving ``h' = (1 - update) h + update tanh(gain x)``.

        This is the default fusion used by the pipeline in place of trained weights.
        """
        p = cls.zeros(channels)
        p.bz[:] = np.log(update / (1.0 - update))
        p.br[:] = 30.0
        for c in range(channels):
            p.wh[c, c, 1, 1] = gain
        return p

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, scale: float = 0.3) -> "GruParams":
        c = channels
        return cls(*(scale * rng.standard_normal((c, 2 * c, 3, 3)) if n.startswith("w")
                     else scale * rng.standard_normal(c) for n in PARAM_NAMES))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_vector(cls, vec: np.ndarray, channels: int) -> "GruParams":
        c = channels
        shapes = [(c, 2 * c, 3, 3) if n.startswith("w") else (c,) for n in PARAM_NAMES]
        if len(vec) != sum(int(np.prod(s)) for s in shapes):
            raise ShapeMismatch(f"vector of length {len(vec)} does not fit C={c}")
        out, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(np.asarray(vec[pos:pos + n]).reshape(s))
            pos += n
        return cls(*out)

    def to_bytes(self) -> bytes:
        """``<u32 header length><JSON shape header><little-endian float64 blob>``."""
        header = json.dumps({
            "dtype": "<f8",
            "arrays": [{"name": n, "shape": list(getattr(self, n).shape)} for n in PARAM_NAMES],
        }, separators=(",", ":")).encode()
        blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays())
        return struct.pack("<I", len(header)) + header + blob

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GruParams":
        (n,) = struct.unpack_from("<I", raw, 0)
        header = json.loads(raw[4:4 + n].decode())
        if header.get("dtype") != "<f8":
            raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
        pos = 4 + n
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
        if pos != len(raw):
            raise ValueError("trailing bytes after GRU parameter blob")
        return cls(**arrays)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GruParams":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class PoseEmbedding:
    xy: PlaneFeature
    xz: PlaneFeature
    yz: PlaneFeature
    anchor: np.ndarray

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64).reshape(3)
        if not (self.xy.data.shape == self.xz.data.shape == self.yz.data.shape):
            raise ShapeMismatch("embedding planes must share extent and channels")

    @property
    def planes(self) -> tuple[PlaneFeature, PlaneFeature, PlaneFeature]:
        return self.xy, self.xz, self.yz

    @property
    def pitch(self) -> float:
        return self.xy.pitch

    def heatmaps(self) -> PlaneHeatmaps:
        return PlaneHeatmaps(self.xy.data, self.xz.data, self.yz.data)

    @classmethod
    def from_arrays(cls, xy, xz, yz, anchor, pitch: float) -> "PoseEmbedding":
        anchor = np.asarray(anchor, dtype=np.float64)
        return cls(PlaneFeature("xy", xy, anchor, pitch), PlaneFeature("xz", xz, anchor, pitch),
                   PlaneFeature("yz", yz, anchor, pitch), anchor)

    def zeros_like(self) -> "PoseEmbedding":
        z = np.zeros_like(self.xy.data)
        return PoseEmbedding.from_arrays(z, z, z, self.anchor, self.pitch)

    def decode(self, temperature: float = hm.DEFAULT_TEMPERATURE, pid: int | None = None) -> Pose3D:
        return decode_planes(self.heatmaps(), self.anchor, self.pitch, temperature, pid=pid)


@dataclass
class TemporalState:
    """Per-track recurrent memory.

    ``last_anchor`` is the world point the hidden planes are registered to.
    """

    hidden: PoseEmbedding
    last_anchor: np.ndarray
    age: int = 0

    def __post_init__(self):
        self.last_anchor = np.asarray(self.last_anchor, dtype=np.float64).reshape(3)


# ---------------------------------------------------------------------------
# convolution primitives, (..., rows, cols, channels) layout

_TAPS = tuple((dy, dx) for dy in range(3) for dx in range(3))


def _pad(x: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    return np.pad(x, pad)


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with zero padding; ``w`` is ``(out, in, 3, 3)``.

    Leading axes of ``x`` beyond ``(rows, cols, in)`` are treated as a batch.
    Kernel taps that are entirely zero are skipped, which is exact.
    """
    R, C, cin = x.shape[-3:]
    cout = w.shape[0]
    out = np.empty(x.shape[:-1] + (cout,))
    out[...] = b
    flat = out.reshape(-1, cout)
    live = [(dy, dx) for dy, dx in _TAPS if np.any(w[:, :, dy, dx])]
    if live == [(1, 1)]:
        # pointwise kernel: no padding needed
        flat += x.reshape(-1, cin) @ w[:, :, 1, 1].T
    elif live:
        xp = _pad(x)
        for dy, dx in live:
            flat += xp[..., dy:dy + R, dx:dx + C, :].reshape(-1, cin) @ w[:, :, dy, dx].T
    return out


def conv3x3_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    """Gradients ``(dx, dw, db)`` of :func:`conv3x3`, summed over any batch axes."""
    R, C, cin = x.shape[-3:]
    cout = w.shape[0]
    xp = _pad(x)
    g = dout.reshape(-1, cout)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for dy, dx in _TAPS:
        dw[:, :, dy, dx] = g.T @ xp[..., dy:dy + R, dx:dx + C, :].reshape(-1, cin)
        if np.any(w[:, :, dy, dx]):
            dxp[..., dy:dy + R, dx:dx + C, :] += (g @ w[:, :, dy, dx]).reshape(x.shape)
    return dxp[..., 1:-1, 1:-1, :], dw, g.sum(axis=0)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _data(v):
    return v.data if isinstance(v, PlaneFeature) else np.asarray(v, dtype=np.float64)


def _forward(p: GruParams, x: np.ndarray, h: np.ndarray):
    if x.shape != h.shape:
        raise ShapeMismatch(f"input {x.shape} and hidden {h.shape} differ")
    if x.ndim < 3 or x.shape[-1] != p.channels:
        raise ShapeMismatch(f"expected (rows, cols, {p.channels}) planes, got {x.shape}")
    C = p.channels
    xh = np.concatenate([x, h], axis=-1)
    # z and r read the same input, so one convolution computes both
    zr = _sigmoid(conv3x3(xh, np.concatenate([p.wz, p.wr]), np.concatenate([p.bz, p.br])))
    z, r = zr[..., :C], zr[..., C:]
    xrh = np.concatenate([x, r * h], axis=-1)
    hc = np.tanh(conv3x3(xrh, p.wh, p.bh))
    out = (1.0 - z) * h + z * hc
    return out, (xh, z, r, xrh, hc)


def gru_cell_forward(p: GruParams, x, h):
    """One spatial GRU step.  Accepts and returns either arrays or :class:`PlaneFeature`."""
    out, _ = _forward(p, _data(x), _data(h))
    if isinstance(h, PlaneFeature):
        return h.with_data(out)
    return out


def gru_cell_backward(p: GruParams, x, h, grad_out) -> tuple[GruParams, np.ndarray, np.ndarray]:
    """Reverse-mode gradients of one GRU step.

    Returns ``(dparams, dx, dh)`` where ``dparams`` is a :class:`GruParams`
    holding the parameter gradients.
    """
    x, h, g = _data(x), _data(h), _data(grad_out)
    _, (xh, z, r, xrh, hc) = _forward(p, x, h)
    if g.shape != h.shape:
        raise ShapeMismatch(f"upstream gradient {g.shape} does not match hidden {h.shape}")
    C = p.channels
    dz = g * (hc - h)
    dhc = g * z
    dh = g * (1.0 - z)
    da_h = dhc * (1.0 - hc * hc)
    dxrh, dwh, dbh = conv3x3_backward(xrh, p.wh, da_h)
    dx = dxrh[..., :C].copy()
    drh = dxrh[..., C:]
    dh += drh * r
    da_r = drh * h * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    dxh_z, dwz, dbz = conv3x3_backward(xh, p.wz, da_z)
    dxh_r, dwr, dbr = conv3x3_backward(xh, p.wr, da_r)
    dxh = dxh_z + dxh_r
    dx += dxh[..., :C]
    dh += dxh[..., C:]
    return GruParams(dwz, dbz, dwr, dbr, dwh, dbh), dx, dh


# ---------------------------------------------------------------------------
# fusion over time


def initial_state(obs: PoseEmbedding) -> TemporalState:
    """Zero hidden state registered at the observation's anchor."""
    return TemporalState(obs.zeros_like(), obs.anchor.copy(), 0)


def propagate(state: TemporalState, displacement) -> TemporalState:
    """Move the hidden state's registration point by ``displacement`` mm.

    The pipeline calls this with the track's predicted motion between
    frames, so the warp in :func:`temporal_fuse` only has to absorb the
    difference between predicted and observed cube centres.
    """
    return replace(state, last_anchor=state.last_anchor + np.asarray(displacement, dtype=np.float64))


def warp_embedding(emb: PoseEmbedding, displacement) -> PoseEmbedding:
    """Re-express ``emb`` in a cube whose centre is ``displacement`` mm away.

    World-fixed content therefore moves by ``-displacement`` inside the planes.
    """
    d = np.asarray(displacement, dtype=np.float64)
    planes = [warp_plane(pl, -d[list(axes)]) for pl, axes in zip(emb.planes, PLANE_WORLD_AXES)]
    for pl in planes:
        pl.world_anchor = emb.anchor + d
    return PoseEmbedding(*planes, emb.anchor + d)


def temporal_fuse(state: TemporalState | None, obs: PoseEmbedding, params: GruParams,
                  warp: bool = True) -> tuple[PoseEmbedding, TemporalState]:
    """Fuse an observation with the warped hidden state; returns the fused embedding and new state."""
    if state is None:
        state = initial_state(obs)
    if not (np.all(np.isfinite(obs.anchor)) and np.all(np.isfinite(state.last_anchor))):
        raise ValueError("anchors must be finite")
    hidden = state.hidden
    if warp:
        d = obs.anchor - state.last_anchor
        if np.any(d != 0):
            hidden = warp_embedding(hidden, d)
    # the three planes share one extent, so they go through the cell as a batch
    x = np.stack([o.data for o in obs.planes])
    h = np.stack([hd.data for hd in hidden.planes])
    fused = gru_cell_forward(params, x, h)
    emb = PoseEmbedding.from_arrays(*fused, obs.anchor, obs.pitch)
    return emb, TemporalState(emb, obs.anchor.copy(), state.age + 1)


def forecast(state: TemporalState, params: GruParams, steps: int, velocity=(0.0, 0.0, 0.0),
             stride: int = 3) -> list[PoseEmbedding]:
    """Roll the GRU forward ``steps`` times with zero input.

    Future step ``k`` is ``k * stride`` frames ahead; its anchor moves from
    ``state.last_anchor`` at constant ``velocity`` (mm per frame).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    velocity = np.asarray(velocity, dtype=np.float64).reshape(3)
    h = np.stack([pl.data for pl in state.hidden.planes])
    zero = np.zeros_like(h)
    out = []
    for k in range(1, steps + 1):
        h = gru_cell_forward(params, zero, h)
        anchor = state.last_anchor + velocity * (k * stride)
        out.append(PoseEmbedding.from_arrays(*h, anchor, state.hidden.pitch))
    return out


def forecast_horizon_seconds(steps: int, stride: int, fps: float) -> float:
    return steps * stride / fps


def pose_sequence_loss(pred: Sequence[Sequence[tuple]], gt: Sequence[Sequence[tuple]]) -> float:
    """Per-timestep supervision over a clip.

    ``pred[t][i]`` is ``(current, future)`` for person ``i`` at step ``t``,
    each a ``(Pose3D, PlaneHeatmaps)`` pair (``future`` may be ``None``);
    ``gt[t][i]`` is the ground-truth pair.  The future prediction made at
    ``t`` is scored against ``gt[t + 1][i]`` when that step exists.
    """
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted steps vs {len(gt)} ground-truth steps")
    total = 0.0
    for t, (pt, gtt) in enumerate(zip(pred, gt)):
        if len(pt) != len(gtt):
            raise LengthMismatch(f"step {t}: {len(pt)} predicted people vs {len(gtt)}")
        for i, (current, future) in enumerate(pt):
            total += pose_loss(current, gtt[i])
            if future is not None and t + 1 < len(gt):
                total += pose_loss(future, gt[t + 1][i])
    return total


# ---------------------------------------------------------------------------
# single-step fitting


@dataclass
class FitSample:
    """One training step: observation, fixed hidden state and targets for now and ``stride`` frames ahead."""

    obs: list[np.ndarray]          # three (n, n, C) planes
    hidden: list[np.ndarray]
    anchor: np.ndarray
    target: tuple[Pose3D, PlaneHeatmaps]
    future_anchor: np.ndarray | None = None
    future_target: tuple[Pose3D, PlaneHeatmaps] | None = None


@dataclass
class FitResult:
    params: GruParams
    losses: list[float] = field(default_factory=list)


def _loss_and_grad(params: GruParams, samples: Sequence[FitSample], pitch: float, temperature: float):
    grad = np.zeros_like(params.to_vector())
    total = 0.0
    C = params.channels
    for s in samples:
        outs = [gru_cell_forward(params, x, h) for x, h in zip(s.obs, s.hidden)]
        g_out = [np.zeros_like(o) for o in outs]
        terms = [(outs, s.anchor, s.target, g_out)]
        fut = None
        if s.future_target is not None:
            fut = [gru_cell_forward(params, np.zeros_like(o), o) for o in outs]
            g_fut = [np.zeros_like(o) for o in fut]
            terms.append((fut, s.future_anchor, s.future_target, g_fut))
        for planes, anchor, (gpose, gplanes), g in terms:
            ph = PlaneHeatmaps(*planes)
            pose = decode_planes(ph, anchor, pitch, temperature)
            total += pose_loss((pose, ph), (gpose, gplanes))
            gj = np.sign(pose.joints - gpose.joints)
            dplanes = decode_planes_backward(ph, pitch, gj, temperature)
            for k, (a, b, d) in enumerate(zip(ph.as_tuple(), gplanes.as_tuple(), dplanes.as_tuple())):
                g[k] += 2.0 * (a - b) / a.size + d
        if fut is not None:
            for k in range(3):
                dp, _, dh = gru_cell_backward(params, np.zeros_like(outs[k]), outs[k], g_fut[k])
                grad += dp.to_vector()
                g_out[k] += dh
        for k in range(3):
            dp, _, _ = gru_cell_backward(params, s.obs[k], s.hidden[k], g_out[k])
            grad += dp.to_vector()
    return total, GruParams.from_vector(grad, C)


def fit_gru(params: GruParams, samples: Sequence[FitSample], pitch: float, iterations: int = 500,
            learning_rate: float = 1e-3, temperature: float = hm.DEFAULT_TEMPERATURE) -> FitResult:
    """Plain gradient descent on the summed per-timestep loss of single GRU steps."""
    vec = params.to_vector()
    C = params.channels
    losses = []
    for _ in range(iterations):
        p = GruParams.from_vector(vec, C)
        loss, grad = _loss_and_grad(p, samples, pitch, temperature)
        losses.append(loss)
        vec = vec - learning_rate * grad.to_vector()
    p = GruParams.from_vector(vec, C)
    losses.append(_loss_and_grad(p, samples, pitch, temperature)[0])
    return FitResult(p, losses)
