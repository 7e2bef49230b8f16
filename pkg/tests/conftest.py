import numpy as np
import pytest

from volpose import simkit
from volpose.geometry import Camera, CameraRig, build_workspace


def simple_camera(id="c", position=(0.0, 0.0, 0.0), target=(0.0, 0.0, 1.0), focal=100.0, size=(64, 48)):
    return Camera.look_at(id, position, target, focal, size, up=(0.0, -1.0, 0.0))


def identity_camera(f=1000.0, c=500.0, size=(1000, 1000), id="cam"):
    K = np.array([[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]])
    return Camera(id, K, np.eye(3), np.zeros(3), size)


@pytest.fixture(scope="session")
def rig5():
    return simkit.default_rig()


@pytest.fixture(scope="session")
def grid5(rig5):
    return build_workspace(rig5)


@pytest.fixture(scope="session")
def three_people(rig5, grid5):
    cfg = simkit.SceneConfig(persons=3, frames=2, motion="constant-velocity")
    return simkit.generate_scene(cfg, rig5, grid5)


def corner_rig(n=4, half=3000.0, height=2500.0):
    spots = [(-half, -half), (half, half), (half, -half), (-half, half)][:n]
    cams = [Camera.look_at(f"k{i}", (x, y, height), (0.0, 0.0, 900.0), 300.0, (400, 300))
            for i, (x, y) in enumerate(spots)]
    return CameraRig(tuple(cams))


def frame_volume(scene, rig, grid, frame=0, **kw):
    from volpose.geometry import unproject_features

    views = simkit.render_views(scene, rig, frame, **kw)
    return views, unproject_features(views, rig, grid)


def translate_camera(cam, offset):
    # same camera moved rigidly by ``offset`` in world coordinates
    offset = np.asarray(offset, dtype=np.float64)
    return Camera(cam.id, cam.K, cam.R, cam.t - cam.R @ offset, cam.image_size)


def fit_track(steps=4, joints=(0, 1, 4), n=16, pitch=125.0, step_mm=180.0, seed=0):
    """Single-person walking clip as GRU fit samples.

    Sample ``t`` holds a noisy half-strength observation, the previous
    step's target as hidden state (not yet warped), and the next sample's
    target as its future target.
    """
    from volpose.posecube import Pose3D, render_plane_targets
    from volpose.temporal import FitSample

    rng = np.random.default_rng(seed)
    base = simkit.skeleton_pose((0.0, 0.0, simkit.ROOT_HEIGHT))[list(joints)]
    shift = np.array([step_mm, 0.0, 0.0])
    anchors = [np.array([0.0, 0.0, simkit.ROOT_HEIGHT]) + t * shift for t in range(steps)]
    truth = [base + t * shift for t in range(steps)]
    targets = [(Pose3D(j), render_plane_targets(Pose3D(j), a, pitch, n, sigma=1.5)) for j, a in zip(truth, anchors)]
    samples = []
    for t in range(steps):
        noisy = truth[t] + rng.normal(0.0, 20.0, truth[t].shape)
        obs = render_plane_targets(Pose3D(noisy), anchors[t], pitch, n, sigma=1.5)
        hid = render_plane_targets(Pose3D(truth[t] - shift), anchors[t], pitch, n, sigma=1.5)
        nxt = t + 1 < steps
        samples.append(FitSample([0.5 * a for a in obs.as_tuple()], list(hid.as_tuple()), anchors[t], targets[t],
                                 anchors[t + 1] if nxt else None, targets[t + 1] if nxt else None))
    return samples, targets, pitch


def rollout_predictions(params, samples, pitch):
    """``pred[t][0] = (current, future)`` pairs for :func:`pose_sequence_loss`."""
    from volpose.posecube import PlaneHeatmaps, decode_planes
    from volpose.temporal import gru_cell_forward

    pred = []
    for s in samples:
        cur = [gru_cell_forward(params, x, h) for x, h in zip(s.obs, s.hidden)]
        ph = PlaneHeatmaps(*cur)
        current = (decode_planes(ph, s.anchor, pitch), ph)
        future = None
        if s.future_target is not None:
            fut = PlaneHeatmaps(*[gru_cell_forward(params, np.zeros_like(c), c) for c in cur])
            future = (decode_planes(fut, s.future_anchor, pitch), fut)
        pred.append([(current, future)])
    return pred


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
