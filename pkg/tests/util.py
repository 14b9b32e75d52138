"""Shared test helpers: random rigid transforms and hand-built tracks."""

import numpy as np

from tracklift.geometry import CameraPose
from tracklift.tracks import Track3D, make_track3d


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR with positive diagonal."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rot_y(deg: float) -> np.ndarray:
    a = np.radians(deg)
    return np.array([
        [np.cos(a), 0.0, np.sin(a)],
        [0.0, 1.0, 0.0],
        [-np.sin(a), 0.0, np.cos(a)],
    ])


def rot_x(deg: float) -> np.ndarray:
    a = np.radians(deg)
    return np.array([
        [1.0, 0.0, 0.0],
        [0.0, np.cos(a), -np.sin(a)],
        [0.0, np.sin(a), np.cos(a)],
    ])


def random_track(rng: np.random.Generator, n_frames: int = 24, track_id: int = 0,
                 visible_prob: float = 1.0, center_spread: float = 0.3) -> Track3D:
    """A track with random points, moving cameras, and optional visibility gaps."""
    need = min(3, n_frames)
    while True:
        visible = rng.random(n_frames) < visible_prob
        if visible.sum() >= need:
            break
    centers = rng.normal(scale=center_spread, size=(n_frames, 3))
    points = rng.normal(size=(n_frames, 3)) + np.array([0.0, 0.0, 4.0])
    return make_track3d(track_id, points, visible, centers)


def jittered_ray_track(rng: np.random.Generator, true_points: np.ndarray,
                       camera_centers: np.ndarray, jitter_std: float,
                       track_id: int = 0) -> Track3D:
    """Noisy observation of a true trajectory: each point displaced along the
    camera ray through the true point, mimicking per-frame depth error."""
    n = true_points.shape[0]
    dirs = true_points - camera_centers
    dist = np.linalg.norm(dirs, axis=1)
    dirs = dirs / dist[:, None]
    noisy = true_points + rng.normal(0.0, jitter_std, n)[:, None] * dirs
    return make_track3d(track_id, noisy, np.ones(n, dtype=bool), camera_centers)


def straight_pose(frame_index: int, position) -> CameraPose:
    return CameraPose(frame_index, np.asarray(position, dtype=np.float64), np.eye(3))
