"""Per-track ray-offset denoising.

Per-frame stereo depth gives 3D tracks high-frequency jitter along the camera
rays. Each track gets one scalar offset per visible frame, moving the point
along its ray; the offsets minimize a blend of two objectives gated by the
track's apparent image-space motion:

  * static objective - visible points should coincide in world space,
  * dynamic objective - acceleration along the ray should be small,

plus a disparity-space regularizer that anchors points to the measured depth,
tolerating larger metric deviations far from the camera. Optimization is
plain Adam over the offsets with an analytic gradient; the static-objective
normalizer is refreshed every step but excluded from differentiation (letting
it vary inside the gradient would reward shrinking the whole track toward
the origin).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, CameraPose, project_points_multi
from .tracks import Track3D


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    steps: int = 100
    lambda_reg: float = 1e-4
    windows: tuple[int, ...] = (1, 3, 5)
    trail_window: int = 16
    m0: float = 20.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    depth_floor_frac: float = 0.01  # adjusted depth stays >= this fraction of original

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.windows:
            raise ValueError("windows must be nonempty")
        if self.trail_window < 1:
            raise ValueError("trail_window must be >= 1")


@dataclass
class OffsetVector:
    """Scalar along-ray offsets, one per visible frame of a track."""

    frame_indices: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if self.frame_indices.shape != self.deltas.shape:
            raise ValueError("frame_indices and deltas must align")
        if not np.all(np.isfinite(self.deltas)):
            raise ValueError("deltas must be finite")


@dataclass
class MotionMagnitude:
    """Apparent motion of a track: image-space trail lengths and their high
    percentile. `empty` marks tracks where no trail could be measured."""

    magnitude: float
    trail_lengths: np.ndarray  # per frame, NaN where undefined
    empty: bool = False


def sigma_gate(m: float, m0: float = 20.0) -> float:
    """Blend weight between the static and dynamic objectives.

    1 / (1 + exp(m - m0)): near 1 for slow tracks, 0.5 at m0, saturating to 0
    for fast ones. Evaluated on the side that cannot overflow.
    """
    if m < 0:
        raise ValueError("motion magnitude must be >= 0")
    x = m0 - m
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def nearest_rank_percentile(values: np.ndarray, pct: float) -> float:
    """Order-statistic percentile without interpolation (ceil(p*n)-th value)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of empty set")
    k = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[k - 1])


def trail_motion_magnitude(track: Track3D, poses: list[CameraPose],
                           model: CameraModel, w_o: int = 16) -> MotionMagnitude:
    """Image-space trail length per frame and its 90th percentile.

    The trail at frame i is the largest pixel distance between the point at i
    and the point at any of the w_o preceding visible frames, all projected
    through frame i's camera - so camera motion alone contributes nothing.
    """
    n = track.n_frames
    pose_map = {p.frame_index: p for p in poses}
    rot = np.zeros((n, 3, 3))
    cen = np.zeros((n, 3))
    for i in np.flatnonzero(track.visible):
        pose = pose_map.get(i)
        if pose is None:
            raise ValueError(f"no pose for visible frame {i}")
        rot[i] = pose.orientation
        cen[i] = pose.position

    vis = track.visible
    idx = np.flatnonzero(vis)
    proj_self = np.full((n, 2), np.nan)
    if idx.size:
        uv, ok = project_points_multi(track.points[idx], rot[idx], cen[idx], model)
        proj_self[idx[ok]] = uv[ok]

    best = np.full(n, np.nan)
    for w in range(1, w_o + 1):
        cur = idx[idx >= w]
        cur = cur[vis[cur - w]]
        if cur.size == 0:
            continue
        uv_past, ok = project_points_multi(track.points[cur - w], rot[cur], cen[cur], model)
        ok &= np.all(np.isfinite(proj_self[cur]), axis=1)
        if not ok.any():
            continue
        cur, uv_past = cur[ok], uv_past[ok]
        d = np.hypot(*(proj_self[cur] - uv_past).T)
        best[cur] = np.where(np.isnan(best[cur]), d, np.maximum(best[cur], d))

    defined = best[np.isfinite(best)]
    if defined.size == 0:
        return MotionMagnitude(0.0, best, empty=True)
    return MotionMagnitude(nearest_rank_percentile(defined, 90.0), best)


# --- internal per-track problem -------------------------------------------------

class _TrackProblem:
    """Visible-frame views of a track plus precomputed index structure for the
    windowed ray-acceleration terms."""

    def __init__(self, track: Track3D, windows: tuple[int, ...]):
        vis_frames = np.flatnonzero(track.visible)
        if vis_frames.size < 2:
            raise ValueError("need at least 2 visible frames")
        self.frames = vis_frames
        self.m = vis_frames.size
        self.pts = track.points[vis_frames]
        self.rays = track.rays[vis_frames]
        diff = self.pts - track.camera_centers[vis_frames]
        self.dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        self.inv_d = 1.0 / self.dists

        n = track.n_frames
        slot = np.full(n, -1, dtype=np.int64)
        slot[vis_frames] = np.arange(self.m)
        ims, i0s, ips = [], [], []
        for w in windows:
            lo = vis_frames - w
            hi = vis_frames + w
            ok = (lo >= 0) & (hi < n)
            ok[ok] &= track.visible[lo[ok]] & track.visible[hi[ok]]
            ims.append(slot[lo[ok]])
            i0s.append(slot[vis_frames[ok]])
            ips.append(slot[hi[ok]])
        self.idx_m = np.concatenate(ims) if ims else np.zeros(0, dtype=np.int64)
        self.idx_0 = np.concatenate(i0s) if i0s else np.zeros(0, dtype=np.int64)
        self.idx_p = np.concatenate(ips) if ips else np.zeros(0, dtype=np.int64)
        r0 = self.rays[self.idx_0]
        self.r0 = r0
        self.dot_m = np.einsum("ij,ij->i", self.rays[self.idx_m], r0)
        self.dot_0 = np.einsum("ij,ij->i", r0, r0)
        self.dot_p = np.einsum("ij,ij->i", self.rays[self.idx_p], r0)

    def adjusted(self, deltas: np.ndarray) -> np.ndarray:
        return self.pts + deltas[:, None] * self.rays

    def normalizer(self, p: np.ndarray) -> float:
        s = np.sqrt(np.einsum("ij,ij->i", p, p)).sum() / self.m
        if s <= 0.0:
            raise ValueError("degenerate static-loss normalizer (all points at origin)")
        return s

    def static_parts(self, p: np.ndarray, s: float):
        mu = p.mean(axis=0)
        q = p - mu
        loss = 2.0 * self.m * np.einsum("ij,ij->", q, q) / (s * s)
        grad = (4.0 * self.m / (s * s)) * np.einsum("ij,ij->i", q, self.rays)
        return loss, grad

    def dynamic_parts(self, p: np.ndarray):
        if self.idx_0.size == 0:
            return 0.0, np.zeros(self.m)
        lap = p[self.idx_p] - 2.0 * p[self.idx_0] + p[self.idx_m]
        a = np.einsum("ij,ij->i", lap, self.r0)
        loss = float(a @ a)
        w2 = 2.0 * a
        grad = (
            np.bincount(self.idx_p, weights=w2 * self.dot_p, minlength=self.m)
            + np.bincount(self.idx_m, weights=w2 * self.dot_m, minlength=self.m)
            - 2.0 * np.bincount(self.idx_0, weights=w2 * self.dot_0, minlength=self.m)
        )
        return loss, grad

    def reg_parts(self, deltas: np.ndarray, lam: float):
        t = deltas + self.dists
        if np.any(t <= 0.0):
            raise ValueError("offset at or below the ray singularity")
        invt = 1.0 / t
        g = invt - self.inv_d
        loss = lam * float(g @ g)
        grad = (-2.0 * lam) * g * invt * invt
        return loss, grad

    def eval(self, deltas: np.ndarray, sigma: float, lam: float,
             norm_const: float | None = None):
        """Objective and gradient. The normalizer is taken at the current
        deltas unless frozen via norm_const; it is never differentiated."""
        p = self.adjusted(deltas)
        s = self.normalizer(p) if norm_const is None else norm_const
        ls, gs = self.static_parts(p, s)
        ld, gd = self.dynamic_parts(p)
        lr_, gr = self.reg_parts(deltas, lam)
        obj = sigma * ls + (1.0 - sigma) * ld + lr_
        grad = sigma * gs + (1.0 - sigma) * gd + gr
        return obj, grad


def _deltas_for(track: Track3D, deltas) -> np.ndarray:
    m = int(track.visible.sum())
    if isinstance(deltas, OffsetVector):
        arr = deltas.deltas
    elif deltas is None:
        arr = np.zeros(m)
    else:
        arr = np.asarray(deltas, dtype=np.float64)
    if arr.shape != (m,):
        raise ValueError(f"expected {m} offsets (one per visible frame), got {arr.shape}")
    return arr


def static_loss(track: Track3D, deltas=None) -> float:
    """World-space spread of the adjusted points: the full pairwise
    squared-distance sum over visible frames, divided by the squared mean
    point norm. Computed through the O(N) centroid identity."""
    prob = _TrackProblem(track, windows=())
    d = _deltas_for(track, deltas)
    p = prob.adjusted(d)
    loss, _ = prob.static_parts(p, prob.normalizer(p))
    return float(loss)


def dynamic_loss(track: Track3D, deltas=None, windows: tuple[int, ...] = (1, 3, 5)) -> float:
    """Squared acceleration along the ray, summed over window sizes. A term
    enters only when all three participating frames are visible."""
    prob = _TrackProblem(track, windows=tuple(windows))
    d = _deltas_for(track, deltas)
    loss, _ = prob.dynamic_parts(prob.adjusted(d))
    return float(loss)


def reg_loss(track: Track3D, deltas=None, lambda_reg: float = 1e-4) -> float:
    """Penalty on offset-induced displacement in disparity (inverse-distance)
    space; distant points are allowed larger metric deviations."""
    vis = np.flatnonzero(track.visible)
    d = _deltas_for(track, deltas)
    diff = track.points[vis] - track.camera_centers[vis]
    dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    t = d + dists
    if np.any(t <= 0.0):
        raise ValueError("offset at or below the ray singularity")
    g = 1.0 / t - 1.0 / dists
    return float(lambda_reg * (g @ g))


def objective(track: Track3D, deltas, m: float, cfg: OptimizerConfig = OptimizerConfig(),
              norm_const: float | None = None) -> float:
    """Full gated objective; pass norm_const to freeze the static normalizer
    (finite-difference checks must differentiate the same function the
    analytic gradient does)."""
    prob = _TrackProblem(track, cfg.windows)
    d = _deltas_for(track, deltas)
    sig = sigma_gate(m, cfg.m0)
    obj, _ = prob.eval(d, sig, cfg.lambda_reg, norm_const)
    return float(obj)


def analytic_gradient(track: Track3D, deltas, m: float,
                      cfg: OptimizerConfig = OptimizerConfig()) -> np.ndarray:
    """Gradient of the gated objective w.r.t. each per-frame offset."""
    prob = _TrackProblem(track, cfg.windows)
    d = _deltas_for(track, deltas)
    sig = sigma_gate(m, cfg.m0)
    _, grad = prob.eval(d, sig, cfg.lambda_reg)
    return grad


@dataclass
class OptimizeResult:
    offsets: OffsetVector
    track: Track3D
    trace: np.ndarray = field(repr=False)
    sigma: float = 0.0
    improved: bool = True  # False if the final step had to fall back to the best iterate


def optimize_track(track: Track3D, m: MotionMagnitude | float,
                   cfg: OptimizerConfig = OptimizerConfig()) -> OptimizeResult:
    """Minimize the gated objective over per-frame ray offsets with Adam.

    Offsets start at zero and are clamped after every step so the adjusted
    depth keeps at least `depth_floor_frac` of the original. If the last
    iterate is worse than the start, the best-seen iterate is returned and
    the result is flagged.
    """
    mag = m.magnitude if isinstance(m, MotionMagnitude) else float(m)
    sig = sigma_gate(mag, cfg.m0)
    prob = _TrackProblem(track, cfg.windows)
    lam = cfg.lambda_reg
    lower = -(1.0 - cfg.depth_floor_frac) * prob.dists

    deltas = np.zeros(prob.m)
    m1 = np.zeros(prob.m)
    v1 = np.zeros(prob.m)
    trace = np.empty(cfg.steps + 1)

    obj, grad = prob.eval(deltas, sig, lam)
    trace[0] = obj
    best_obj = obj
    best = deltas.copy()
    initial = obj

    for step in range(1, cfg.steps + 1):
        m1 *= cfg.beta1
        m1 += (1.0 - cfg.beta1) * grad
        v1 *= cfg.beta2
        v1 += (1.0 - cfg.beta2) * (grad * grad)
        mhat = m1 / (1.0 - cfg.beta1**step)
        vhat = v1 / (1.0 - cfg.beta2**step)
        deltas -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        np.maximum(deltas, lower, out=deltas)

        obj, grad = prob.eval(deltas, sig, lam)
        trace[step] = obj
        if obj < best_obj:
            best_obj = obj
            best = deltas.copy()

    improved = obj <= initial
    if not improved:
        deltas = best
    adjusted = track.points.copy()
    adjusted[prob.frames] = prob.adjusted(deltas)
    return OptimizeResult(
        OffsetVector(prob.frames.copy(), deltas.copy()),
        track.with_points(adjusted),
        trace,
        sig,
        improved,
    )


def _optimize_one(args):
    track, mag, cfg = args
    return optimize_track(track, mag, cfg)


def optimize_tracks(tracks: list[Track3D], magnitudes, cfg: OptimizerConfig = OptimizerConfig(),
                    parallelism: int = 1) -> list[OptimizeResult]:
    """Optimize tracks independently, optionally across processes.

    Results come back in input order and are identical for any parallelism
    degree: each track's computation is self-contained.
    """
    mags = [mg.magnitude if isinstance(mg, MotionMagnitude) else float(mg) for mg in magnitudes]
    if len(mags) != len(tracks):
        raise ValueError("one magnitude per track required")
    jobs = [(t, mg, cfg) for t, mg in zip(tracks, mags)]
    if parallelism <= 1 or len(tracks) < 2:
        return [_optimize_one(j) for j in jobs]
    chunk = max(1, len(jobs) // (parallelism * 4))
    with ProcessPoolExecutor(max_workers=parallelism) as ex:
        return list(ex.map(_optimize_one, jobs, chunksize=chunk))
