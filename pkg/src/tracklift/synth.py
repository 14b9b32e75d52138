"""Ground-truth scene generator for verification.

Parametric dynamic scenes (points on analytic motion paths, a parametric
camera) are rendered into the same artifacts the real pipeline ingests:
disparity grids, noisy 2D tracks, camera poses. Because the true 3D
trajectories are known exactly, every downstream stage can be checked
against an independent oracle. Randomness comes from a seeded Philox
(64-bit counter-based) generator, so identical specs give identical bundles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .depth import DisparityMap, DepthMap, disparity_to_depth
from .geometry import CameraModel, CameraPose, camera_to_pixel, look_at
from .optimize import dynamic_loss
from .tracks import Track2D, Track3D, lift_tracks

_PATCH_RADIUS = 3  # disparity written on a 2r x 2r neighborhood around each point


@dataclass
class MovingPoint:
    """A point on an analytic path; `motion` is linear, sinusoid or piecewise."""

    start: np.ndarray
    motion: str = "linear"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        if self.motion not in ("linear", "sinusoid", "piecewise"):
            raise ValueError(f"unknown motion kind {self.motion!r}")

    def position(self, t: float) -> np.ndarray:
        if self.motion == "linear":
            return self.start + np.asarray(self.params["velocity"]) * t
        if self.motion == "sinusoid":
            amp = np.asarray(self.params["amplitude"], dtype=np.float64)
            freq = float(self.params.get("freq_hz", 0.5))
            phase = float(self.params.get("phase", 0.0))
            return self.start + amp * math.sin(2.0 * math.pi * freq * t + phase)
        knots = np.asarray(self.params["times"], dtype=np.float64)
        pts = np.asarray(self.params["points"], dtype=np.float64)
        return self.start + np.array(
            [np.interp(t, knots, pts[:, k]) for k in range(3)]
        )


@dataclass
class CameraPath:
    """Parametric camera trajectory: static, linear, or orbit."""

    kind: str = "static"
    params: dict = field(default_factory=dict)

    def pose(self, frame_index: int, t: float) -> CameraPose:
        if self.kind == "static":
            pos = np.asarray(self.params.get("position", (0.0, 0.0, 0.0)), dtype=np.float64)
        elif self.kind == "linear":
            pos = np.asarray(self.params["start"], dtype=np.float64) + np.asarray(
                self.params["velocity"], dtype=np.float64
            ) * t
        elif self.kind == "orbit":
            center = np.asarray(self.params["center"], dtype=np.float64)
            radius = float(self.params["radius"])
            ang = math.radians(float(self.params.get("deg_per_s", 10.0))) * t
            pos = center + radius * np.array([math.sin(ang), 0.0, -math.cos(ang)])
        else:
            raise ValueError(f"unknown camera path kind {self.kind!r}")

        target = self.params.get("target")
        if target is not None:
            return look_at(pos, np.asarray(target, dtype=np.float64), frame_index)
        return CameraPose(frame_index, pos, np.eye(3))


@dataclass
class NoiseSpec:
    disparity_std_px: float = 0.0
    track_std_px: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.disparity_std_px < 0 or self.track_std_px < 0:
            raise ValueError("noise stds must be >= 0")


@dataclass
class SceneSpec:
    static_points: list = field(default_factory=list)
    moving_points: list = field(default_factory=list)
    camera: CameraPath = field(default_factory=CameraPath)
    n_frames: int = 150
    frame_rate: float = 30.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    model: CameraModel = field(default_factory=lambda: CameraModel.perspective(320, 320, 60.0))
    baseline_m: float = 0.063

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if self.model.kind != "perspective":
            raise ValueError("scenes render through a rectified perspective model")

    def to_dict(self) -> dict:
        return {
            "static_points": [list(map(float, p)) for p in self.static_points],
            "moving_points": [
                {"start": list(map(float, m.start)), "motion": m.motion, "params": m.params}
                for m in self.moving_points
            ],
            "camera": {"kind": self.camera.kind, "params": self.camera.params},
            "n_frames": self.n_frames,
            "frame_rate": self.frame_rate,
            "noise": {
                "disparity_std_px": self.noise.disparity_std_px,
                "track_std_px": self.noise.track_std_px,
                "seed": self.noise.seed,
            },
            "model": self.model.to_dict(),
            "baseline_m": self.baseline_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            static_points=[np.asarray(p, dtype=np.float64) for p in d.get("static_points", [])],
            moving_points=[
                MovingPoint(np.asarray(m["start"]), m["motion"], dict(m.get("params", {})))
                for m in d.get("moving_points", [])
            ],
            camera=CameraPath(d["camera"]["kind"], dict(d["camera"].get("params", {}))),
            n_frames=int(d["n_frames"]),
            frame_rate=float(d.get("frame_rate", 30.0)),
            noise=NoiseSpec(**d.get("noise", {})),
            model=CameraModel.from_dict(d["model"]),
            baseline_m=float(d.get("baseline_m", 0.063)),
        )


def save_scene_spec(path, spec: SceneSpec) -> None:
    with open(path, "w") as f:
        json.dump(spec.to_dict(), f, indent=1)


def load_scene_spec(path) -> SceneSpec:
    with open(path) as f:
        return SceneSpec.from_dict(json.load(f))


@dataclass
class GroundTruthBundle:
    """Everything the pipeline ingests for one clip, plus the exact truth."""

    spec: SceneSpec
    poses: list[CameraPose]
    model: CameraModel
    baseline_m: float
    true_points: np.ndarray  # (K, N, 3)
    true_visible: np.ndarray  # (K, N)
    kinds: list[str]  # per track: "static" or "dynamic"
    disparities: dict[int, DisparityMap]
    tracks2d: list[Track2D]

    @property
    def focal_px(self) -> float:
        return self.model.focal

    def depth_maps(self, max_depth_m: float = 20.0) -> dict[int, DepthMap]:
        return {
            i: disparity_to_depth(d, self.baseline_m, self.focal_px, max_depth_m)
            for i, d in self.disparities.items()
        }

    def lift(self, max_depth_m: float = 20.0) -> list[Track3D]:
        return lift_tracks(self.tracks2d, self.poses, self.depth_maps(max_depth_m), self.model)

    def true_track(self, track_id: int) -> np.ndarray:
        return self.true_points[track_id]


def render_scene(spec: SceneSpec) -> GroundTruthBundle:
    """Render a scene spec into poses, disparity grids, and noisy 2D tracks.

    Disparity is written analytically on a small neighborhood around each
    projected point (nearer points win overlaps); a point whose neighborhood
    got overwritten, left the frame, or fell behind the camera is invisible
    at that frame. Noise draws happen in a fixed per-frame order so the
    bundle is a pure function of the spec.
    """
    model = spec.model
    n = spec.n_frames
    statics = [np.asarray(p, dtype=np.float64) for p in spec.static_points]
    movers = list(spec.moving_points)
    k = len(statics) + len(movers)
    if k == 0:
        raise ValueError("scene has no points")
    kinds = ["static"] * len(statics) + ["dynamic"] * len(movers)

    rng = np.random.Generator(np.random.Philox(spec.noise.seed))
    h, w = model.height, model.width
    focal = model.focal
    r = _PATCH_RADIUS

    poses = []
    true_points = np.zeros((k, n, 3))
    true_visible = np.zeros((k, n), dtype=bool)
    noisy_uv = np.full((k, n, 2), np.nan)
    disparities = {}

    for i in range(n):
        t = i / spec.frame_rate
        pose = spec.camera.pose(i, t)
        poses.append(pose)
        for j, p in enumerate(statics):
            true_points[j, i] = p
        for j, mv in enumerate(movers):
            true_points[len(statics) + j, i] = mv.position(t)

        cam = pose.world_to_camera(true_points[:, i])
        z = cam[:, 2]
        uv, in_front = camera_to_pixel(cam, model)
        cand = in_front & (z > 0)
        ui, vi = uv[:, 0], uv[:, 1]
        with np.errstate(invalid="ignore"):
            fits = (ui >= r) & (ui <= w - 1 - r) & (vi >= r) & (vi <= h - 1 - r)
        cand &= np.where(np.isfinite(ui) & np.isfinite(vi), fits, False)

        grid = np.full((h, w), np.nan)
        disp = np.where(cand, spec.baseline_m * focal / np.where(z > 0, z, np.nan), np.nan)
        order = [j for j in np.argsort(disp, kind="stable") if cand[j]]
        for j in order:  # ascending disparity: nearer points overwrite farther
            x0 = int(math.floor(ui[j])) - r + 1
            y0 = int(math.floor(vi[j])) - r + 1
            grid[y0 : y0 + 2 * r, x0 : x0 + 2 * r] = disp[j]

        # a point is visible if its own disparity survived the overwrites
        for j in order:
            x, y = ui[j], vi[j]
            x0, y0 = int(math.floor(x)), int(math.floor(y))
            cell = grid[y0 : y0 + 2, x0 : x0 + 2]
            true_visible[j, i] = np.all(np.abs(cell - disp[j]) <= 1e-9 * disp[j])

        gnoise = rng.normal(0.0, 1.0, (h, w))
        if spec.noise.disparity_std_px > 0:
            grid = grid + spec.noise.disparity_std_px * gnoise
        tnoise = rng.normal(0.0, 1.0, (k, 2))
        pos = uv + spec.noise.track_std_px * tnoise
        noisy_uv[true_visible[:, i], i] = pos[true_visible[:, i]]

        disparities[i] = DisparityMap(grid, np.isfinite(grid), i)

    tracks2d = []
    for j in range(k):
        if true_visible[j].sum() < 2:
            continue
        qf = int(np.flatnonzero(true_visible[j])[0])
        tracks2d.append(Track2D(j, noisy_uv[j], true_visible[j], qf))

    return GroundTruthBundle(spec, poses, model, spec.baseline_m, true_points,
                             true_visible, kinds, disparities, tracks2d)


def standard_scene(n_static: int = 60, n_moving: int = 20, seed: int = 0,
                   n_frames: int = 150, disparity_std_px: float = 0.5,
                   track_std_px: float = 0.25) -> SceneSpec:
    """The standard verification scene: points spread over the image in the
    1-5 m depth band, sinusoidal movers, and a slowly translating camera."""
    model = CameraModel.perspective(320, 320, 60.0)
    camera = CameraPath("linear", {"start": [0.0, 0.0, 0.0], "velocity": [0.06, 0.0, 0.0]})
    rng = np.random.Generator(np.random.Philox(seed + 7_919))

    def spread(count, margin):
        # deterministic jittered grid of image positions
        side = int(math.ceil(math.sqrt(count)))
        us = np.linspace(margin, model.width - margin, side)
        vs = np.linspace(margin, model.height - margin, side)
        uu, vv = np.meshgrid(us, vs)
        pts = np.stack([uu.ravel(), vv.ravel()], axis=1)[:count]
        return pts + rng.uniform(-4.0, 4.0, pts.shape)

    def backproject(uv, depth):
        d = np.array([(uv[0] - model.width / 2) / model.focal,
                      (uv[1] - model.height / 2) / model.focal, 1.0])
        return d * depth

    statics = []
    for idx, uv in enumerate(spread(n_static, 40)):
        depth = 1.0 + 4.0 * ((idx * 0.37) % 1.0)
        statics.append(backproject(uv, depth))

    movers = []
    for idx, uv in enumerate(spread(n_moving, 60)):
        depth = 1.5 + 3.0 * ((idx * 0.41) % 1.0)
        start = backproject(uv, depth)
        axis = np.array([1.0, 0.0, 0.0]) if idx % 2 == 0 else np.array([0.6, 0.8, 0.0])
        movers.append(MovingPoint(
            start,
            "sinusoid",
            {
                "amplitude": list(0.05 * depth * axis),
                "freq_hz": 0.3 + 0.05 * (idx % 5),
                "phase": 0.4 * idx,
            },
        ))

    return SceneSpec(
        static_points=statics,
        moving_points=movers,
        camera=camera,
        n_frames=n_frames,
        noise=NoiseSpec(disparity_std_px, track_std_px, seed),
        model=model,
    )


def write_bundle(bundle: GroundTruthBundle, out_dir, clip_id: str = "synth",
                 variant: str = "fov60") -> str:
    """Write a bundle as a runnable clip: poses, rig, model, per-frame stereo
    flow grids, the 2D track table, the ground-truth 3D table, and a manifest.

    Returns the manifest path. Flow x carries the rendered disparity; flow y
    and the cycle error are zero, so the confidence checks pass wherever
    disparity was rendered.
    """
    import os

    from .depth import save_grid
    from .geometry import RigCalibration, save_camera_model, save_poses, save_rig
    from .tracks import make_track3d, save_tracks2d, save_tracks3d

    out = os.fspath(out_dir)
    os.makedirs(out, exist_ok=True)
    save_poses(os.path.join(out, "poses.json"), bundle.poses)
    save_rig(os.path.join(out, "rig.json"), RigCalibration.nominal(bundle.baseline_m))
    save_camera_model(os.path.join(out, "model.json"), bundle.model)
    save_scene_spec(os.path.join(out, "scene.json"), bundle.spec)

    n = bundle.spec.n_frames
    h, w = bundle.model.height, bundle.model.width
    zeros = np.zeros((h, w), dtype=np.float32)
    flow_entries = []
    for i in range(n):
        disp = bundle.disparities[i]
        names = {
            "x": f"flow_x_{i:04d}.grid",
            "y": f"flow_y_{i:04d}.grid",
            "cycle": f"flow_c_{i:04d}.grid",
        }
        save_grid(os.path.join(out, names["x"]), np.where(disp.valid, disp.disparity, np.nan), i)
        save_grid(os.path.join(out, names["y"]), zeros, i)
        save_grid(os.path.join(out, names["cycle"]), zeros, i)
        flow_entries.append(names)

    save_tracks2d(os.path.join(out, "tracks2d.trk"), bundle.tracks2d)

    pose_centers = np.stack([p.position for p in bundle.poses])
    truth = []
    for j in range(bundle.true_points.shape[0]):
        vis = bundle.true_visible[j]
        if vis.sum() < 1:
            continue
        centers = np.where(vis[:, None], pose_centers, 0.0)
        pts = np.where(vis[:, None], bundle.true_points[j], 0.0)
        truth.append(make_track3d(j, pts, vis, centers, int(np.flatnonzero(vis)[0])))
    save_tracks3d(os.path.join(out, "truth3d.trk"), truth)

    manifest = {
        "clip_id": clip_id,
        "frame_rate": bundle.spec.frame_rate,
        "frame_count": n,
        "poses": "poses.json",
        "rig": "rig.json",
        "variants": {
            variant: {
                "model": "model.json",
                "tracks": "tracks2d.trk",
                "flows": flow_entries,
            }
        },
    }
    manifest_path = os.path.join(out, "manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest_path


@dataclass
class ClassReport:
    n_tracks: int = 0
    pre_rmse: float = 0.0
    post_rmse: float = 0.0
    pre_std: float = 0.0  # static only: mean positional std
    post_std: float = 0.0
    pre_energy: float = 0.0  # dynamic only: mean ray-acceleration energy
    post_energy: float = 0.0
    rmse_decreased: int = 0
    energy_decreased: int = 0

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class DenoisingReport:
    static: ClassReport
    dynamic: ClassReport

    @property
    def static_jitter_ratio(self) -> float:
        return self.static.pre_std / self.post_jitter_floor()

    def post_jitter_floor(self, floor: float = 1e-12) -> float:
        return max(self.static.post_std, floor)

    def to_dict(self) -> dict:
        return {"static": self.static.to_dict(), "dynamic": self.dynamic.to_dict()}


def _positional_std(points: np.ndarray) -> float:
    mu = points.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((points - mu) ** 2, axis=1))))


def evaluate_denoising(bundle: GroundTruthBundle, optimized: list[Track3D],
                       pre: list[Track3D] | None = None) -> DenoisingReport:
    """Compare optimized tracks against the bundle's exact trajectories.

    `pre` defaults to the bundle's own lift of its noisy tracks. Tracks are
    aligned by id; an optimized track with no counterpart is an error.
    """
    if pre is None:
        pre = bundle.lift()
    pre_by_id = {t.track_id: t for t in pre}
    reports = {"static": ClassReport(), "dynamic": ClassReport()}
    sums: dict[str, dict[str, list[float]]] = {
        "static": {"pre_rmse": [], "post_rmse": [], "pre_std": [], "post_std": []},
        "dynamic": {"pre_rmse": [], "post_rmse": [], "pre_energy": [], "post_energy": []},
    }

    for opt in optimized:
        if opt.track_id >= bundle.true_points.shape[0] or opt.track_id not in pre_by_id:
            raise ValueError(f"track id {opt.track_id} has no ground-truth counterpart")
        before = pre_by_id[opt.track_id]
        truth = bundle.true_points[opt.track_id]
        kind = bundle.kinds[opt.track_id]
        rep = reports[kind]
        acc = sums[kind]
        rep.n_tracks += 1

        vis = opt.visible & bundle.true_visible[opt.track_id] & before.visible
        if not vis.any():
            raise ValueError(f"track {opt.track_id} shares no visible frames with truth")
        pre_rmse = float(np.sqrt(np.mean(np.sum((before.points[vis] - truth[vis]) ** 2, axis=1))))
        post_rmse = float(np.sqrt(np.mean(np.sum((opt.points[vis] - truth[vis]) ** 2, axis=1))))
        acc["pre_rmse"].append(pre_rmse)
        acc["post_rmse"].append(post_rmse)
        rep.rmse_decreased += post_rmse < pre_rmse

        if kind == "static":
            acc["pre_std"].append(_positional_std(before.points[before.visible]))
            acc["post_std"].append(_positional_std(opt.points[opt.visible]))
        else:
            e_pre = dynamic_loss(before)
            e_post = dynamic_loss(opt)
            acc["pre_energy"].append(e_pre)
            acc["post_energy"].append(e_post)
            rep.energy_decreased += e_post < e_pre

    for kind, rep in reports.items():
        for name, vals in sums[kind].items():
            if vals:
                setattr(rep, name, float(np.mean(vals)))
    return DenoisingReport(reports["static"], reports["dynamic"])
