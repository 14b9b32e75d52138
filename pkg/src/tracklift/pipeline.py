"""Clip orchestration: run the depth -> dedup -> lift -> optimize -> filter ->
export chain over manifests, with per-clip failure isolation, plus evaluation
metrics and point-cloud export.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .depth import (
    DepthMap,
    FlowThresholds,
    StereoFlowField,
    disparity_to_depth,
    flow_to_disparity,
    load_disparity_map,
    load_grid,
    reject_occlusion_boundaries,
)
from .filters import (
    DEFAULT_BANNED_CLASSES,
    ClipVerdict,
    LabelMap,
    MatchCountSeries,
    builtin_match_count,
    camera_static_test,
    clip_stats,
    detect_cross_fade,
    load_match_counts,
    prune_semantic_drift,
)
from .geometry import CameraModel, CameraPose, load_camera_model, load_poses, load_rig, project_points
from .optimize import OptimizerConfig, optimize_tracks, trail_motion_magnitude
from .tracks import (
    Track2D,
    Track3D,
    dedup_queries,
    lift_tracks,
    load_tracks2d,
    save_tracks3d,
    track_visibility_stats,
)

PARALLELISM_ENV = "TRACKLIFT_PARALLELISM"


# --- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class DepthConfig:
    max_depth_m: float = 20.0
    grad_threshold: float = 0.3
    vertical_thresh_px: float = 1.0
    cycle_thresh_px: float = 1.0


@dataclass(frozen=True)
class TrackConfig:
    dedup_radius_px: float = 1.0


@dataclass(frozen=True)
class FilterConfig:
    banned_classes: tuple[str, ...] = tuple(sorted(DEFAULT_BANNED_CLASSES))
    m_threshold: float = 20.0
    min_matches: int = 5
    match_gap_s: float = 5.0
    trans_thresh_m: float = 0.05
    rot_thresh_deg: float = 1.0
    trim_frac: float = 0.05
    static_image_trail_px: float = 1.0
    trail_stats_threshold_px: float = 50.0


@dataclass(frozen=True)
class PipelineConfig:
    depth: DepthConfig = DepthConfig()
    tracks: TrackConfig = TrackConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    filters: FilterConfig = FilterConfig()
    parallelism: int = 1
    export_ply: bool = False
    export_loss_traces: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        sections = {
            "depth": DepthConfig,
            "tracks": TrackConfig,
            "optimizer": OptimizerConfig,
            "filters": FilterConfig,
        }
        kwargs = {}
        for name, value in d.items():
            if name in sections:
                klass = sections[name]
                known = {f.name for f in fields(klass)}
                bad = set(value) - known
                if bad:
                    raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
                if name == "optimizer" and "windows" in value:
                    value = dict(value, windows=tuple(value["windows"]))
                if name == "filters" and "banned_classes" in value:
                    value = dict(value, banned_classes=tuple(value["banned_classes"]))
                kwargs[name] = klass(**value)
            elif name in ("parallelism", "export_ply", "export_loss_traces"):
                kwargs[name] = value
            else:
                raise ValueError(f"unknown config section or key: {name}")
        return cls(**kwargs)


def load_config(path) -> PipelineConfig:
    with open(path, "rb") as f:
        return PipelineConfig.from_dict(tomllib.load(f))


def default_parallelism() -> int:
    value = os.environ.get(PARALLELISM_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


# --- manifests -------------------------------------------------------------------

@dataclass
class VariantInputs:
    """Per-FoV-variant inputs; either stereo flow triples or ready disparities."""

    name: str
    model_path: str
    tracks_path: str
    flow_paths: list[dict] | None = None  # per frame: {"x", "y", "cycle"}
    disparity_paths: list[str] | None = None
    label_class_names: list[str] | None = None
    label_paths: dict[int, str] | None = None


@dataclass
class ClipManifest:
    clip_id: str
    frame_rate: float
    frame_count: int
    poses_path: str
    rig_path: str
    variants: list[VariantInputs]
    frame_start: int = 0
    source_frame_count: int | None = None
    match_counts_path: str | None = None
    frame_paths: list[str] | None = None

    def __post_init__(self):
        if not self.variants:
            raise ValueError("manifest needs at least one variant")
        for v in self.variants:
            per_frame = v.flow_paths if v.flow_paths is not None else v.disparity_paths
            if per_frame is None:
                raise ValueError(f"variant {v.name}: needs flows or disparities")
            if len(per_frame) != self.frame_count:
                raise ValueError(
                    f"variant {v.name}: {len(per_frame)} per-frame inputs for {self.frame_count} frames"
                )


def load_manifest(path) -> ClipManifest:
    base = Path(path).parent

    def resolve(p):
        return str(base / p)

    with open(path) as f:
        d = json.load(f)

    variants = []
    for name, v in d["variants"].items():
        labels = v.get("labels")
        variants.append(
            VariantInputs(
                name=name,
                model_path=resolve(v["model"]),
                tracks_path=resolve(v["tracks"]),
                flow_paths=[
                    {k: resolve(p) for k, p in triple.items()} for triple in v["flows"]
                ]
                if "flows" in v
                else None,
                disparity_paths=[resolve(p) for p in v["disparities"]]
                if "disparities" in v
                else None,
                label_class_names=labels["class_names"] if labels else None,
                label_paths={int(k): resolve(p) for k, p in labels["frames"].items()}
                if labels
                else None,
            )
        )
    return ClipManifest(
        clip_id=d["clip_id"],
        frame_rate=float(d["frame_rate"]),
        frame_count=int(d["frame_count"]),
        poses_path=resolve(d["poses"]),
        rig_path=resolve(d["rig"]),
        variants=variants,
        frame_start=int(d.get("frame_start", 0)),
        source_frame_count=d.get("source_frame_count"),
        match_counts_path=resolve(d["match_counts"]) if "match_counts" in d else None,
        frame_paths=[resolve(p) for p in d["frames"]] if "frames" in d else None,
    )


# --- per-clip run ----------------------------------------------------------------

@dataclass
class ClipResult:
    clip_id: str
    ok: bool
    stage_failed: str | None = None
    error: str | None = None
    verdict: ClipVerdict | None = None
    stats: dict = field(default_factory=dict)
    output_dir: str | None = None
    n_tracks: int = 0


def _project_track2d(track: Track3D, poses: list[CameraPose], model: CameraModel) -> Track2D | None:
    """Project a 3D track into a camera per frame, as a pseudo-2D track."""
    pose_map = {p.frame_index: p for p in poses}
    n = track.n_frames
    positions = np.full((n, 2), np.nan)
    visible = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(track.visible):
        pose = pose_map.get(i)
        if pose is None:
            continue
        uv, ok = project_points(track.points[i], pose, model)
        if ok[()] and np.all(np.isfinite(uv)):
            positions[i] = uv
            visible[i] = True
    if visible.sum() < 2:
        return None
    return Track2D(track.track_id, positions, visible, int(np.flatnonzero(visible)[0]))


def _union_dedup(tracks: list[Track3D], poses: list[CameraPose], model: CameraModel,
                 radius_px: float) -> list[Track3D]:
    """Cross-variant dedup: overlapping surface points appear in both FoV
    lifts, so project everything into the shared (widest) frame and reuse the
    query dedup there. Tracks that cannot be projected are kept."""
    by_id = {t.track_id: t for t in tracks}
    projected = []
    unprojectable = []
    for t in tracks:
        p2d = _project_track2d(t, poses, model)
        if p2d is None:
            unprojectable.append(t.track_id)
        else:
            projected.append(p2d)
    keep_ids = {t.track_id for t in dedup_queries(projected, radius_px)}
    keep_ids.update(unprojectable)
    return [t for t in tracks if t.track_id in keep_ids]


def _load_variant_depths(variant: VariantInputs, cfg: PipelineConfig,
                         baseline_m: float, focal_px: float) -> dict[int, DepthMap]:
    thresholds = FlowThresholds(cfg.depth.vertical_thresh_px, cfg.depth.cycle_thresh_px)
    depths = {}
    if variant.flow_paths is not None:
        for i, triple in enumerate(variant.flow_paths):
            fx, _ = load_grid(triple["x"])
            fy, _ = load_grid(triple["y"])
            cyc, _ = load_grid(triple["cycle"])
            flow = StereoFlowField(fx, fy, cyc, i)
            disp = flow_to_disparity(flow, thresholds)
            depths[i] = disparity_to_depth(disp, baseline_m, focal_px, cfg.depth.max_depth_m)
    else:
        for i, path in enumerate(variant.disparity_paths):
            disp = load_disparity_map(path)
            depths[i] = disparity_to_depth(disp, baseline_m, focal_px, cfg.depth.max_depth_m)
    return {i: reject_occlusion_boundaries(d, cfg.depth.grad_threshold) for i, d in depths.items()}


def _load_labels(variant: VariantInputs) -> dict[int, LabelMap] | None:
    if variant.label_paths is None:
        return None
    out = {}
    for frame, path in variant.label_paths.items():
        grid, _ = load_grid(path)
        ids = np.where(np.isfinite(grid), np.round(grid), -1).astype(np.int64)
        out[frame] = LabelMap(ids, variant.label_class_names or [], frame)
    return out


def _match_series(manifest: ClipManifest, cfg: PipelineConfig) -> MatchCountSeries | None:
    if manifest.match_counts_path is not None:
        return load_match_counts(manifest.match_counts_path)
    if manifest.frame_paths is None:
        return None
    gap = int(round(cfg.filters.match_gap_s * manifest.frame_rate))
    n = len(manifest.frame_paths)
    if gap < 1 or gap >= n:
        return None
    pairs = []
    counts = []
    for a in range(0, n - gap, gap):
        fa, _ = load_grid(manifest.frame_paths[a])
        fb, _ = load_grid(manifest.frame_paths[a + gap])
        pairs.append((a, a + gap))
        counts.append(builtin_match_count(fa, fb))
    if not pairs:
        return None
    return MatchCountSeries(pairs, counts, gap)


def run_clip(manifest: ClipManifest, cfg: PipelineConfig, out_dir) -> ClipResult:
    """Run every stage for one clip; any stage error fails only this clip."""
    clip_dir = Path(out_dir) / manifest.clip_id
    stage = "inputs"
    try:
        poses = load_poses(manifest.poses_path)
        rig = load_rig(manifest.rig_path)
        variant_models = {v.name: load_camera_model(v.model_path) for v in manifest.variants}

        stage = "depth"
        variant_depths = {}
        for v in manifest.variants:
            focal = variant_models[v.name].focal
            variant_depths[v.name] = _load_variant_depths(v, cfg, rig.baseline_m, focal)

        stage = "tracks"
        variant_tracks2d = {
            v.name: dedup_queries(load_tracks2d(v.tracks_path), cfg.tracks.dedup_radius_px)
            for v in manifest.variants
        }

        stage = "lift"
        union: list[Track3D] = []
        id_offset = 0
        for v in manifest.variants:
            lifted = lift_tracks(variant_tracks2d[v.name], poses, variant_depths[v.name],
                                 variant_models[v.name], variant=v.name)
            lifted = [t for t in lifted if t.n_visible >= 2]
            for t in lifted:
                t.track_id += id_offset
            union.extend(lifted)
            if lifted:
                id_offset = max(t.track_id for t in lifted) + 1
        if len(manifest.variants) > 1 and union:
            wide = max(variant_models.values(), key=lambda m: m.fov_h)
            union = _union_dedup(union, poses, wide, cfg.tracks.dedup_radius_px)
        if not union:
            raise ValueError("no usable tracks after lifting")

        stage = "magnitude"
        magnitudes = [
            trail_motion_magnitude(t, poses, variant_models[t.variant], cfg.optimizer.trail_window)
            for t in union
        ]

        stage = "optimize"
        results = optimize_tracks(union, magnitudes, cfg.optimizer, cfg.parallelism)
        optimized = [r.track for r in results]

        stage = "filters"
        kept = optimized
        kept_mags = magnitudes
        for v in manifest.variants:
            labels = _load_labels(v)
            if labels is None:
                continue
            subset = [
                (t, mg) for t, mg in zip(kept, kept_mags) if t.variant == v.name
            ]
            surviving_ids = {
                t.track_id
                for t in prune_semantic_drift(
                    [t for t, _ in subset], [mg for _, mg in subset], labels,
                    frozenset(cfg.filters.banned_classes), cfg.filters.m_threshold)
            }
            keep = [
                (t, mg) for t, mg in zip(kept, kept_mags)
                if t.variant != v.name or t.track_id in surviving_ids
            ]
            kept = [t for t, _ in keep]
            kept_mags = [mg for _, mg in keep]

        reasons = []
        if manifest.source_frame_count:
            lo = cfg.filters.trim_frac * manifest.source_frame_count
            hi = (1.0 - cfg.filters.trim_frac) * manifest.source_frame_count
            if manifest.frame_start < lo or manifest.frame_start + manifest.frame_count > hi:
                reasons.append("boundary_trim")
        static_cam = camera_static_test(poses, cfg.filters.trans_thresh_m, cfg.filters.rot_thresh_deg)
        series = _match_series(manifest, cfg)
        if series is not None and detect_cross_fade(series, static_cam, cfg.filters.min_matches):
            reasons.append("cross_fade")
        if (static_cam and kept_mags
                and all(mg.magnitude < cfg.filters.static_image_trail_px for mg in kept_mags)):
            reasons.append("static_image")
        verdict = ClipVerdict.from_reasons(reasons)

        stage = "stats"
        stats = {
            "clip": clip_stats(kept, kept_mags, poses, cfg.filters.trail_stats_threshold_px).to_dict(),
            "visibility": track_visibility_stats(kept).to_dict(),
            "counts": {
                "tracks_2d": {v.name: len(variant_tracks2d[v.name]) for v in manifest.variants},
                "lifted_union": len(union),
                "kept": len(kept),
            },
            "camera_static": static_cam,
        }

        stage = "export"
        clip_dir.mkdir(parents=True, exist_ok=True)
        if kept:
            save_tracks3d(clip_dir / "tracks3d.trk", kept)
        with open(clip_dir / "verdict.json", "w") as f:
            json.dump({"accepted": verdict.accepted, "reasons": verdict.reasons}, f, indent=1)
        with open(clip_dir / "stats.json", "w") as f:
            json.dump(stats, f, indent=1)
        with open(clip_dir / "magnitudes.csv", "w") as f:
            f.write("track_id,magnitude\n")
            for t, mg in zip(kept, kept_mags):
                f.write(f"{t.track_id},{mg.magnitude!r}\n")
        if cfg.export_loss_traces:
            trace_dir = clip_dir / "traces"
            trace_dir.mkdir(exist_ok=True)
            for r in results:
                with open(trace_dir / f"track_{r.track.track_id:06d}.csv", "w") as f:
                    f.write("step,objective\n")
                    for s, val in enumerate(r.trace):
                        f.write(f"{s},{val!r}\n")
        if cfg.export_ply and kept:
            frame = int(np.argmax(track_visibility_stats(kept).per_frame_density))
            export_pointcloud(kept, frame, clip_dir / f"points_f{frame:04d}.ply")
            export_trajectories(kept, clip_dir / "trajectories.ply")

        return ClipResult(manifest.clip_id, True, verdict=verdict, stats=stats,
                          output_dir=str(clip_dir), n_tracks=len(kept))
    except Exception as e:  # noqa: BLE001 - failures isolate to the clip
        return ClipResult(manifest.clip_id, False, stage_failed=stage, error=str(e))


def _run_one(args):
    manifest_path, cfg, out_dir = args
    try:
        manifest = load_manifest(manifest_path)
    except Exception as e:  # noqa: BLE001
        return ClipResult(str(manifest_path), False, stage_failed="manifest", error=str(e))
    return run_clip(manifest, cfg, out_dir)


def run_corpus(manifest_paths: list, cfg: PipelineConfig, out_dir,
               parallelism: int | None = None) -> list[ClipResult]:
    """Run many clips; clip-level parallelism, per-clip work kept serial.

    A machine-readable failure ledger lands in <out_dir>/failures.json.
    """
    if parallelism is None:
        parallelism = cfg.parallelism
    clip_cfg = replace(cfg, parallelism=1) if parallelism > 1 else cfg
    jobs = [(str(p), clip_cfg, str(out_dir)) for p in manifest_paths]
    if parallelism <= 1 or len(jobs) < 2:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            results = list(ex.map(_run_one, jobs))
    failures = {
        r.clip_id: {"stage": r.stage_failed, "error": r.error} for r in results if not r.ok
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "failures.json", "w") as f:
        json.dump(failures, f, indent=1)
    return results


# --- evaluation metrics ----------------------------------------------------------

def _nearest_rank_median(values: np.ndarray) -> float:
    v = np.sort(values)
    if v.size == 0:
        raise ValueError("median of empty set")
    return float(v[(v.size - 1) // 2])


def eval_metrics(pred: list[Track3D], truth: list[Track3D]) -> dict:
    """Scale-aligned 3D motion and depth metrics over id-matched tracks.

    Predictions are scaled by the nearest-rank median of per-point norm
    ratios (truth/pred), which makes every reported number invariant to a
    global rescaling of the predictions. Motion vectors run from each
    track's first commonly-visible frame to every later visible frame.
    """
    truth_by_id = {t.track_id: t for t in truth}
    pred_pts, truth_pts = [], []
    pred_motion, truth_motion = [], []
    pred_depth, truth_depth = [], []
    matched = False
    for p in pred:
        t = truth_by_id.get(p.track_id)
        if t is None:
            continue
        vis = p.visible & t.visible
        frames = np.flatnonzero(vis)
        if frames.size == 0:
            continue
        matched = True
        pred_pts.append(p.points[frames])
        truth_pts.append(t.points[frames])
        pred_depth.append(np.linalg.norm(p.points[frames] - p.camera_centers[frames], axis=1))
        truth_depth.append(np.linalg.norm(t.points[frames] - t.camera_centers[frames], axis=1))
        ref = frames[0]
        for f in frames[1:]:
            pred_motion.append(p.points[f] - p.points[ref])
            truth_motion.append(t.points[f] - t.points[ref])
    if not matched:
        raise ValueError("no track correspondences between pred and truth")

    pred_pts = np.concatenate(pred_pts)
    truth_pts = np.concatenate(truth_pts)
    pn = np.linalg.norm(pred_pts, axis=1)
    tn = np.linalg.norm(truth_pts, axis=1)
    ok = pn > 0
    if not ok.any():
        raise ValueError("cannot estimate scale: all predicted points at origin")
    scale = _nearest_rank_median(tn[ok] / pn[ok])

    out = {"scale": scale, "n_points": int(pred_pts.shape[0]),
           "n_motion_vectors": len(pred_motion)}
    if pred_motion:
        pm = scale * np.stack(pred_motion)
        tm = np.stack(truth_motion)
        err = np.linalg.norm(pm - tm, axis=1)
        out["epe3d"] = float(err.mean())
        out["delta_005"] = float(100.0 * np.mean(err <= 0.05))
        out["delta_010"] = float(100.0 * np.mean(err <= 0.10))
    else:
        out["epe3d"] = 0.0
        out["delta_005"] = 100.0
        out["delta_010"] = 100.0

    pd = scale * np.concatenate(pred_depth)
    td = np.concatenate(truth_depth)
    out["abs_rel"] = float(np.mean(np.abs(pd - td) / td))
    ratio = np.maximum(pd / td, td / pd)
    out["delta_125"] = float(100.0 * np.mean(ratio < 1.25))
    return out


# --- point-cloud export ----------------------------------------------------------

def export_pointcloud(tracks: list[Track3D], frame: int, path,
                      colors: np.ndarray | None = None, with_track_ids: bool = True) -> None:
    """Write visible points at one frame as a binary little-endian PLY."""
    rows = [t for t in tracks if 0 <= frame < t.n_frames and t.visible[frame]]
    fields_ = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    props = ["property float x", "property float y", "property float z"]
    if colors is not None:
        fields_ += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    if with_track_ids:
        fields_.append(("track_id", "<u4"))
        props.append("property uint track_id")
    data = np.zeros(len(rows), dtype=fields_)
    for k, t in enumerate(rows):
        data[k]["x"], data[k]["y"], data[k]["z"] = t.points[frame]
        if colors is not None:
            data[k]["red"], data[k]["green"], data[k]["blue"] = colors[k % len(colors)]
        if with_track_ids:
            data[k]["track_id"] = t.track_id
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(rows)}\n" + "\n".join(props) + "\nend_header\n"
    )
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(data.tobytes())
    except OSError as e:
        raise OSError(f"writing point cloud {path}: {e}") from e


def export_trajectories(tracks: list[Track3D], path) -> None:
    """Write each track's visible path as a PLY polyline (vertices + edges)."""
    verts = []
    edges = []
    for t in tracks:
        idx = np.flatnonzero(t.visible)
        start = len(verts)
        verts.extend(t.points[i] for i in idx)
        edges.extend((start + k, start + k + 1) for k in range(len(idx) - 1))
    vdata = np.zeros(len(verts), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
    for k, p in enumerate(verts):
        vdata[k] = tuple(p)
    edata = np.zeros(len(edges), dtype=[("vertex1", "<i4"), ("vertex2", "<i4")])
    for k, e in enumerate(edges):
        edata[k] = e
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(verts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element edge {len(edges)}\n"
        "property int vertex1\nproperty int vertex2\nend_header\n"
    )
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(vdata.tobytes())
            f.write(edata.tobytes())
    except OSError as e:
        raise OSError(f"writing trajectories {path}: {e}") from e
