"""Command-line entry points: run clips through the pipeline, generate
synthetic oracle clips, evaluate tracks, and export point clouds."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .geometry import load_camera_model, load_poses
from .optimize import trail_motion_magnitude
from .pipeline import (
    PipelineConfig,
    default_parallelism,
    eval_metrics,
    export_pointcloud,
    export_trajectories,
    load_config,
    load_manifest,
    run_clip,
    run_corpus,
)
from .filters import clip_stats
from .synth import load_scene_spec, render_scene, standard_scene, write_bundle
from .tracks import load_tracks3d


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--parallelism", type=int, default=None,
                   help=f"worker processes (default: $TRACKLIFT_PARALLELISM or 1)")
    g = p.add_argument_group("depth")
    g.add_argument("--max-depth-m", type=float, default=None)
    g.add_argument("--grad-threshold", type=float, default=None)
    g = p.add_argument_group("optimizer")
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--steps", type=int, default=None)
    g.add_argument("--lambda-reg", type=float, default=None)
    g.add_argument("--m0", type=float, default=None)
    g.add_argument("--window-set", default=None, help="comma-separated, e.g. 1,3,5")
    g.add_argument("--trail-window", type=int, default=None)
    g = p.add_argument_group("filters")
    g.add_argument("--trim-frac", type=float, default=None)
    p.add_argument("--export-ply", action="store_true")
    p.add_argument("--export-loss-traces", action="store_true")


def _build_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    depth, opt, filt = cfg.depth, cfg.optimizer, cfg.filters
    if args.max_depth_m is not None:
        depth = replace(depth, max_depth_m=args.max_depth_m)
    if args.grad_threshold is not None:
        depth = replace(depth, grad_threshold=args.grad_threshold)
    opt_over = {}
    if args.lr is not None:
        opt_over["lr"] = args.lr
    if args.steps is not None:
        opt_over["steps"] = args.steps
    if args.lambda_reg is not None:
        opt_over["lambda_reg"] = args.lambda_reg
    if args.m0 is not None:
        opt_over["m0"] = args.m0
    if args.window_set is not None:
        opt_over["windows"] = tuple(int(x) for x in args.window_set.split(","))
    if args.trail_window is not None:
        opt_over["trail_window"] = args.trail_window
    if opt_over:
        opt = replace(opt, **opt_over)
    if args.trim_frac is not None:
        filt = replace(filt, trim_frac=args.trim_frac)
    parallelism = args.parallelism if args.parallelism is not None else default_parallelism()
    return replace(cfg, depth=depth, optimizer=opt, filters=filt,
                   parallelism=parallelism,
                   export_ply=args.export_ply or cfg.export_ply,
                   export_loss_traces=args.export_loss_traces or cfg.export_loss_traces)


def _cmd_run(args) -> int:
    cfg = _build_config(args)
    paths = []
    for m in args.manifests:
        p = Path(m)
        if p.is_dir():
            paths.extend(sorted(p.glob("**/manifest.json")))
        else:
            paths.append(p)
    if not paths:
        print("no manifests found", file=sys.stderr)
        return 2
    results = run_corpus(paths, cfg, args.out, cfg.parallelism)
    failed = 0
    for r in results:
        if r.ok:
            status = "ok" if r.verdict and r.verdict.accepted else "rejected"
            print(f"{r.clip_id}: {status} ({r.n_tracks} tracks)")
        else:
            failed += 1
            print(f"{r.clip_id}: FAILED at {r.stage_failed}: {r.error}")
    print(f"{len(results) - failed}/{len(results)} clips processed; ledger in {args.out}/failures.json")
    return 0 if failed == 0 else 1


def _cmd_run_clip(args) -> int:
    cfg = _build_config(args)
    result = run_clip(load_manifest(args.manifest), cfg, args.out)
    if not result.ok:
        print(f"{result.clip_id}: FAILED at {result.stage_failed}: {result.error}", file=sys.stderr)
        return 1
    print(json.dumps({
        "clip_id": result.clip_id,
        "accepted": result.verdict.accepted,
        "reasons": result.verdict.reasons,
        "n_tracks": result.n_tracks,
        "output_dir": result.output_dir,
    }, indent=1))
    return 0


def _cmd_synth(args) -> int:
    if args.spec:
        spec = load_scene_spec(args.spec)
    else:
        spec = standard_scene(n_static=args.n_static, n_moving=args.n_moving,
                              seed=args.seed, n_frames=args.n_frames)
    bundle = render_scene(spec)
    manifest_path = write_bundle(bundle, args.out, clip_id=args.clip_id)
    print(manifest_path)
    return 0


def _cmd_eval(args) -> int:
    poses = load_poses(args.poses)
    pred = load_tracks3d(args.pred, poses)
    truth = load_tracks3d(args.truth, poses)
    print(json.dumps(eval_metrics(pred, truth), indent=1))
    return 0


def _cmd_stats(args) -> int:
    poses = load_poses(args.poses)
    model = load_camera_model(args.model)
    tracks = load_tracks3d(args.tracks, poses)
    mags = [trail_motion_magnitude(t, poses, model, args.trail_window) for t in tracks]
    print(json.dumps(clip_stats(tracks, mags, poses).to_dict(), indent=1))
    return 0


def _cmd_export_ply(args) -> int:
    poses = load_poses(args.poses)
    tracks = load_tracks3d(args.tracks, poses)
    if args.trajectories:
        export_trajectories(tracks, args.out)
    else:
        export_pointcloud(tracks, args.frame, args.out)
    print(args.out)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tracklift",
        description="Stereo-video derivatives to denoised 3D motion trajectories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="process a corpus of clip manifests")
    p.add_argument("manifests", nargs="+", help="manifest files or directories")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("run-clip", help="process one clip manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=_cmd_run_clip)

    p = sub.add_parser("synth", help="render a synthetic oracle clip")
    p.add_argument("--spec", help="scene spec JSON (default: built-in standard scene)")
    p.add_argument("--out", required=True)
    p.add_argument("--clip-id", default="synth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-static", type=int, default=60)
    p.add_argument("--n-moving", type=int, default=20)
    p.add_argument("--n-frames", type=int, default=150)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval", help="scale-aligned metrics of predicted vs truth tracks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--poses", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("stats", help="clip statistics for a 3D track table")
    p.add_argument("--tracks", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--trail-window", type=int, default=16)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("export-ply", help="write a PLY point cloud or trajectory set")
    p.add_argument("--tracks", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--trajectories", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_ply)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
