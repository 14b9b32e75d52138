"""tracklift: stereo-video derivatives to denoised world-space 3D trajectories.

The library converts per-clip camera poses, stereo disparity (or raw stereo
flow), and long-range 2D point tracks into filtered, temporally denoised,
pseudo-metric 3D motion trajectories. See README.md for the pipeline layout.
"""

from .depth import (
    DepthMap,
    DisparityMap,
    FlowThresholds,
    StereoFlowField,
    disparity_to_depth,
    flow_to_disparity,
    reject_occlusion_boundaries,
    sample_depth,
)
from .filters import (
    ClipVerdict,
    LabelMap,
    MatchCountSeries,
    builtin_match_count,
    camera_static_test,
    clip_stats,
    detect_cross_fade,
    prune_semantic_drift,
)
from .geometry import (
    CameraModel,
    CameraPose,
    PixelPoint,
    RigCalibration,
    project,
    project_points,
    rectify_rig,
    reproject_image,
    unproject,
    unproject_points,
)
from .optimize import (
    MotionMagnitude,
    OffsetVector,
    OptimizerConfig,
    OptimizeResult,
    analytic_gradient,
    dynamic_loss,
    objective,
    optimize_track,
    optimize_tracks,
    reg_loss,
    sigma_gate,
    static_loss,
    trail_motion_magnitude,
)
from .pipeline import (
    ClipManifest,
    ClipResult,
    PipelineConfig,
    eval_metrics,
    export_pointcloud,
    export_trajectories,
    load_config,
    load_manifest,
    run_clip,
    run_corpus,
)
from .synth import (
    GroundTruthBundle,
    SceneSpec,
    evaluate_denoising,
    render_scene,
    standard_scene,
    write_bundle,
)
from .tracks import (
    Track2D,
    Track3D,
    dedup_queries,
    lift_track,
    lift_tracks,
    track_visibility_stats,
)

__version__ = "0.1.0"
