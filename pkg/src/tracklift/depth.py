"""Rectified stereo flow to disparity to pseudo-metric depth, with the full
outlier-rejection chain (vertical-flow, cycle, negative-flow, range cutoff,
occlusion-boundary gradients). Invalid pixels are NaN-encoded throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import _bilinear_sample_image

GRID_MAGIC = b"GRD1"


@dataclass(frozen=True)
class FlowThresholds:
    vertical_px: float = 1.0
    cycle_px: float = 1.0


@dataclass
class StereoFlowField:
    """Left-to-right rectified stereo flow with a cycle-consistency error grid."""

    flow_x: np.ndarray
    flow_y: np.ndarray
    cycle_error: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.flow_x = np.asarray(self.flow_x, dtype=np.float64)
        self.flow_y = np.asarray(self.flow_y, dtype=np.float64)
        self.cycle_error = np.asarray(self.cycle_error, dtype=np.float64)
        if not (self.flow_x.shape == self.flow_y.shape == self.cycle_error.shape):
            raise ValueError("flow grids must share one shape")
        if self.flow_x.ndim != 2:
            raise ValueError("flow grids must be 2D")


@dataclass
class DisparityMap:
    disparity: np.ndarray
    valid: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.disparity.shape != self.valid.shape:
            raise ValueError("disparity and valid must share one shape")


@dataclass
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray
    baseline_m: float
    focal_px: float
    frame_index: int = 0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape:
            raise ValueError("depth and valid must share one shape")


def flow_to_disparity(flow: StereoFlowField, thresholds: FlowThresholds = FlowThresholds()) -> DisparityMap:
    """Keep flow_x as disparity only where the stereo confidence checks pass.

    A pixel survives when the vertical flow component stays within the
    epipolar tolerance, the cycle-consistency error is small, and the flow is
    positive (negative disparity cannot occur in a rectified pair).
    """
    ok = (
        np.isfinite(flow.flow_x)
        & np.isfinite(flow.flow_y)
        & np.isfinite(flow.cycle_error)
        & (np.abs(flow.flow_y) <= thresholds.vertical_px)
        & (flow.cycle_error <= thresholds.cycle_px)
        & (flow.flow_x > 0.0)
    )
    disp = np.where(ok, flow.flow_x, np.nan)
    return DisparityMap(disp, ok, flow.frame_index)


def disparity_to_depth(disp: DisparityMap, baseline_m: float, focal_px: float,
                       max_depth_m: float = 20.0) -> DepthMap:
    """depth = baseline * focal / disparity, dropping pixels beyond the range
    where sub-pixel disparity noise dominates (default 20 m)."""
    if baseline_m <= 0 or focal_px <= 0:
        raise ValueError("baseline and focal must be positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = baseline_m * focal_px / disp.disparity
    valid = disp.valid & np.isfinite(depth) & (depth > 0) & (depth <= max_depth_m)
    depth = np.where(valid, depth, np.nan)
    return DepthMap(depth, valid, baseline_m, focal_px, disp.frame_index)


def reject_occlusion_boundaries(depth: DepthMap, threshold: float = 0.3) -> DepthMap:
    """Invalidate pixels whose central-difference depth gradient exceeds
    threshold * depth, in either axis.

    A gradient test is skipped (never failed) when one of its neighbors is
    invalid or outside the image, so borders keep their pixels.
    """
    d = depth.depth
    valid = depth.valid
    reject = np.zeros_like(valid)

    # horizontal: compare columns x-1 and x+1 against the center pixel
    left, right, center = d[:, :-2], d[:, 2:], d[:, 1:-1]
    testable = valid[:, :-2] & valid[:, 2:] & valid[:, 1:-1]
    reject[:, 1:-1] |= testable & (np.abs(right - left) > threshold * center)

    up, down, center = d[:-2, :], d[2:, :], d[1:-1, :]
    testable = valid[:-2, :] & valid[2:, :] & valid[1:-1, :]
    reject[1:-1, :] |= testable & (np.abs(down - up) > threshold * center)

    new_valid = valid & ~reject
    return DepthMap(np.where(new_valid, d, np.nan), new_valid,
                    depth.baseline_m, depth.focal_px, depth.frame_index)


def sample_depth(depth: DepthMap, u, v):
    """Strict bilinear depth lookup at pixel coordinates.

    Any contributing neighbor that is invalid or out of bounds poisons the
    sample (NaN); mixing depth across an occlusion boundary would fabricate
    phantom 3D points. Accepts scalars or arrays.
    """
    out = _bilinear_sample_image(depth.depth, np.asarray(u, dtype=np.float64),
                                 np.asarray(v, dtype=np.float64))
    return out


# --- binary grid files ---------------------------------------------------------

def save_grid(path, grid: np.ndarray, frame_index: int = 0) -> None:
    """Write a 2D float grid: 16-byte header (magic, width, height, frame),
    then row-major little-endian float32; NaN marks invalid pixels."""
    g = np.asarray(grid, dtype=np.float32)
    if g.ndim != 2:
        raise ValueError("grid must be 2D")
    h, w = g.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", GRID_MAGIC, w, h, frame_index))
        f.write(g.astype("<f4").tobytes())


def load_grid(path):
    """Read a grid file; returns (float64 array, frame_index)."""
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated grid header")
        magic, w, h, frame_index = struct.unpack("<4sIII", header)
        if magic != GRID_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"{path}: truncated grid data")
    return data.reshape(h, w).astype(np.float64), frame_index


def save_depth_map(path, depth: DepthMap) -> None:
    save_grid(path, np.where(depth.valid, depth.depth, np.nan), depth.frame_index)


def load_depth_map(path, baseline_m: float, focal_px: float) -> DepthMap:
    grid, frame_index = load_grid(path)
    return DepthMap(grid, np.isfinite(grid), baseline_m, focal_px, frame_index)


def save_disparity_map(path, disp: DisparityMap) -> None:
    save_grid(path, np.where(disp.valid, disp.disparity, np.nan), disp.frame_index)


def load_disparity_map(path) -> DisparityMap:
    grid, frame_index = load_grid(path)
    return DisparityMap(grid, np.isfinite(grid), frame_index)
