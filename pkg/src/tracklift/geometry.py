"""Camera models (perspective, fisheye, cropped equirectangular), poses, and
world<->pixel projection. Everything downstream projects through this module.

Conventions: camera frame is x-right, y-down, z-forward; orientations are
world-from-camera rotation matrices, so p_world = R @ p_cam + c. Perspective
depth means z-depth; fisheye and equirectangular depth means ray length.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

PERSPECTIVE = "perspective"
FISHEYE = "equidistant-fisheye"
EQUIRECT = "cropped-equirectangular"

_KINDS = (PERSPECTIVE, FISHEYE, EQUIRECT)


def _as_array(x, shape, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_rotation(r: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Validate a 3x3 world-from-camera rotation (orthonormal, det +1)."""
    r = _as_array(r, (3, 3), "rotation")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err >= tol:
        raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
    if np.linalg.det(r) <= 0:
        raise ValueError("rotation has negative determinant (reflection)")
    return r


@dataclass(frozen=True)
class CameraPose:
    """Rigid pose of a camera in world space at one frame."""

    frame_index: int
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _as_array(self.position, (3,), "position"))
        object.__setattr__(self, "orientation", check_rotation(self.orientation))
        self.position.setflags(write=False)
        self.orientation.setflags(write=False)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.orientation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.orientation.T + self.position


@dataclass(frozen=True)
class RigCalibration:
    """Right camera relative to the left one, plus the nominal metric baseline."""

    relative_position: np.ndarray
    relative_orientation: np.ndarray
    baseline_m: float = 0.063

    def __post_init__(self):
        object.__setattr__(
            self, "relative_position", _as_array(self.relative_position, (3,), "relative_position")
        )
        object.__setattr__(self, "relative_orientation", check_rotation(self.relative_orientation))
        if not self.baseline_m > 0:
            raise ValueError("baseline_m must be positive")
        self.relative_position.setflags(write=False)
        self.relative_orientation.setflags(write=False)

    @classmethod
    def nominal(cls, baseline_m: float = 0.063) -> "RigCalibration":
        return cls(np.array([baseline_m, 0.0, 0.0]), np.eye(3), baseline_m)

    def right_pose(self, left: CameraPose) -> CameraPose:
        return CameraPose(
            left.frame_index,
            left.position + left.orientation @ self.relative_position,
            left.orientation @ self.relative_orientation,
        )


@dataclass(frozen=True)
class CameraModel:
    """Intrinsic model: image size, field of view, and projection kind."""

    kind: str
    width: int
    height: int
    fov_h: float
    fov_v: float
    principal_point: np.ndarray
    focal: float = 0.0  # pixels, perspective only

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown camera kind {self.kind!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0.0 < self.fov_h <= 180.0 or not 0.0 < self.fov_v <= 180.0:
            raise ValueError("fov must be in (0, 180] degrees")
        pp = _as_array(self.principal_point, (2,), "principal_point")
        if not (0 <= pp[0] <= self.width and 0 <= pp[1] <= self.height):
            raise ValueError("principal point outside image bounds")
        object.__setattr__(self, "principal_point", pp)
        pp.setflags(write=False)
        if self.kind == PERSPECTIVE:
            if self.fov_h >= 180.0:
                raise ValueError("perspective fov_h must be < 180 degrees")
            expected = (self.width / 2.0) / math.tan(math.radians(self.fov_h) / 2.0)
            if self.focal <= 0.0:
                object.__setattr__(self, "focal", expected)
            elif abs(self.focal - expected) > 1e-6 * expected:
                raise ValueError("focal inconsistent with fov_h and width")

    @classmethod
    def perspective(cls, width: int, height: int, fov_h_deg: float) -> "CameraModel":
        f = (width / 2.0) / math.tan(math.radians(fov_h_deg) / 2.0)
        fov_v = 2.0 * math.degrees(math.atan((height / 2.0) / f))
        return cls(PERSPECTIVE, width, height, fov_h_deg, fov_v,
                   np.array([width / 2.0, height / 2.0]), f)

    @classmethod
    def fisheye(cls, width: int, height: int, fov_deg: float = 140.0) -> "CameraModel":
        return cls(FISHEYE, width, height, fov_deg, fov_deg,
                   np.array([width / 2.0, height / 2.0]))

    @classmethod
    def equirect(cls, width: int, height: int, fov_h_deg: float = 180.0,
                 fov_v_deg: float = 180.0) -> "CameraModel":
        # Defaults match the common metadata: yaw and tilt spanning [-90, 90].
        return cls(EQUIRECT, width, height, fov_h_deg, fov_v_deg,
                   np.array([width / 2.0, height / 2.0]))

    @classmethod
    def equirect_from_metadata(cls, width: int, height: int,
                               start_yaw: float = -90.0, end_yaw: float = 90.0,
                               start_tilt: float = -90.0, end_tilt: float = 90.0) -> "CameraModel":
        """Build a cropped-equirectangular model from yaw/tilt metadata ranges.

        An asymmetric crop shifts the principal point so that yaw 0 / tilt 0
        still maps to the optical axis.
        """
        fov_h = end_yaw - start_yaw
        fov_v = end_tilt - start_tilt
        cx = -start_yaw / fov_h * width
        cy = -start_tilt / fov_v * height
        return cls(EQUIRECT, width, height, fov_h, fov_v, np.array([cx, cy]))

    @property
    def fisheye_focal(self) -> float:
        # equidistant mapping: pixel radius = fisheye_focal * angle off axis
        return (self.width / 2.0) / (math.radians(self.fov_h) / 2.0)

    def contains(self, u, v) -> bool | np.ndarray:
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "width": self.width,
            "height": self.height,
            "fov_h": self.fov_h,
            "fov_v": self.fov_v,
            "principal_point": list(map(float, self.principal_point)),
        }
        if self.kind == PERSPECTIVE:
            d["focal"] = self.focal
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            d["kind"], int(d["width"]), int(d["height"]),
            float(d["fov_h"]), float(d["fov_v"]),
            np.asarray(d["principal_point"], dtype=np.float64),
            float(d.get("focal", 0.0)),
        )


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float
    frame_index: int = -1


def camera_to_pixel(points_cam: np.ndarray, model: CameraModel):
    """Project camera-frame points to pixels.

    Parameters
    ----------
    points_cam : (..., 3) array
        Points in the camera frame.
    model : CameraModel

    Returns
    -------
    uv : (..., 2) array
        Pixel coordinates. Values for points behind the camera or outside
        the model's field of view are still computed where possible but are
        meaningful only where `in_front` is True.
    in_front : (...) bool array
        True where the point lies on a ray the model can represent.
    """
    p = np.asarray(points_cam, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    cx, cy = model.principal_point

    if model.kind == PERSPECTIVE:
        with np.errstate(divide="ignore", invalid="ignore"):
            zz = np.where(z == 0.0, np.nan, z)
            u = model.focal * x / zz + cx
            v = model.focal * y / zz + cy
        return np.stack([u, v], axis=-1), z > 0.0

    r = np.sqrt(x * x + y * y + z * z)
    half_h = math.radians(model.fov_h) / 2.0

    if model.kind == FISHEYE:
        with np.errstate(invalid="ignore"):
            theta = np.arccos(np.clip(np.divide(z, r, out=np.full_like(r, np.nan), where=r > 0), -1.0, 1.0))
        phi = np.arctan2(y, x)
        rpx = model.fisheye_focal * theta
        uv = np.stack([cx + rpx * np.cos(phi), cy + rpx * np.sin(phi)], axis=-1)
        return uv, theta <= half_h

    # cropped equirectangular: longitude around y, latitude off the horizon
    lon = np.arctan2(x, z)
    lat = np.arctan2(y, np.hypot(x, z))
    half_v = math.radians(model.fov_v) / 2.0
    u = cx + lon / math.radians(model.fov_h) * model.width
    v = cy + lat / math.radians(model.fov_v) * model.height
    in_front = (np.abs(lon) <= half_h) & (np.abs(lat) <= half_v) & (r > 0)
    return np.stack([u, v], axis=-1), in_front


def pixel_to_ray(uv: np.ndarray, model: CameraModel) -> np.ndarray:
    """Camera-frame ray directions for pixels; unit length except perspective,
    where rays are scaled to z = 1 so that depth multiplies as z-depth."""
    uv = np.asarray(uv, dtype=np.float64)
    du = uv[..., 0] - model.principal_point[0]
    dv = uv[..., 1] - model.principal_point[1]

    if model.kind == PERSPECTIVE:
        return np.stack([du / model.focal, dv / model.focal, np.ones_like(du)], axis=-1)

    if model.kind == FISHEYE:
        rpx = np.hypot(du, dv)
        theta = rpx / model.fisheye_focal
        phi = np.arctan2(dv, du)
        st = np.sin(theta)
        return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)

    lon = du * math.radians(model.fov_h) / model.width
    lat = dv * math.radians(model.fov_v) / model.height
    cl = np.cos(lat)
    return np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=-1)


def project_points(points_world: np.ndarray, pose: CameraPose, model: CameraModel):
    """Vectorized world-to-pixel projection through one camera."""
    return camera_to_pixel(pose.world_to_camera(points_world), model)


def project(point_world, pose: CameraPose, model: CameraModel):
    """Project one world point; returns (PixelPoint, in_front flag)."""
    p = _as_array(point_world, (3,), "point_world")
    uv, ok = project_points(p, pose, model)
    return PixelPoint(float(uv[0]), float(uv[1]), pose.frame_index), bool(ok)


def project_points_multi(points_world: np.ndarray, rotations: np.ndarray,
                         centers: np.ndarray, model: CameraModel):
    """Project points through per-row cameras: row k of `points_world` goes
    through the camera with orientation `rotations[k]` and center `centers[k]`."""
    p = np.asarray(points_world, dtype=np.float64)
    cam = np.einsum("kji,kj->ki", rotations, p - centers)
    return camera_to_pixel(cam, model)


def unproject_points(uv: np.ndarray, depths, pose: CameraPose, model: CameraModel) -> np.ndarray:
    """Vectorized pixel+depth to world points (depth convention per model kind)."""
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise ValueError("depth must be positive")
    rays = pixel_to_ray(uv, model)
    return pose.camera_to_world(rays * depths[..., None])


def unproject(pixel: PixelPoint, depth_m: float, pose: CameraPose, model: CameraModel) -> np.ndarray:
    """Lift one pixel at the given depth into world space."""
    return unproject_points(np.array([pixel.u, pixel.v]), np.float64(depth_m), pose, model)


def rectify_rig(left_pose: CameraPose, rig: RigCalibration,
                width: int = 512, height: int = 512, fov_h_deg: float = 60.0):
    """Rectify a stereo rig: both cameras get one shared orientation whose
    x-axis is the baseline, with optical axes perpendicular to it.

    Returns (left_pose, right_pose, model): the rectified poses keep the
    original camera centers, and the model is a centered-principal-point
    perspective camera.
    """
    right = rig.right_pose(left_pose)
    baseline = right.position - left_pose.position
    b = np.linalg.norm(baseline)
    if b < 1e-12:
        raise ValueError("degenerate rig: zero baseline")
    x_axis = baseline / b

    mean_axis = left_pose.orientation[:, 2] + right.orientation[:, 2]
    y_axis = np.cross(mean_axis, x_axis)
    ny = np.linalg.norm(y_axis)
    if ny < 1e-12:
        raise ValueError("degenerate rig: optical axes parallel to baseline")
    y_axis /= ny
    z_axis = np.cross(x_axis, y_axis)
    r_rect = np.column_stack([x_axis, y_axis, z_axis])

    model = CameraModel.perspective(width, height, fov_h_deg)
    return (
        CameraPose(left_pose.frame_index, left_pose.position, r_rect),
        CameraPose(left_pose.frame_index, right.position, r_rect),
        model,
    )


def _bilinear_sample_image(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Plain bilinear sampling of a 2D grid; out-of-grid samples become NaN.

    Coordinates within 1e-9 px of a grid node are snapped to it so that
    resampling through an exact identity mapping cannot smear neighbors.
    """
    u = np.where(np.abs(u - np.round(u)) < 1e-9, np.round(u), u)
    v = np.where(np.abs(v - np.round(v)) < 1e-9, np.round(v), v)
    h, w = image.shape
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0

    out = np.full(u.shape, np.nan)
    valid = np.isfinite(u) & np.isfinite(v)
    # corners with zero weight are ignored, so x0+1 == w at fx == 0 is fine
    need_x1 = fx > 0
    need_y1 = fy > 0
    valid &= (x0 >= 0) & (y0 >= 0)
    valid &= np.where(need_x1, x0 + 1 <= w - 1, x0 <= w - 1)
    valid &= np.where(need_y1, y0 + 1 <= h - 1, y0 <= h - 1)

    x0c = np.clip(x0, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)

    v00 = image[y0c, x0c]
    v01 = image[y0c, x1c]
    v10 = image[y1c, x0c]
    v11 = image[y1c, x1c]
    top = v00 * (1 - fx) + np.where(need_x1, v01 * fx, 0.0)
    bot = v10 * (1 - fx) + np.where(need_x1, v11 * fx, 0.0)
    res = top * (1 - fy) + np.where(need_y1, bot * fy, 0.0)
    out[valid] = res[valid]
    return out


def reproject_image(src_image: np.ndarray, src_model: CameraModel,
                    dst_model: CameraModel, relative_rotation: np.ndarray) -> np.ndarray:
    """Resample an image from one camera model into another.

    `relative_rotation` maps destination-camera rays into the source camera
    frame (ray_src = R @ ray_dst). Destination pixels whose rays fall outside
    the source field of view come back as NaN.
    """
    rel = check_rotation(relative_rotation)
    src = np.asarray(src_image, dtype=np.float64)
    if src.shape != (src_model.height, src_model.width):
        raise ValueError("src_image shape does not match src_model")

    vv, uu = np.meshgrid(
        np.arange(dst_model.height, dtype=np.float64),
        np.arange(dst_model.width, dtype=np.float64),
        indexing="ij",
    )
    rays = pixel_to_ray(np.stack([uu, vv], axis=-1), dst_model)
    rays_src = rays @ rel.T
    uv, in_front = camera_to_pixel(rays_src, src_model)
    out = _bilinear_sample_image(src, uv[..., 0], uv[..., 1])
    out[~in_front] = np.nan
    return out


def look_at(position, target, frame_index: int = 0) -> CameraPose:
    """Pose at `position` with the optical axis toward `target` (y-down world)."""
    c = _as_array(position, (3,), "position")
    t = _as_array(target, (3,), "target")
    z = t - c
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("target coincides with camera position")
    z = z / nz
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:  # looking straight along y: fall back to world x
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    return CameraPose(frame_index, c, np.column_stack([x, y, z]))


# --- pose / rig / model files -------------------------------------------------

def save_poses(path, poses: list[CameraPose]) -> None:
    rows = [
        {
            "frame_index": p.frame_index,
            "position": list(map(float, p.position)),
            "rotation": list(map(float, p.orientation.reshape(-1))),
        }
        for p in poses
    ]
    with open(path, "w") as f:
        json.dump(rows, f, indent=1)


def load_poses(path) -> list[CameraPose]:
    with open(path) as f:
        rows = json.load(f)
    return [
        CameraPose(
            int(r["frame_index"]),
            np.asarray(r["position"], dtype=np.float64),
            np.asarray(r["rotation"], dtype=np.float64).reshape(3, 3),
        )
        for r in rows
    ]


def save_rig(path, rig: RigCalibration) -> None:
    with open(path, "w") as f:
        json.dump(
            {
                "position": list(map(float, rig.relative_position)),
                "rotation": list(map(float, rig.relative_orientation.reshape(-1))),
                "baseline_m": rig.baseline_m,
            },
            f,
            indent=1,
        )


def load_rig(path) -> RigCalibration:
    with open(path) as f:
        d = json.load(f)
    return RigCalibration(
        np.asarray(d["position"], dtype=np.float64),
        np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
        float(d["baseline_m"]),
    )


def save_camera_model(path, model: CameraModel) -> None:
    with open(path, "w") as f:
        json.dump(model.to_dict(), f, indent=1)


def load_camera_model(path) -> CameraModel:
    with open(path) as f:
        return CameraModel.from_dict(json.load(f))
