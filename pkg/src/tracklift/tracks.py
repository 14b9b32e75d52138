"""Long-range point tracks: query dedup, lifting 2D tracks to world-space 3D
trajectories through per-frame depth, and the binary track-table format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .depth import DepthMap, sample_depth
from .geometry import CameraModel, CameraPose, unproject_points

TRACKS2D_MAGIC = b"TRK2"
TRACKS3D_MAGIC = b"TRK3"


@dataclass
class Track2D:
    """One 2D trajectory: per-frame pixel position plus a visibility mask."""

    track_id: int
    positions: np.ndarray  # (N, 2) pixels
    visible: np.ndarray  # (N,) bool
    query_frame: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError("positions must be (N, 2)")
        if self.visible.shape != (self.positions.shape[0],):
            raise ValueError("visible mask must be (N,)")
        if self.visible.sum() < 2:
            raise ValueError("a track needs at least 2 visible frames")
        if not np.all(np.isfinite(self.positions[self.visible])):
            raise ValueError("positions must be finite where visible")

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]


@dataclass
class Track3D:
    """One world-space trajectory with per-frame camera rays and centers.

    `rays` point from the camera center through the point; they stay valid
    under any along-ray adjustment of `points`. `source_positions` and
    `variant` record where the track came from (2D pixel path, FoV variant).
    """

    track_id: int
    points: np.ndarray  # (N, 3) meters, world space
    visible: np.ndarray  # (N,) bool
    rays: np.ndarray  # (N, 3) unit vectors
    camera_centers: np.ndarray  # (N, 3)
    query_frame: int = 0
    source_positions: np.ndarray | None = None
    variant: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        self.rays = np.asarray(self.rays, dtype=np.float64)
        self.camera_centers = np.asarray(self.camera_centers, dtype=np.float64)
        n = self.points.shape[0]
        if self.points.shape != (n, 3) or self.rays.shape != (n, 3) or self.camera_centers.shape != (n, 3):
            raise ValueError("points, rays, camera_centers must be (N, 3)")
        if self.visible.shape != (n,):
            raise ValueError("visible mask must be (N,)")
        if self.visible.any():
            norms = np.linalg.norm(self.rays[self.visible], axis=1)
            if np.abs(norms - 1.0).max() > 1e-9:
                raise ValueError("rays must be unit length where visible")

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]

    @property
    def n_visible(self) -> int:
        return int(self.visible.sum())

    def with_points(self, points: np.ndarray) -> "Track3D":
        """Same track with adjusted point positions (rays/centers carried over)."""
        return Track3D(self.track_id, points, self.visible.copy(), self.rays,
                       self.camera_centers, self.query_frame,
                       self.source_positions, self.variant)


def make_track3d(track_id: int, points: np.ndarray, visible: np.ndarray,
                 camera_centers: np.ndarray, query_frame: int = 0,
                 source_positions: np.ndarray | None = None, variant: str = "") -> Track3D:
    """Build a Track3D computing rays from points and camera centers."""
    points = np.asarray(points, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    centers = np.asarray(camera_centers, dtype=np.float64)
    rays = np.zeros_like(points)
    diff = points[visible] - centers[visible]
    dist = np.linalg.norm(diff, axis=1)
    if np.any(dist <= 0):
        raise ValueError("visible point coincides with its camera center")
    rays[visible] = diff / dist[:, None]
    return Track3D(track_id, points, visible, rays, centers, query_frame,
                   source_positions, variant)


def dedup_queries(tracks: list[Track2D], radius_px: float = 1.0) -> list[Track2D]:
    """Drop tracks whose query point duplicates an earlier-retained track.

    A candidate is dropped when any retained track is visible at the
    candidate's query frame within `radius_px` of the query point. Candidates
    are processed in (query_frame, track_id) order, which makes retention
    deterministic.
    """
    order = sorted(tracks, key=lambda t: (t.query_frame, t.track_id))
    retained: list[Track2D] = []
    cell = max(radius_px, 1e-9)
    # per query frame, a hash grid over the retained tracks' positions there
    by_frame: dict[int, dict[tuple[int, int], list[np.ndarray]]] = {}

    def grid_for(frame: int) -> dict:
        g = by_frame.get(frame)
        if g is None:
            g = {}
            for t in retained:
                if frame < t.n_frames and t.visible[frame]:
                    p = t.positions[frame]
                    g.setdefault((int(p[0] // cell), int(p[1] // cell)), []).append(p)
            by_frame[frame] = g
        return g

    for cand in order:
        q = cand.query_frame
        if not (0 <= q < cand.n_frames) or not cand.visible[q]:
            raise ValueError(f"track {cand.track_id} is not visible at its query frame")
        p = cand.positions[q]
        g = grid_for(q)
        ci, cj = int(p[0] // cell), int(p[1] // cell)
        dup = False
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for other in g.get((ci + di, cj + dj), ()):
                    if np.hypot(other[0] - p[0], other[1] - p[1]) <= radius_px:
                        dup = True
                        break
                if dup:
                    break
            if dup:
                break
        if dup:
            continue
        retained.append(cand)
        # register this track's positions in every already-built frame grid
        for frame, g2 in by_frame.items():
            if frame < cand.n_frames and cand.visible[frame]:
                pf = cand.positions[frame]
                g2.setdefault((int(pf[0] // cell), int(pf[1] // cell)), []).append(pf)
    return retained


def _pose_map(poses: list[CameraPose]) -> dict[int, CameraPose]:
    return {p.frame_index: p for p in poses}


def lift_track(track: Track2D, poses: list[CameraPose], depths: dict[int, DepthMap],
               model: CameraModel, variant: str = "") -> Track3D:
    """Lift one 2D track to world space through the per-frame depth maps.

    Frames where the depth sample is invalid become invisible in the output;
    no geometry is fabricated for them.
    """
    pose_map = _pose_map(poses) if not isinstance(poses, dict) else poses
    n = track.n_frames
    points = np.zeros((n, 3))
    centers = np.zeros((n, 3))
    out_visible = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(track.visible):
        pose = pose_map.get(i)
        if pose is None:
            raise ValueError(f"no pose for visible frame {i}")
        dmap = depths.get(i) if hasattr(depths, "get") else depths[i]
        if dmap is None:
            raise ValueError(f"no depth map for visible frame {i}")
        u, v = track.positions[i]
        d = sample_depth(dmap, u, v)
        if not np.isfinite(d):
            continue
        points[i] = unproject_points(track.positions[i], np.float64(d), pose, model)
        centers[i] = pose.position
        out_visible[i] = True
    return make_track3d(track.track_id, points, out_visible, centers,
                        track.query_frame, track.positions.copy(), variant)


def lift_tracks(tracks: list[Track2D], poses: list[CameraPose],
                depths: dict[int, DepthMap], model: CameraModel,
                variant: str = "") -> list[Track3D]:
    """Lift many tracks, vectorizing the depth sampling frame by frame.

    Equivalent to lift_track applied per track.
    """
    if not tracks:
        return []
    pose_map = _pose_map(poses)
    n = max(t.n_frames for t in tracks)
    k = len(tracks)
    points = np.zeros((k, n, 3))
    centers = np.zeros((k, n, 3))
    out_visible = np.zeros((k, n), dtype=bool)

    for i in range(n):
        rows = [j for j, t in enumerate(tracks) if i < t.n_frames and t.visible[i]]
        if not rows:
            continue
        pose = pose_map.get(i)
        if pose is None:
            raise ValueError(f"no pose for visible frame {i}")
        dmap = depths.get(i) if hasattr(depths, "get") else depths[i]
        if dmap is None:
            raise ValueError(f"no depth map for visible frame {i}")
        uv = np.array([tracks[j].positions[i] for j in rows])
        d = sample_depth(dmap, uv[:, 0], uv[:, 1])
        ok = np.isfinite(d)
        if ok.any():
            lifted = unproject_points(uv[ok], d[ok], pose, model)
            for row, p in zip(np.asarray(rows)[ok], lifted):
                points[row, i] = p
                centers[row, i] = pose.position
                out_visible[row, i] = True

    out = []
    for j, t in enumerate(tracks):
        nf = t.n_frames
        out.append(make_track3d(t.track_id, points[j, :nf], out_visible[j, :nf],
                                centers[j, :nf], t.query_frame, t.positions.copy(), variant))
    return out


@dataclass
class VisibilityStats:
    n_tracks: int = 0
    mean_visible_length: float = 0.0
    per_frame_density: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_dict(self) -> dict:
        return {
            "n_tracks": self.n_tracks,
            "mean_visible_length": self.mean_visible_length,
            "per_frame_density": self.per_frame_density.tolist(),
        }


def track_visibility_stats(tracks: list[Track3D]) -> VisibilityStats:
    """Aggregate visibility statistics used for pipeline logging."""
    if not tracks:
        return VisibilityStats()
    n = max(t.n_frames for t in tracks)
    density = np.zeros(n, dtype=np.int64)
    total = 0
    for t in tracks:
        density[: t.n_frames] += t.visible
        total += t.n_visible
    return VisibilityStats(len(tracks), total / len(tracks), density)


# --- binary track tables --------------------------------------------------------

def _write_table(path, magic: bytes, n_frames: int, records) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", magic, len(records), n_frames))
        for track_id, query_frame, coords, visible in records:
            f.write(struct.pack("<II", track_id, query_frame))
            f.write(coords.astype("<f4").tobytes())
            f.write(visible.astype(np.uint8).tobytes())


def save_tracks2d(path, tracks: list[Track2D]) -> None:
    if not tracks:
        raise ValueError("refusing to write an empty track table")
    n = tracks[0].n_frames
    if any(t.n_frames != n for t in tracks):
        raise ValueError("all tracks in a table must share the frame count")
    recs = [
        (t.track_id, t.query_frame, np.where(t.visible[:, None], t.positions, np.nan), t.visible)
        for t in tracks
    ]
    _write_table(path, TRACKS2D_MAGIC, n, recs)


def save_tracks3d(path, tracks: list[Track3D]) -> None:
    if not tracks:
        raise ValueError("refusing to write an empty track table")
    n = tracks[0].n_frames
    if any(t.n_frames != n for t in tracks):
        raise ValueError("all tracks in a table must share the frame count")
    recs = [
        (t.track_id, t.query_frame, np.where(t.visible[:, None], t.points, np.nan), t.visible)
        for t in tracks
    ]
    _write_table(path, TRACKS3D_MAGIC, n, recs)


def _read_table(path, magic: bytes, n_coords: int):
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) != 12:
            raise ValueError(f"{path}: truncated table header")
        got, count, n = struct.unpack("<4sII", header)
        if got != magic:
            raise ValueError(f"{path}: bad magic {got!r}")
        rec_bytes = 8 + 4 * n_coords * n + n
        out = []
        for _ in range(count):
            raw = f.read(rec_bytes)
            if len(raw) != rec_bytes:
                raise ValueError(f"{path}: truncated record")
            track_id, query_frame = struct.unpack_from("<II", raw, 0)
            coords = np.frombuffer(raw, dtype="<f4", count=n_coords * n, offset=8)
            visible = np.frombuffer(raw, dtype=np.uint8, count=n, offset=8 + 4 * n_coords * n)
            out.append((track_id, query_frame,
                        coords.reshape(n, n_coords).astype(np.float64),
                        visible.astype(bool)))
    return out


def load_tracks2d(path) -> list[Track2D]:
    return [
        Track2D(tid, coords, vis, qf)
        for tid, qf, coords, vis in _read_table(path, TRACKS2D_MAGIC, 2)
    ]


def load_tracks3d(path, poses: list[CameraPose]) -> list[Track3D]:
    """Load a 3D table, rebuilding rays and camera centers from the poses."""
    pose_map = _pose_map(poses)
    out = []
    for tid, qf, coords, vis in _read_table(path, TRACKS3D_MAGIC, 3):
        centers = np.zeros_like(coords)
        for i in np.flatnonzero(vis):
            pose = pose_map.get(i)
            if pose is None:
                raise ValueError(f"no pose for visible frame {i}")
            centers[i] = pose.position
        pts = np.where(vis[:, None], coords, 0.0)
        out.append(make_track3d(tid, pts, vis, centers, qf))
    return out
