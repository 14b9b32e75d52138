"""Clip- and track-level quality gates: pruning drifting tracks on unreliable
semantic classes, rejecting cross-faded or still-image clips, and per-clip
statistics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose
from .optimize import MotionMagnitude
from .tracks import Track3D

DEFAULT_BANNED_CLASSES = frozenset({"walls", "building", "road", "earth", "sidewalk"})


@dataclass
class LabelMap:
    """Per-pixel semantic class ids plus the id -> name table; -1 = unlabeled."""

    class_ids: np.ndarray
    class_names: list[str]
    frame_index: int = 0

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.class_ids.ndim != 2:
            raise ValueError("class_ids must be a 2D grid")
        if self.class_ids.max(initial=-1) >= len(self.class_names):
            raise ValueError("class id outside the name table")

    def name_at(self, u: float, v: float) -> str | None:
        x = int(round(u))
        y = int(round(v))
        h, w = self.class_ids.shape
        if not (0 <= x < w and 0 <= y < h):
            return None
        cid = self.class_ids[y, x]
        return self.class_names[cid] if cid >= 0 else None


@dataclass
class ClipVerdict:
    accepted: bool
    reasons: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.accepted != (len(self.reasons) == 0):
            raise ValueError("accepted must mean no rejection reasons")

    @classmethod
    def from_reasons(cls, reasons: list[str]) -> "ClipVerdict":
        return cls(not reasons, list(reasons))


@dataclass
class MatchCountSeries:
    """Feature-match counts between frame pairs a fixed gap apart."""

    frame_pairs: list[tuple[int, int]]
    counts: list[int]
    gap: int

    def __post_init__(self):
        if len(self.frame_pairs) != len(self.counts):
            raise ValueError("one count per frame pair")
        if any(c < 0 for c in self.counts):
            raise ValueError("match counts must be >= 0")
        if any(b - a != self.gap for a, b in self.frame_pairs):
            raise ValueError("frame pairs must all span the stated gap")


def prune_semantic_drift(tracks: list[Track3D], magnitudes: list[MotionMagnitude | float],
                         labels: dict[int, LabelMap],
                         banned: frozenset[str] | set[str] = DEFAULT_BANNED_CLASSES,
                         m_threshold: float = 20.0) -> list[Track3D]:
    """Drop moving tracks whose majority semantic class is an unreliable one.

    2D trackers drift on texture-poor surfaces (roads, walls, ...), producing
    spurious motion. A track is dropped only when it is moving (magnitude
    above threshold) AND most of its visible-frame labels are banned classes;
    static tracks are kept regardless of class. Frames without a label map or
    with the track outside the grid do not vote.
    """
    if len(tracks) != len(magnitudes):
        raise ValueError("one magnitude per track required")
    kept = []
    for track, mag in zip(tracks, magnitudes):
        m = mag.magnitude if isinstance(mag, MotionMagnitude) else float(mag)
        if m <= m_threshold or track.source_positions is None:
            kept.append(track)
            continue
        banned_votes = 0
        total_votes = 0
        for i in np.flatnonzero(track.visible):
            lm = labels.get(i)
            if lm is None:
                continue
            name = lm.name_at(*track.source_positions[i])
            if name is None:
                continue
            total_votes += 1
            banned_votes += name in banned
        if total_votes and banned_votes * 2 > total_votes:
            continue
        kept.append(track)
    return kept


def detect_cross_fade(matches: MatchCountSeries, camera_static: bool,
                      min_matches: int = 5) -> bool:
    """Flag a clip as a probable cross-fade: a static camera should keep
    plenty of feature matches across a several-second gap; a fade destroys
    them. Only static-camera clips can be flagged (a moving camera loses
    matches legitimately)."""
    if not matches.frame_pairs:
        raise ValueError("empty match-count series")
    return camera_static and any(c < min_matches for c in matches.counts)


def camera_static_test(poses: list[CameraPose], trans_thresh_m: float = 0.05,
                       rot_thresh_deg: float = 1.0) -> bool:
    """True when no pair of poses differs by more than the translation and
    rotation thresholds."""
    if len(poses) < 2:
        raise ValueError("need at least 2 poses")
    c = np.stack([p.position for p in poses])
    d = c[:, None, :] - c[None, :, :]
    if np.sqrt(np.einsum("ijk,ijk->ij", d, d)).max() >= trans_thresh_m:
        return False
    r = np.stack([p.orientation for p in poses])
    tr = np.einsum("iab,jab->ij", r, r)  # trace of R_i^T R_j
    ang = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    return bool(np.degrees(ang).max() < rot_thresh_deg)


@dataclass
class ClipStats:
    camera_displacement_m: float
    fast_track_percent: float  # tracks whose trail magnitude exceeds the threshold
    n_tracks: int
    n_fast_tracks: int
    trail_threshold_px: float = 50.0

    def to_dict(self) -> dict:
        return {
            "camera_displacement_m": self.camera_displacement_m,
            "fast_track_percent": self.fast_track_percent,
            "n_tracks": self.n_tracks,
            "n_fast_tracks": self.n_fast_tracks,
            "trail_threshold_px": self.trail_threshold_px,
        }


def clip_stats(tracks: list[Track3D], magnitudes: list[MotionMagnitude | float],
               poses: list[CameraPose], trail_threshold_px: float = 50.0) -> ClipStats:
    """Start-to-end camera displacement and the share of fast-moving tracks."""
    if len(tracks) != len(magnitudes):
        raise ValueError("one magnitude per track required")
    if poses:
        ordered = sorted(poses, key=lambda p: p.frame_index)
        displacement = float(np.linalg.norm(ordered[-1].position - ordered[0].position))
    else:
        displacement = 0.0
    mags = [mg.magnitude if isinstance(mg, MotionMagnitude) else float(mg) for mg in magnitudes]
    n_fast = sum(m > trail_threshold_px for m in mags)
    pct = 100.0 * n_fast / len(tracks) if tracks else 0.0
    return ClipStats(displacement, pct, len(tracks), n_fast, trail_threshold_px)


# --- fallback patch matcher ------------------------------------------------------

def _window_sums(a: np.ndarray, th: int, tw: int):
    c = np.cumsum(np.cumsum(a, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[th:, tw:] - c[:-th, tw:] - c[th:, :-tw] + c[:-th, :-tw]


class _NccMatcher:
    """Valid-mode normalized cross-correlation against one fixed image."""

    def __init__(self, image: np.ndarray, th: int, tw: int):
        self.image = image
        h, w = image.shape
        self.th, self.tw = th, tw
        full = (h + th - 1, w + tw - 1)
        self.shape = tuple(1 << int(math.ceil(math.log2(s))) for s in full)
        self.f_img = np.fft.rfft2(image, s=self.shape)
        s1 = _window_sums(image, th, tw)
        s2 = _window_sums(image * image, th, tw)
        var = np.maximum(s2 - s1 * s1 / (th * tw), 0.0)
        self.den_base = np.sqrt(var)

    def best_match(self, patch: np.ndarray):
        """Peak NCC score and its (y, x) in the image, or None for a flat patch."""
        t0 = patch - patch.mean()
        tnorm = math.sqrt(float((t0 * t0).sum()))
        if tnorm < 1e-9:
            return None
        g = np.fft.rfft2(t0[::-1, ::-1], s=self.shape)
        corr = np.fft.irfft2(self.f_img * g, s=self.shape)
        h, w = self.image.shape
        num = corr[self.th - 1 : h, self.tw - 1 : w]
        den = self.den_base * tnorm
        with np.errstate(divide="ignore", invalid="ignore"):
            ncc = np.where(den > 1e-9, num / den, 0.0)
        flat = int(np.argmax(ncc))
        y, x = divmod(flat, ncc.shape[1])
        return float(ncc[y, x]), y, x


def builtin_match_count(frame_a: np.ndarray, frame_b: np.ndarray,
                        patch: int = 16, stride: int = 32,
                        ncc_threshold: float = 0.8, mutual_tol_px: int = 2) -> int:
    """Count grid patches of frame_a that find a confident, mutually-consistent
    normalized-cross-correlation match in frame_b.

    A deliberately simple stand-in for a feature matcher when no match-count
    file is supplied: lower fidelity, but deterministic and dependency-free.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("frames must share dimensions")
    h, w = a.shape
    if h < patch or w < patch:
        return 0
    fwd = _NccMatcher(b, patch, patch)
    bwd = _NccMatcher(a, patch, patch)
    count = 0
    for ay in range(0, h - patch + 1, stride):
        for ax in range(0, w - patch + 1, stride):
            hit = fwd.best_match(a[ay : ay + patch, ax : ax + patch])
            if hit is None or hit[0] <= ncc_threshold:
                continue
            _, by, bx = hit
            back = bwd.best_match(b[by : by + patch, bx : bx + patch])
            if back is None:
                continue
            _, ry, rx = back
            if abs(ry - ay) <= mutual_tol_px and abs(rx - ax) <= mutual_tol_px:
                count += 1
    return count


# --- config / file helpers -------------------------------------------------------

def load_banned_classes(path) -> frozenset[str]:
    """One class name per line; blank lines and #-comments ignored."""
    names = set()
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                names.add(line)
    return frozenset(names)


def save_match_counts(path, series: MatchCountSeries) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_a", "frame_b", "count"])
        for (a, b), c in zip(series.frame_pairs, series.counts):
            writer.writerow([a, b, c])


def load_match_counts(path) -> MatchCountSeries:
    pairs = []
    counts = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            pairs.append((int(row["frame_a"]), int(row["frame_b"])))
            counts.append(int(row["count"]))
    if not pairs:
        raise ValueError(f"{path}: empty match-count file")
    gap = pairs[0][1] - pairs[0][0]
    return MatchCountSeries(pairs, counts, gap)
