import numpy as np
import pytest
from numpy.testing import assert_allclose

from tracklift.depth import DepthMap
from tracklift.geometry import CameraModel, CameraPose, project_points
from tracklift.tracks import (
    Track2D,
    dedup_queries,
    lift_track,
    lift_tracks,
    load_tracks2d,
    load_tracks3d,
    make_track3d,
    save_tracks2d,
    save_tracks3d,
    track_visibility_stats,
)
from util import random_rotation, straight_pose

MODEL = CameraModel.perspective(64, 64, 60.0)


def constant_track(track_id, uv, n=6, query_frame=0):
    pos = np.tile(np.asarray(uv, dtype=float), (n, 1))
    return Track2D(track_id, pos, np.ones(n, dtype=bool), query_frame)


def full_depth(value, n=6, shape=(64, 64), baseline=0.063, focal=MODEL.focal):
    return {
        i: DepthMap(np.full(shape, float(value)), np.ones(shape, bool), baseline, focal, i)
        for i in range(n)
    }


class TestDedup:
    def test_duplicate_query_dropped(self):
        # track B queried at frame 3 where retained track A sits on that pixel
        a = constant_track(1, (10.0, 10.0), query_frame=0)
        b = constant_track(2, (10.4, 10.0), query_frame=3)
        kept = dedup_queries([a, b], radius_px=1.0)
        assert [t.track_id for t in kept] == [1]

    def test_far_tracks_both_kept(self):
        a = constant_track(1, (10.0, 10.0), query_frame=0)
        b = constant_track(2, (15.0, 10.0), query_frame=3)
        kept = dedup_queries([a, b])
        assert [t.track_id for t in kept] == [1, 2]

    def test_single_track_kept(self):
        a = constant_track(7, (3.0, 4.0))
        assert dedup_queries([a]) == [a]

    def test_retention_order_is_deterministic(self):
        # both queried at frame 0 on the same pixel: lower id wins, and input
        # order does not matter
        a = constant_track(1, (10.0, 10.0))
        b = constant_track(2, (10.2, 10.2))
        assert [t.track_id for t in dedup_queries([b, a])] == [1]
        assert [t.track_id for t in dedup_queries([a, b])] == [1]

    def test_earlier_track_invisible_at_query_frame_ignored(self):
        pos = np.tile([10.0, 10.0], (6, 1))
        vis = np.ones(6, bool)
        vis[3] = False
        a = Track2D(1, pos, vis, 0)
        b = constant_track(2, (10.0, 10.0), query_frame=3)
        kept = dedup_queries([a, b])
        assert [t.track_id for t in kept] == [1, 2]


class TestLift:
    def test_static_scene_constant_point(self):
        poses = [straight_pose(i, (0, 0, 0)) for i in range(6)]
        track = constant_track(0, (32.0, 32.0))
        lifted = lift_track(track, poses, full_depth(2.0), MODEL)
        assert lifted.visible.all()
        assert_allclose(lifted.points, np.tile([0.0, 0.0, 2.0], (6, 1)), atol=1e-12)
        assert_allclose(lifted.rays, np.tile([0.0, 0.0, 1.0], (6, 1)), atol=1e-12)

    def test_translating_camera_recovers_fixed_point(self):
        # render the observation of one fixed world point per frame, then
        # check the lift agrees with that point
        target = np.array([0.3, -0.2, 3.0])
        n = 8
        poses = [straight_pose(i, (0.05 * i, 0.0, 0.0)) for i in range(n)]
        uv = np.zeros((n, 2))
        depths = {}
        for i, pose in enumerate(poses):
            cam = pose.world_to_camera(target)
            uv[i], ok = project_points(target, pose, MODEL)
            assert ok
            depths[i] = DepthMap(np.full((64, 64), cam[2]), np.ones((64, 64), bool),
                                 0.063, MODEL.focal, i)
        track = Track2D(0, uv, np.ones(n, bool), 0)
        lifted = lift_track(track, poses, depths, MODEL)
        assert lifted.visible.all()
        assert np.abs(lifted.points - target).max() < 1e-6

    def test_invalid_depth_marks_invisible(self):
        poses = [straight_pose(i, (0, 0, 0)) for i in range(6)]
        depths = full_depth(2.0)
        depths[2].depth[:] = np.nan
        depths[2].valid[:] = False
        track = constant_track(0, (32.0, 32.0))
        lifted = lift_track(track, poses, depths, MODEL)
        assert not lifted.visible[2]
        assert lifted.visible.sum() == 5

    def test_output_visibility_subset_of_input(self):
        poses = [straight_pose(i, (0, 0, 0)) for i in range(6)]
        vis = np.array([True, False, True, True, False, True])
        pos = np.tile([32.0, 32.0], (6, 1))
        track = Track2D(0, pos, vis, 0)
        lifted = lift_track(track, poses, full_depth(2.0), MODEL)
        assert not (lifted.visible & ~vis).any()

    def test_missing_pose_is_error(self):
        poses = [straight_pose(i, (0, 0, 0)) for i in range(3)]
        track = constant_track(0, (32.0, 32.0), n=6)
        with pytest.raises(ValueError, match="pose"):
            lift_track(track, poses, full_depth(2.0), MODEL)

    def test_reprojection_consistency(self):
        rng = np.random.default_rng(8)
        n = 10
        poses = [
            CameraPose(i, rng.normal(scale=0.1, size=3), random_rotation(rng) @ np.eye(3))
            for i in range(n)
        ]
        # random in-bounds pixels with random depths
        uv = np.stack([rng.uniform(4, 60, n), rng.uniform(4, 60, n)], axis=1)
        depths = {
            i: DepthMap(np.full((64, 64), rng.uniform(1.0, 6.0)), np.ones((64, 64), bool),
                        0.063, MODEL.focal, i)
            for i in range(n)
        }
        track = Track2D(0, uv, np.ones(n, bool), 0)
        lifted = lift_track(track, poses, depths, MODEL)
        for i in np.flatnonzero(lifted.visible):
            back, ok = project_points(lifted.points[i], poses[i], MODEL)
            assert ok
            assert np.abs(back - uv[i]).max() < 1e-6

    def test_pose_equivariance(self):
        rng = np.random.default_rng(21)
        n = 6
        poses = [straight_pose(i, (0.1 * i, 0, 0)) for i in range(n)]
        track = constant_track(0, (20.0, 40.0), n=n)
        depths = full_depth(3.0, n=n)
        base = lift_track(track, poses, depths, MODEL)
        r = random_rotation(rng)
        t = rng.normal(size=3)
        moved_poses = [
            CameraPose(p.frame_index, r @ p.position + t, r @ p.orientation) for p in poses
        ]
        moved = lift_track(track, moved_poses, depths, MODEL)
        expected = base.points @ r.T + t
        assert np.abs(moved.points[moved.visible] - expected[base.visible]).max() < 1e-9

    def test_lift_tracks_matches_lift_track(self):
        rng = np.random.default_rng(5)
        n = 7
        poses = [straight_pose(i, (0.02 * i, 0, 0)) for i in range(n)]
        depths = full_depth(2.5, n=n)
        tracks = []
        for k in range(5):
            vis = rng.random(n) < 0.8
            vis[:2] = True
            uv = np.where(vis[:, None], rng.uniform(4, 60, (n, 2)), np.nan)
            tracks.append(Track2D(k, uv, vis, int(np.flatnonzero(vis)[0])))
        batch = lift_tracks(tracks, poses, depths, MODEL)
        for t2, t3 in zip(tracks, batch):
            single = lift_track(t2, poses, depths, MODEL)
            assert np.array_equal(single.visible, t3.visible)
            assert_allclose(single.points, t3.points, atol=1e-12)


class TestStats:
    def test_empty(self):
        s = track_visibility_stats([])
        assert s.n_tracks == 0 and s.mean_visible_length == 0.0

    def test_single_track(self):
        t = make_track3d(0, np.tile([0, 0, 2.0], (10, 1)), np.ones(10, bool), np.zeros((10, 3)))
        s = track_visibility_stats([t])
        assert s.mean_visible_length == 10.0

    def test_mean_over_tracks(self):
        t1 = make_track3d(0, np.tile([0, 0, 2.0], (20, 1)),
                          np.r_[np.ones(10, bool), np.zeros(10, bool)], np.zeros((20, 3)))
        t2 = make_track3d(1, np.tile([0, 0, 2.0], (20, 1)), np.ones(20, bool), np.zeros((20, 3)))
        s = track_visibility_stats([t1, t2])
        assert s.mean_visible_length == 15.0
        assert s.per_frame_density[:10].tolist() == [2] * 10
        assert s.per_frame_density[10:].tolist() == [1] * 10


class TestTrackTables:
    def test_tracks2d_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        tracks = []
        for k in range(4):
            vis = rng.random(9) < 0.7
            vis[[0, 8]] = True
            pos = np.where(vis[:, None], rng.uniform(0, 512, (9, 2)), np.nan)
            tracks.append(Track2D(k * 3, pos, vis, int(np.flatnonzero(vis)[0])))
        path = tmp_path / "t.trk"
        save_tracks2d(path, tracks)
        loaded = load_tracks2d(path)
        assert len(loaded) == 4
        for a, b in zip(tracks, loaded):
            assert a.track_id == b.track_id and a.query_frame == b.query_frame
            assert np.array_equal(a.visible, b.visible)
            assert_allclose(b.positions[b.visible], a.positions[a.visible].astype(np.float32))

    def test_tracks3d_round_trip_rebuilds_rays(self, tmp_path):
        poses = [straight_pose(i, (0.1 * i, 0, 0)) for i in range(5)]
        pts = np.tile([0.5, -0.2, 4.0], (5, 1))
        t = make_track3d(9, pts, np.ones(5, bool), np.stack([p.position for p in poses]))
        path = tmp_path / "t3.trk"
        save_tracks3d(path, [t])
        loaded = load_tracks3d(path, poses)[0]
        assert loaded.track_id == 9
        assert_allclose(loaded.points, pts, atol=1e-6)
        assert_allclose(np.linalg.norm(loaded.rays[loaded.visible], axis=1), 1.0, atol=1e-9)
        assert_allclose(loaded.camera_centers, t.camera_centers)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.trk"
        path.write_bytes(b"XXXX" + b"\0" * 8)
        with pytest.raises(ValueError, match="magic"):
            load_tracks2d(path)

    def test_mixed_lengths_rejected(self, tmp_path):
        a = constant_track(0, (1.0, 1.0), n=4)
        b = constant_track(1, (2.0, 2.0), n=6)
        with pytest.raises(ValueError):
            save_tracks2d(tmp_path / "x.trk", [a, b])


class TestTrack2DValidation:
    def test_needs_two_visible(self):
        with pytest.raises(ValueError):
            Track2D(0, np.zeros((4, 2)), np.array([True, False, False, False]), 0)

    def test_nonfinite_visible_position_rejected(self):
        pos = np.zeros((4, 2))
        pos[1] = np.nan
        with pytest.raises(ValueError):
            Track2D(0, pos, np.ones(4, bool), 0)
