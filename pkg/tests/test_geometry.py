import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from tracklift.geometry import (
    CameraModel,
    CameraPose,
    PixelPoint,
    RigCalibration,
    load_camera_model,
    load_poses,
    load_rig,
    project,
    project_points,
    rectify_rig,
    reproject_image,
    save_camera_model,
    save_poses,
    save_rig,
    unproject,
    unproject_points,
)
from util import random_rotation, rot_x, rot_y

MODELS = {
    "perspective": CameraModel.perspective(512, 512, 60.0),
    "fisheye": CameraModel.fisheye(512, 512, 140.0),
    "equirect": CameraModel.equirect(512, 256, 180.0, 90.0),
}


def identity_pose(frame=0):
    return CameraPose(frame, np.zeros(3), np.eye(3))


class TestProject:
    @pytest.mark.parametrize("model", MODELS.values(), ids=MODELS.keys())
    def test_optical_axis_hits_principal_point(self, model):
        pose = CameraPose(0, np.array([0.3, -0.2, 1.0]), rot_y(25.0) @ rot_x(-10.0))
        point = pose.position + pose.orientation @ np.array([0.0, 0.0, 1.0])
        px, in_front = project(point, pose, model)
        assert in_front
        assert_allclose([px.u, px.v], model.principal_point, atol=1e-9)

    def test_pinhole_point_lands_off_image(self):
        model = CameraModel.perspective(512, 512, 2 * math.degrees(math.atan(0.5)))
        assert_allclose(model.focal, 512.0)
        px, in_front = project([1.0, 0.0, 1.0], identity_pose(), model)
        assert in_front
        assert_allclose([px.u, px.v], [768.0, 256.0], atol=1e-9)
        assert not model.contains(px.u, px.v)

    def test_fisheye_fov_edge_hits_boundary_circle(self):
        model = MODELS["fisheye"]
        theta = math.radians(70.0)
        ray = np.array([math.sin(theta), 0.0, math.cos(theta)])
        px, in_front = project(ray * 3.0, identity_pose(), model)
        assert in_front
        radius = math.hypot(px.u - 256.0, px.v - 256.0)
        assert_allclose(radius, 256.0, atol=1e-9)

    def test_behind_camera_flagged_not_raised(self):
        px, in_front = project([0.0, 0.0, -1.0], identity_pose(), MODELS["perspective"])
        assert not in_front

    def test_nonfinite_point_rejected(self):
        with pytest.raises(ValueError):
            project([np.nan, 0.0, 1.0], identity_pose(), MODELS["perspective"])

    def test_perspective_fov_consistency(self):
        # a ray at exactly half the horizontal FoV lands on the image edge
        model = MODELS["perspective"]
        theta = math.radians(model.fov_h / 2.0)
        px, _ = project([math.sin(theta), 0.0, math.cos(theta)], identity_pose(), model)
        assert_allclose(px.u, model.width, atol=1e-6)

    def test_rigid_equivariance(self):
        rng = np.random.default_rng(3)
        model = MODELS["perspective"]
        for _ in range(25):
            pose = CameraPose(0, rng.normal(size=3), random_rotation(rng))
            point = pose.position + pose.orientation @ (rng.normal(size=3) + [0, 0, 5])
            r_extra = random_rotation(rng)
            t_extra = rng.normal(size=3)
            moved_pose = CameraPose(0, r_extra @ pose.position + t_extra,
                                    r_extra @ pose.orientation)
            base, ok1 = project(point, pose, model)
            moved, ok2 = project(r_extra @ point + t_extra, moved_pose, model)
            assert ok1 and ok2
            assert_allclose([base.u, base.v], [moved.u, moved.v], atol=1e-9)


class TestUnproject:
    def test_principal_point_depth_two(self):
        p = unproject(PixelPoint(256.0, 256.0), 2.0, identity_pose(), MODELS["perspective"])
        assert_allclose(p, [0.0, 0.0, 2.0], atol=1e-12)

    def test_translated_pose_composes(self):
        pose = CameraPose(0, np.array([1.0, 0.0, 0.0]), np.eye(3))
        p = unproject(PixelPoint(256.0, 256.0), 2.0, pose, MODELS["perspective"])
        assert_allclose(p, [1.0, 0.0, 2.0], atol=1e-12)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(ValueError):
            unproject(PixelPoint(256.0, 256.0), 0.0, identity_pose(), MODELS["perspective"])

    @pytest.mark.parametrize("model", MODELS.values(), ids=MODELS.keys())
    def test_round_trip_random_pixels(self, model):
        rng = np.random.default_rng(11)
        pose = CameraPose(0, np.array([0.4, 0.1, -0.2]), rot_y(15.0))
        uv = np.stack([
            rng.uniform(1.0, model.width - 1.0, 300),
            rng.uniform(1.0, model.height - 1.0, 300),
        ], axis=1)
        if model.kind == "equidistant-fisheye":
            # the fisheye's valid pixel domain is the FoV disc, not the square
            r = np.linalg.norm(uv - model.principal_point, axis=1)
            uv = uv[r < model.width / 2.0 - 1.0]
        depths = rng.uniform(0.5, 10.0, uv.shape[0])
        world = unproject_points(uv, depths, pose, model)
        back, in_front = project_points(world, pose, model)
        assert in_front.all()
        assert np.abs(back - uv).max() < 1e-6


class TestRectifyRig:
    def test_nominal_rig_is_fixed_point(self):
        left = identity_pose()
        lrect, rrect, model = rectify_rig(left, RigCalibration.nominal())
        assert_allclose(lrect.orientation, np.eye(3), atol=1e-12)
        assert_allclose(rrect.orientation, np.eye(3), atol=1e-12)
        assert_allclose(np.linalg.norm(rrect.position - lrect.position), 0.063, rtol=1e-12)
        assert_allclose(model.principal_point, [256.0, 256.0])

    def test_rotated_rig_post_conditions(self):
        rig = RigCalibration(np.array([0.0631, 0.001, -0.002]), rot_y(2.0), 0.063)
        left = CameraPose(0, np.array([0.5, -0.1, 2.0]), rot_y(-20.0) @ rot_x(5.0))
        lrect, rrect, _ = rectify_rig(left, rig)
        assert_allclose(lrect.orientation, rrect.orientation, atol=1e-15)
        baseline = rrect.position - lrect.position
        r = lrect.orientation
        # baseline is the new x axis; optical axes perpendicular to it
        assert abs(baseline @ r[:, 1]) < 1e-12
        assert abs(baseline @ r[:, 2]) < 1e-12
        assert_allclose(np.linalg.norm(baseline), np.linalg.norm(rig.relative_position), rtol=1e-12)

    def test_epipolar_rows_align(self):
        rig = RigCalibration(np.array([0.063, 0.002, 0.001]), rot_y(1.5) @ rot_x(-0.7), 0.063)
        left = CameraPose(0, np.array([1.0, 0.5, -0.3]), rot_y(30.0))
        lrect, rrect, model = rectify_rig(left, rig)
        rng = np.random.default_rng(5)
        for _ in range(50):
            point = lrect.position + lrect.orientation @ (
                rng.normal(size=3) * [0.5, 0.5, 0.0] + [0, 0, rng.uniform(1.0, 8.0)]
            )
            pl, okl = project(point, lrect, model)
            pr, okr = project(point, rrect, model)
            assert okl and okr
            assert abs(pl.v - pr.v) < 1e-6
            assert pl.u > pr.u  # positive disparity in front of the rig

    def test_zero_baseline_rejected(self):
        with pytest.raises(ValueError):
            rig = RigCalibration(np.array([1e-15, 0.0, 0.0]), np.eye(3), 0.063)
            rectify_rig(identity_pose(), rig)


class TestReprojectImage:
    def test_identity_mapping_is_exact(self):
        model = CameraModel.perspective(64, 64, 60.0)
        rng = np.random.default_rng(0)
        img = rng.uniform(0.0, 255.0, (64, 64))
        out = reproject_image(img, model, model, np.eye(3))
        interior = out[1:-1, 1:-1]
        assert np.isfinite(interior).all()
        assert np.array_equal(interior, img[1:-1, 1:-1])

    def test_constant_image_stays_constant(self):
        src = CameraModel.equirect(128, 64)
        dst = CameraModel.perspective(64, 64, 60.0)
        out = reproject_image(np.full((64, 128), 7.25), src, dst, np.eye(3))
        valid = np.isfinite(out)
        assert valid.any()
        assert_allclose(out[valid], 7.25, atol=1e-12)

    def test_checkerboard_round_trip_regression(self):
        # equirect -> 60 deg perspective -> equirect, compared on pixels that
        # survive both mappings; resampling error stays under 2 intensity levels
        src_model = CameraModel.equirect(256, 128, 180.0, 90.0)
        persp = CameraModel.perspective(384, 384, 60.0)
        yy, xx = np.meshgrid(np.arange(128), np.arange(256), indexing="ij")
        checker = 255.0 * (((xx // 32) + (yy // 32)) % 2)
        fwd = reproject_image(checker, src_model, persp, np.eye(3))
        fwd_filled = np.where(np.isfinite(fwd), fwd, 0.0)
        back = reproject_image(fwd_filled, persp, src_model, np.eye(3))
        valid = np.isfinite(back)
        # only the central region round trips through the narrow FoV
        assert valid.sum() > 1000
        mae = np.abs(back[valid] - checker[valid]).mean()
        assert mae < 2.0


class TestValidation:
    def test_bad_rotation_rejected(self):
        bad = np.eye(3)
        bad[0, 0] = 1.001
        with pytest.raises(ValueError):
            CameraPose(0, np.zeros(3), bad)

    def test_reflection_rejected(self):
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            CameraPose(0, np.zeros(3), refl)

    def test_fov_bounds(self):
        with pytest.raises(ValueError):
            CameraModel.perspective(512, 512, 180.0)
        with pytest.raises(ValueError):
            CameraModel.fisheye(512, 512, 0.0)

    def test_equirect_metadata_defaults(self):
        model = CameraModel.equirect_from_metadata(512, 512)
        assert model.fov_h == 180.0 and model.fov_v == 180.0
        assert_allclose(model.principal_point, [256.0, 256.0])

    def test_equirect_metadata_asymmetric_crop(self):
        model = CameraModel.equirect_from_metadata(512, 512, start_yaw=-60.0, end_yaw=120.0)
        # yaw 0 must still project to the principal point column
        px, _ = project([0.0, 0.0, 2.0], identity_pose(), model)
        assert_allclose(px.u, model.principal_point[0], atol=1e-9)
        assert_allclose(model.principal_point[0], 512 * 60.0 / 180.0)


class TestFiles:
    def test_pose_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        poses = [CameraPose(i, rng.normal(size=3), random_rotation(rng)) for i in range(4)]
        path = tmp_path / "poses.json"
        save_poses(path, poses)
        loaded = load_poses(path)
        for a, b in zip(poses, loaded):
            assert a.frame_index == b.frame_index
            assert_allclose(a.position, b.position)
            assert_allclose(a.orientation, b.orientation)

    def test_rig_round_trip(self, tmp_path):
        rig = RigCalibration(np.array([0.062, 0.001, 0.0]), rot_y(1.0), 0.063)
        path = tmp_path / "rig.json"
        save_rig(path, rig)
        loaded = load_rig(path)
        assert_allclose(loaded.relative_position, rig.relative_position)
        assert loaded.baseline_m == rig.baseline_m

    def test_model_round_trip_has_kind_tag(self, tmp_path):
        for model in MODELS.values():
            path = tmp_path / "model.json"
            save_camera_model(path, model)
            with open(path) as f:
                assert "kind" in json.load(f)
            loaded = load_camera_model(path)
            assert loaded.kind == model.kind
            assert (loaded.width, loaded.height) == (model.width, model.height)
            assert (loaded.fov_h, loaded.fov_v) == (model.fov_h, model.fov_v)
            assert loaded.focal == model.focal
            assert_allclose(loaded.principal_point, model.principal_point)
