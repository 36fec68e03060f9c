"""Camera model, frustum overlap, alpha blend and time warp tests."""

import math

import numpy as np
import pytest

from sstu import compositing as comp
from sstu.compositing import (CameraRig, CameraView, CompositeInputs, Intrinsics,
                              Pose, alpha_composite, default_rig, frustum_overlap,
                              identity_pose, latency_budget, load_camera_config,
                              projection, project_point, rotation_pitch,
                              rotation_yaw, save_camera_config, time_warp,
                              unproject_pixel)

INTR = Intrinsics(fx=300.0, fy=300.0, cx=320.0, cy=180.0, width=640, height=360,
                  near=0.1, far=100.0)


class TestIntrinsicsAndPose:
    def test_validation(self):
        with pytest.raises(ValueError, match="focal"):
            Intrinsics(0.0, 1.0, 0, 0, 10, 10)
        with pytest.raises(ValueError, match="near"):
            Intrinsics(1.0, 1.0, 0, 0, 10, 10, near=2.0, far=1.0)

    def test_pose_orthonormality_enforced(self):
        with pytest.raises(ValueError, match="orthonormal"):
            Pose(np.ones((3, 3)), np.zeros(3))
        with pytest.raises(ValueError, match="determinant"):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        Pose(rotation_yaw(15.0), np.zeros(3))  # valid


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        for depth in (0.2, 1.0, 42.0):
            u, v, _ = project_point(INTR, (0.0, 0.0, depth))
            assert u == pytest.approx(INTR.cx)
            assert v == pytest.approx(INTR.cy)

    def test_horizontal_fov_via_frustum_edge_ray(self):
        # a ray at half the horizontal FOV must land on the image border
        half = INTR.hfov / 2.0
        x = math.tan(half)
        u, _, _ = project_point(INTR, (x, 0.0, 1.0))
        assert u == pytest.approx(INTR.width, abs=1e-9)
        u, _, _ = project_point(INTR, (-x, 0.0, 1.0))
        assert u == pytest.approx(0.0, abs=1e-9)
        assert INTR.hfov == pytest.approx(2.0 * math.atan(INTR.width / (2 * INTR.fx)))

    def test_depth_boundaries(self):
        _, _, z = project_point(INTR, (0, 0, INTR.near))
        assert z == pytest.approx(0.0, abs=1e-12)
        _, _, z = project_point(INTR, (0, 0, INTR.far))
        assert z == pytest.approx(1.0)
        _, _, z = project_point(INTR, (0, 0, INTR.near), depth_mode="reversed")
        assert z == pytest.approx(1.0)
        _, _, z = project_point(INTR, (0, 0, INTR.far), depth_mode="reversed")
        assert z == pytest.approx(0.0, abs=1e-12)

    def test_unknown_depth_mode_rejected(self):
        with pytest.raises(ValueError, match="depth_mode"):
            projection(INTR, depth_mode="sideways")

    def test_project_unproject_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.uniform(INTR.near * 1.1, INTR.far * 0.9)
            x = rng.uniform(-0.8, 0.8) * z
            y = rng.uniform(-0.5, 0.5) * z
            u, v, _ = project_point(INTR, (x, y, z))
            back = unproject_pixel(INTR, u, v, z)
            np.testing.assert_allclose(back, [x, y, z], rtol=1e-5)

    def test_behind_camera_rejected(self):
        with pytest.raises(ValueError, match="front"):
            project_point(INTR, (0.0, 0.0, -1.0))


class TestFrustumOverlap:
    def test_identical_cameras_full_viewport(self):
        r = frustum_overlap(INTR, identity_pose(), INTR, identity_pose())
        assert (r.x0, r.y0, r.x1, r.y1) == (0.0, 0.0, INTR.width, INTR.height)

    def test_eye_double_fov_gives_centered_half_rect(self):
        # eye tan(half fov) is twice the zed's at equal aspect: the zed
        # content spans exactly the middle half of the eye viewport
        zed = Intrinsics(fx=400.0, fy=400.0, cx=256.0, cy=256.0, width=512, height=512)
        eye = Intrinsics(fx=200.0, fy=200.0, cx=256.0, cy=256.0, width=512, height=512)
        r = frustum_overlap(zed, identity_pose(), eye, identity_pose())
        assert r.x0 == pytest.approx(128.0, abs=1.0)
        assert r.x1 == pytest.approx(384.0, abs=1.0)
        assert r.y0 == pytest.approx(128.0, abs=1.0)
        assert r.y1 == pytest.approx(384.0, abs=1.0)
        # corner-reprojection oracle: zed pixel (0,0) direction -> eye pixel
        dx = (0.0 - zed.cx) / zed.fx
        expect_u = eye.fx * dx + eye.cx
        assert r.x0 == pytest.approx(expect_u)

    def test_narrow_eye_full_viewport(self):
        zed = Intrinsics(fx=200.0, fy=200.0, cx=256.0, cy=256.0, width=512, height=512)
        eye = Intrinsics(fx=400.0, fy=400.0, cx=256.0, cy=256.0, width=512, height=512)
        r = frustum_overlap(zed, identity_pose(), eye, identity_pose())
        assert (r.x0, r.y0, r.x1, r.y1) == (0.0, 0.0, 512.0, 512.0)

    def test_rotated_apart_shrinks_then_empties(self):
        zed = Intrinsics(fx=400.0, fy=400.0, cx=256.0, cy=256.0, width=512, height=512)
        pose_a = identity_pose()
        small = Pose(rotation_yaw(10.0), np.zeros(3))
        r_small = frustum_overlap(zed, small, zed, pose_a)
        assert 0.0 < r_small.width < 512.0
        far = Pose(rotation_yaw(120.0), np.zeros(3))
        r_far = frustum_overlap(zed, far, zed, pose_a)
        assert r_far.is_empty

    def test_monotone_in_eye_fov(self):
        # widening the eye fov never shrinks the covered share of the zed
        # content; compare in tangent (angular) space, not eye pixels
        zed = Intrinsics(fx=400.0, fy=400.0, cx=256.0, cy=256.0, width=512, height=512)
        t_zed = (zed.width / 2.0) / zed.fx
        prev = -1.0
        for fx in (800.0, 400.0, 266.0, 200.0, 120.0):
            eye = Intrinsics(fx=fx, fy=fx, cx=256.0, cy=256.0, width=512, height=512)
            r = frustum_overlap(zed, identity_pose(), eye, identity_pose())
            tan_lo = max((r.x0 - eye.cx) / eye.fx, -t_zed)
            tan_hi = min((r.x1 - eye.cx) / eye.fx, t_zed)
            coverage = max(0.0, tan_hi - tan_lo) / (2.0 * t_zed)
            assert coverage >= prev - 1e-12
            prev = coverage
        assert prev == pytest.approx(1.0)


class TestAlphaComposite:
    def make_inputs(self, prob, video_depth=1.0, virtual_depth=2.0):
        h = w = 4
        video = np.tile(np.array([1.0, 0.0, 0.0], np.float32)[:, None, None], (1, h, w))
        virt = np.tile(np.array([0.0, 1.0, 0.0], np.float32)[:, None, None], (1, h, w))
        return CompositeInputs(
            video=video, prob=np.full((h, w), prob, np.float32),
            video_depth=np.full((h, w), video_depth, np.float32),
            virtual_rgb=virt, virtual_depth=np.full((h, w), virtual_depth, np.float32))

    def test_opaque_person_video_closer(self):
        out = alpha_composite(self.make_inputs(1.0))
        np.testing.assert_allclose(out[0], 1.0)
        np.testing.assert_allclose(out[1], 0.0)

    def test_zero_prob_gives_virtual(self):
        out = alpha_composite(self.make_inputs(0.0))
        np.testing.assert_allclose(out[0], 0.0)
        np.testing.assert_allclose(out[1], 1.0)

    def test_blend_arithmetic(self):
        out = alpha_composite(self.make_inputs(0.25))
        np.testing.assert_allclose(out[0], 0.25)
        np.testing.assert_allclose(out[1], 0.75)
        np.testing.assert_allclose(out[2], 0.0)

    def test_virtual_wins_z_test(self):
        out = alpha_composite(self.make_inputs(1.0, video_depth=3.0))
        np.testing.assert_allclose(out[1], 1.0)  # virtual green

    def test_tie_goes_to_virtual(self):
        out = alpha_composite(self.make_inputs(1.0, video_depth=2.0, virtual_depth=2.0))
        np.testing.assert_allclose(out[1], 1.0)

    def test_invalid_depth_is_far(self):
        inputs = self.make_inputs(1.0)
        inputs.video_depth[:] = np.nan
        out = alpha_composite(inputs)
        np.testing.assert_allclose(out[1], 1.0)
        inputs = self.make_inputs(1.0)
        inputs.video_depth[:] = -1.0
        out = alpha_composite(inputs)
        np.testing.assert_allclose(out[1], 1.0)

    def test_convex_combination_per_pixel(self):
        rng = np.random.default_rng(1)
        h = w = 8
        inputs = CompositeInputs(
            video=rng.uniform(0, 1, (3, h, w)).astype(np.float32),
            prob=rng.uniform(0, 1, (h, w)).astype(np.float32),
            video_depth=rng.uniform(0.5, 3.0, (h, w)).astype(np.float32),
            virtual_rgb=rng.uniform(0, 1, (3, h, w)).astype(np.float32),
            virtual_depth=np.full((h, w), 2.0, np.float32))
        out = alpha_composite(inputs)
        lo = np.minimum(inputs.video, inputs.virtual_rgb)
        hi = np.maximum(inputs.video, inputs.virtual_rgb)
        assert np.all(out >= lo - 1e-6) and np.all(out <= hi + 1e-6)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="prob"):
            CompositeInputs(video=np.zeros((3, 4, 4)), prob=np.zeros((4, 5)),
                            video_depth=np.zeros((4, 4)),
                            virtual_rgb=np.zeros((3, 4, 4)),
                            virtual_depth=np.zeros((4, 4)))


def smooth_frame(h, w, channels=3):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    base = 0.5 + 0.4 * np.sin(xs / 17.0) * np.cos(ys / 13.0)
    return np.stack([base * (0.4 + 0.2 * c) for c in range(channels)]).astype(np.float32)


class TestTimeWarp:
    def test_identity_bit_exact(self):
        frame = smooth_frame(64, 96)
        r = rotation_yaw(23.0)
        out = time_warp(frame, INTR, r, r)
        np.testing.assert_array_equal(out, frame)

    def test_small_yaw_shifts_center_pixels(self):
        intr = Intrinsics(fx=300.0, fy=300.0, cx=64.0, cy=64.0, width=128, height=128)
        frame = np.zeros((1, 128, 128), np.float32)
        frame[0, :, 64] = 1.0  # vertical line through the principal point
        out = time_warp(frame, intr, np.eye(3), rotation_yaw(1.0))
        expected_shift = intr.fx * math.tan(math.radians(1.0))
        row = out[0, 64]
        line_pos = float((np.arange(128) * row).sum() / row.sum())
        assert abs(abs(line_pos - 64.0) - expected_shift) <= 0.5

    def test_round_trip_mae(self):
        frame = smooth_frame(96, 96)
        intr = Intrinsics(fx=120.0, fy=120.0, cx=48.0, cy=48.0, width=96, height=96)
        r = rotation_yaw(2.0) @ rotation_pitch(1.0)
        warped = time_warp(frame, intr, np.eye(3), r)
        back = time_warp(warped, intr, r, np.eye(3))
        inner = (slice(None), slice(12, 84), slice(12, 84))
        mae = float(np.abs(back[inner] - frame[inner]).mean())
        assert mae <= 2.0 / 255.0

    def test_out_of_bounds_black(self):
        frame = np.ones((3, 64, 64), np.float32)
        out = time_warp(frame, Intrinsics(fx=60.0, fy=60.0, cx=32.0, cy=32.0,
                                          width=64, height=64),
                        np.eye(3), rotation_yaw(20.0))
        # content rotated away leaves one border black
        assert out[:, :, -1].max() == 0.0

    def test_non_orthonormal_rotation_rejected(self):
        with pytest.raises(ValueError, match="orthonormal"):
            time_warp(np.zeros((1, 8, 8)), INTR, np.eye(3) * 2.0, np.eye(3))


class TestLatencyBudget:
    def test_stage_sums(self):
        assert latency_budget(37, 6, 16) == 59
        assert latency_budget(37, 6, 23) == 66
        assert latency_budget(0, 0, 0) == 0

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            latency_budget(-1, 0, 0)


class TestCameraConfig:
    def test_round_trip(self, tmp_path):
        rig = default_rig()
        path = tmp_path / "cams.cfg"
        save_camera_config(rig, path)
        back = load_camera_config(path)
        for name in ("zed_left", "zed_right", "eye_left", "eye_right"):
            a, b = getattr(rig, name), getattr(back, name)
            assert a.intrinsics == b.intrinsics
            np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
            np.testing.assert_array_equal(a.pose.translation, b.pose.translation)

    def test_missing_camera_rejected(self, tmp_path):
        rig = default_rig()
        path = tmp_path / "cams.cfg"
        save_camera_config(rig, path)
        text = path.read_text()
        path.write_text(text.split("camera cam_eye_right")[0])
        with pytest.raises(ValueError, match="cam_eye_right"):
            load_camera_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cams.cfg"
        path.write_text("camera cam_zed_left\nfz 100\n")
        with pytest.raises(ValueError, match="unknown"):
            load_camera_config(path)

    def test_rig_views_by_name(self):
        rig = default_rig()
        assert rig.view("cam_zed_left") is rig.zed_left
        assert rig.view("cam_eye_right") is rig.eye_right
