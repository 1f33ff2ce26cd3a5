from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soac.geometry import RigidTransform, Trajectory, rot_z
from soac.sensors import CameraFrame, CameraSpec, LidarSpec, Rig, camera_rays, lidar_rays


def cam(w=100, h=100, f=100.0, cx=50.0, cy=50.0, sid="c"):
    return CameraSpec(sid, w, h, f, f, cx, cy)


class TestCameraSpec:
    @pytest.mark.parametrize("kw", [dict(f=0.0), dict(cx=0.0), dict(cy=100.0)])
    def test_invalid_intrinsics(self, kw):
        with pytest.raises(ValueError):
            cam(**kw)

    def test_pixel_grid_layout(self):
        g = cam(w=4, h=3, cx=2, cy=1.5).pixel_grid()
        assert g.shape == (3, 4, 2)
        np.testing.assert_array_equal(g[2, 1], [1, 2])


class TestCameraRays:
    def test_optical_axis(self):
        r = camera_rays(cam(), RigidTransform.identity(), [(49.5, 49.5)])
        np.testing.assert_allclose(r.directions[0], [0, 0, 1], atol=1e-15)

    def test_hand_pinhole(self):
        # (149.5 + 0.5 - 50) / 100 = 1, so the ray bisects x and z
        r = camera_rays(cam(w=200), RigidTransform.identity(), [(149.5, 49.5)])
        h = math.sqrt(0.5)
        np.testing.assert_allclose(r.directions[0], [h, 0, h], atol=1e-15)

    def test_rotated_pose(self):
        pose = RigidTransform.from_rt(rot_z(math.pi / 2), [1, 2, 3])
        pix = np.array([[10, 20], [49.5, 49.5], [90, 5]])
        a = camera_rays(cam(), RigidTransform.identity(), pix)
        b = camera_rays(cam(), pose, pix)
        np.testing.assert_allclose(b.directions, a.directions @ rot_z(math.pi / 2).T, atol=1e-15)
        np.testing.assert_allclose(b.origins, np.tile([1, 2, 3], (3, 1)))

    def test_unit_norm(self):
        c = cam(w=40, h=30, f=25, cx=20, cy=15)
        r = camera_rays(c, RigidTransform.from_rotvec([0.3, -0.2, 1.0]), c.pixel_grid().reshape(-1, 2))
        np.testing.assert_allclose(np.linalg.norm(r.directions, axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("px", [(-1, 0), (100, 0), (0, 99.6)])
    def test_out_of_bounds(self, px):
        with pytest.raises(IndexError):
            camera_rays(cam(), RigidTransform.identity(), [px])

    @given(st.integers(-10, 10), st.integers(-10, 10))
    def test_principal_point_shift_invariance(self, du, dv):
        a = cam(w=200, h=200, cx=80, cy=90)
        b = cam(w=200, h=200, cx=80 + du, cy=90 + dv)
        pix = np.array([[30.0, 40.0], [100.0, 120.0]])
        ra = camera_rays(a, RigidTransform.identity(), pix)
        rb = camera_rays(b, RigidTransform.identity(), pix + [du, dv])
        np.testing.assert_allclose(ra.directions, rb.directions, atol=1e-14)


class TestLidarRays:
    def test_four_azimuths(self):
        r = lidar_rays(LidarSpec("l", 4, (0.0,), 10.0), RigidTransform.identity())
        np.testing.assert_allclose(r.directions, [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], atol=1e-15)

    def test_elevation(self):
        r = lidar_rays(LidarSpec("l", 8, (math.radians(45),), 10.0), RigidTransform.identity())
        h = math.sqrt(0.5)
        np.testing.assert_allclose(r.directions[0], [h, 0, h], atol=1e-15)

    def test_translation_only_shifts_origins(self):
        spec = LidarSpec("l", 16, (-0.1, 0.0, 0.2), 10.0)
        a = lidar_rays(spec, RigidTransform.identity())
        b = lidar_rays(spec, RigidTransform(translation=[3, -1, 2]))
        np.testing.assert_array_equal(a.directions, b.directions)
        np.testing.assert_array_equal(b.origins, np.tile([3, -1, 2], (len(b), 1)))

    @given(st.integers(4, 64), st.integers(1, 6))
    def test_count(self, n_az, n_el):
        spec = LidarSpec("l", n_az, tuple(np.linspace(-0.2, 0.2, n_el)), 5.0)
        assert len(lidar_rays(spec, RigidTransform.identity())) == n_az * n_el == spec.n_beams

    def test_invalid(self):
        with pytest.raises(ValueError):
            LidarSpec("l", 3, (0.0,), 1.0)
        with pytest.raises(ValueError):
            LidarSpec("l", 4, (0.0,), 0.0)


def _traj():
    return Trajectory([0, 1], [RigidTransform.identity(), RigidTransform(translation=[1, 0, 0])])


class TestRig:
    def test_valid(self):
        rig = Rig("a", [cam(sid="a"), cam(sid="b")], [LidarSpec("l", 4, (0.0,), 5.0)],
                  {"a": RigidTransform.identity(), "b": RigidTransform.identity(), "l": RigidTransform.identity()},
                  {"a": 0.0, "b": 0.1, "l": 0.0}, _traj())
        assert rig.non_reference_ids == ["b", "l"]
        assert rig.sensor("l").kind == "lidar"
        with pytest.raises(KeyError):
            rig.camera("l")

    def test_reference_must_be_identity(self):
        with pytest.raises(ValueError):
            Rig("a", [cam(sid="a")], [], {"a": RigidTransform(translation=[0.1, 0, 0])}, {"a": 0.0}, _traj())
        with pytest.raises(ValueError):
            Rig("a", [cam(sid="a")], [], {"a": RigidTransform.identity()}, {"a": 0.01}, _traj())

    def test_unique_ids(self):
        with pytest.raises(ValueError):
            Rig("a", [cam(sid="a"), cam(sid="a")], [], {"a": RigidTransform.identity()}, {"a": 0.0}, _traj())


class TestCameraFrame:
    def test_range_and_shape_checks(self):
        with pytest.raises(ValueError):
            CameraFrame("c", 0.0, np.full((2, 2, 3), 1.5), np.ones((2, 2), bool))
        with pytest.raises(ValueError):
            CameraFrame("c", 0.0, np.zeros((2, 2, 3)), np.ones((3, 2), bool))
