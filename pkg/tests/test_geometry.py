import numpy as np
import pytest

from mvparse import geometry
from mvparse.geometry import (CameraCalibration, back_project, fuse_and_clean,
                              knn_mean_distances, look_at, project,
                              project_points, visibility_filter)

from conftest import identity_calib


def random_calib(rng, size=(64, 48)):
    axis = rng.normal(size=3)
    eye = rng.normal(size=3) * 2.0
    target = eye + rng.normal(size=3) + np.array([0.0, 0.0, -3.0])
    R, t = look_at(eye, target)
    w, h = size
    return CameraCalibration("r", fx=rng.uniform(40, 90), fy=rng.uniform(40, 90),
                             cx=(w - 1) / 2 + rng.uniform(-2, 2),
                             cy=(h - 1) / 2 + rng.uniform(-2, 2),
                             rotation=R, translation=t, width=w, height=h)


class TestProject:
    def test_principal_ray(self):
        calib = identity_calib(f=500.0, size=(640, 480))
        pr = project((0.0, 0.0, 2.0), calib)
        assert (pr.u, pr.v, pr.z) == (320.0, 240.0, 2.0)
        assert pr.valid

    def test_offset_point(self):
        calib = identity_calib(f=500.0, size=(640, 480))
        pr = project((0.1, 0.0, 2.0), calib)
        assert pr.u == pytest.approx(345.0)
        assert pr.v == pytest.approx(240.0)

    def test_behind_camera_invalid(self):
        calib = identity_calib()
        assert not project((0.0, 0.0, -1.0), calib).valid

    def test_nonfinite_point_rejected(self):
        with pytest.raises(ValueError, match="invalid point"):
            project((np.nan, 0.0, 1.0), identity_calib())

    def test_outside_image_invalid(self):
        calib = identity_calib(f=500.0, size=(640, 480))
        assert not project((10.0, 0.0, 2.0), calib).valid


class TestBackProject:
    def test_inverse_of_project(self):
        calib = identity_calib(f=500.0, size=(640, 480))
        p = back_project(345.0, 240.0, 2.0, calib)
        np.testing.assert_allclose(p, [0.1, 0.0, 2.0], atol=1e-12)

    def test_principal_point_ray(self):
        calib = identity_calib(f=500.0, size=(640, 480))
        np.testing.assert_allclose(back_project(320.0, 240.0, 3.5, calib),
                                   [0.0, 0.0, 3.5], atol=1e-12)

    def test_zero_depth_rejected(self):
        with pytest.raises(ValueError, match="invalid depth"):
            back_project(10.0, 10.0, 0.0, identity_calib())

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            calib = random_calib(rng)
            u = rng.uniform(0, calib.width - 1e-6, 50)
            v = rng.uniform(0, calib.height - 1e-6, 50)
            d = rng.uniform(0.1, 20.0, 50)
            pts = np.stack([back_project(ui, vi, di, calib)
                            for ui, vi, di in zip(u, v, d)])
            u2, v2, z2, valid = project_points(pts, calib)
            assert valid.all()
            np.testing.assert_allclose(u2, u, atol=1e-6)
            np.testing.assert_allclose(v2, v, atol=1e-6)
            np.testing.assert_allclose(z2, d, atol=1e-9)

    def test_rigid_invariance(self):
        rng = np.random.default_rng(1)
        calib = random_calib(rng)
        pts = rng.normal(size=(30, 3))
        u1, v1, z1, ok1 = project_points(pts, calib)
        # same rigid motion applied to the world and to the extrinsics
        Rq, _ = look_at(rng.normal(size=3), rng.normal(size=3))
        s = rng.normal(size=3)
        pts2 = pts @ Rq.T + s
        R2 = calib.rotation @ Rq.T
        t2 = calib.translation - R2 @ s
        calib2 = CameraCalibration("m", fx=calib.fx, fy=calib.fy, cx=calib.cx,
                                   cy=calib.cy, rotation=R2, translation=t2,
                                   width=calib.width, height=calib.height)
        u2, v2, z2, ok2 = project_points(pts2, calib2)
        assert (ok1 == ok2).all()
        np.testing.assert_allclose(u2[ok1], u1[ok1], atol=1e-9)
        np.testing.assert_allclose(v2[ok1], v1[ok1], atol=1e-9)
        np.testing.assert_allclose(z2, z1, atol=1e-9)


class TestCalibrationValidation:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError, match="orthonormal"):
            CameraCalibration("x", 1, 1, 0, 0, np.eye(3) * 1.001, np.zeros(3), 4, 4)

    def test_rejects_reflection(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError, match="orthonormal"):
            CameraCalibration("x", 1, 1, 0, 0, R, np.zeros(3), 4, 4)

    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError, match="focal"):
            CameraCalibration("x", 0, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(ValueError, match="principal"):
            CameraCalibration("x", 1, 1, 9, 0, np.eye(3), np.zeros(3), 4, 4)


class TestFuseAndClean:
    def one_pixel_view(self, depth_value, calib):
        d = np.zeros((calib.height, calib.width))
        d[calib.height // 2, calib.width // 2] = depth_value
        return d, calib

    def test_concatenates_views(self):
        c1 = identity_calib("a", f=10.0, size=(8, 8))
        R, t = look_at(np.array([0.0, 3.0, 0.0]), np.zeros(3))
        c2 = CameraCalibration("b", 10, 10, 4, 4, R, t, 8, 8)
        cloud = fuse_and_clean([self.one_pixel_view(2.0, c1),
                                self.one_pixel_view(1.5, c2)], k=5)
        assert len(cloud) == 2

    def test_empty_views_error(self):
        with pytest.raises(ValueError, match="no views"):
            fuse_and_clean([])

    def test_all_invalid_gives_empty_cloud(self):
        calib = identity_calib("a", size=(8, 8))
        cloud = fuse_and_clean([(np.zeros((8, 8)), calib)], k=5)
        assert len(cloud) == 0

    def test_outlier_removed_matches_brute_force(self):
        rng = np.random.default_rng(3)
        calib = identity_calib("a", f=100.0, size=(16, 16))
        # 10 clustered points within 1 cm + 1 far point, all on one view ray grid
        pts_cam = np.concatenate([
            rng.uniform(-0.005, 0.005, (10, 3)) + np.array([0.0, 0.0, 2.0]),
            [[0.0, 0.0, 7.0]],
        ])
        depth = np.zeros((16, 16))
        u = 100.0 * pts_cam[:, 0] / pts_cam[:, 2] + 8.0
        v = 100.0 * pts_cam[:, 1] / pts_cam[:, 2] + 8.0
        cols = np.floor(u + 0.5).astype(int)
        rows = np.floor(v + 0.5).astype(int)
        # spread the cluster over distinct pixels so all 11 points survive fusion
        for i, (r, c) in enumerate(zip(rows, cols)):
            depth[(r + i) % 16, (c + 2 * i) % 16] = pts_cam[i, 2]
        cloud_dirty = fuse_and_clean([(depth, calib)], k=50)  # k > n: no clean
        assert len(cloud_dirty) == 11
        cloud = fuse_and_clean([(depth, calib)], k=5, std_ratio=1.0)
        # brute-force oracle
        pos = cloud_dirty.positions
        d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        mean_k = np.sort(d, axis=1)[:, :5].mean(axis=1)
        keep = mean_k <= mean_k.mean() + 1.0 * mean_k.std()
        assert len(cloud) == keep.sum()
        far = pos[:, 2].argmax()
        assert not keep[far]

    def test_small_cloud_skips_cleaning(self):
        calib = identity_calib("a", size=(8, 8))
        depth = np.zeros((8, 8))
        depth[2, 2] = 1.0
        depth[5, 5] = 9.0
        cloud = fuse_and_clean([(depth, calib)], k=20)
        assert len(cloud) == 2

    def test_permutation_equivariant(self, scene3):
        views = [(v.depth, c, v.rgb) for v, c in zip(scene3.views, scene3.calibrations)]
        a = fuse_and_clean(views, k=10, stride=4)
        b = fuse_and_clean(views[::-1], k=10, stride=4)
        sa = set(map(tuple, np.round(a.positions, 9)))
        sb = set(map(tuple, np.round(b.positions, 9)))
        assert sa == sb

    def test_knn_matches_brute_force(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(200, 3))
        fast = knn_mean_distances(pts, 7)
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        slow = np.sort(d, axis=1)[:, :7].mean(axis=1)
        np.testing.assert_allclose(fast, slow, rtol=1e-12)


class TestVisibilityFilter:
    def setup_method(self):
        self.calib = identity_calib("a", f=100.0, size=(32, 32))
        self.depth = np.full((32, 32), 2.2)

    def test_within_beta_retained(self):
        idx = visibility_filter([[0.0, 0.0, 2.0]], self.depth, self.calib, 0.3)
        assert list(idx) == [0]

    def test_occluded_excluded(self):
        depth = np.full((32, 32), 1.5)
        idx = visibility_filter([[0.0, 0.0, 2.0]], depth, self.calib, 0.3)
        assert list(idx) == []

    def test_invalid_depth_excluded(self):
        idx = visibility_filter([[0.0, 0.0, 2.0]], np.zeros((32, 32)),
                                self.calib, 0.3)
        assert list(idx) == []

    def test_nonpositive_beta_rejected(self):
        with pytest.raises(ValueError, match="beta"):
            visibility_filter([[0.0, 0.0, 2.0]], self.depth, self.calib, 0.0)

    def test_infinite_beta_keeps_all_valid(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-0.5, 0.5, (200, 3))
        pts[:, 2] = rng.uniform(-1.0, 5.0, 200)  # some behind the camera
        depth = rng.uniform(0.5, 4.0, (32, 32))
        depth[rng.random((32, 32)) < 0.3] = 0.0
        idx = visibility_filter(pts, depth, self.calib, 1e9)
        u, v, z, valid = project_points(pts, self.calib)
        expect = []
        for i in np.flatnonzero(valid):
            r = int(np.floor(v[i] + 0.5))
            c = int(np.floor(u[i] + 0.5))
            r = min(max(r, 0), 31)
            c = min(max(c, 0), 31)
            if depth[r, c] > 0:
                expect.append(i)
        assert list(idx) == expect

    def test_beta_monotone(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(-0.3, 0.3, (100, 3))
        pts[:, 2] = rng.uniform(0.5, 4.0, 100)
        depth = rng.uniform(0.5, 4.0, (32, 32))
        prev = set()
        for beta in (0.05, 0.1, 0.3, 1.0, 10.0):
            cur = set(visibility_filter(pts, depth, self.calib, beta))
            assert prev <= cur
            prev = cur
