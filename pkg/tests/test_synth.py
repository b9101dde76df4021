import numpy as np
import pytest

from mvparse import synth
from mvparse.geometry import back_project, project, project_points, round_half_up
from mvparse.metrics import instance_boxes, overlap_degree
from mvparse.synth import (Capsule, PlacementError, build_skeleton,
                           generate_scene, make_ring_cameras,
                           render_capsule_view, skeleton_capsules)


class TestGenerateScene:
    def test_deterministic(self):
        a = generate_scene(2, 3, 0.3, image_size=64, seed=11)
        b = generate_scene(2, 3, 0.3, image_size=64, seed=11)
        for va, vb in zip(a.views, b.views):
            assert np.array_equal(va.rgb, vb.rgb)
            assert np.array_equal(va.depth, vb.depth)
            assert np.array_equal(va.instance_mask, vb.instance_mask)
            assert np.array_equal(va.part_mask, vb.part_mask)

    def test_single_person_zero_overlap(self):
        scene = generate_scene(1, 4, 0.0, image_size=64, seed=3)
        for view in scene.views:
            boxes = list(instance_boxes(view.instance_mask).values())
            assert overlap_degree(boxes) == 0.0

    def test_overlap_target_hit(self):
        scene = generate_scene(2, 2, 0.6, image_size=96, seed=7)
        boxes = list(instance_boxes(scene.views[0].instance_mask).values())
        assert 0.5 <= overlap_degree(boxes) <= 0.7

    def test_unreachable_target_raises(self):
        with pytest.raises(PlacementError, match="placement failed"):
            generate_scene(1, 1, 0.9, image_size=48, seed=0, max_retries=20)

    def test_all_parts_present(self):
        scene = generate_scene(1, 1, 0.0, image_size=96, seed=1)
        assert set(np.unique(scene.views[0].part_mask)) == set(range(7))


class TestRenderView:
    def test_empty_scene(self):
        calib = make_ring_cameras(1, 32)[0]
        view = render_capsule_view([], calib)
        assert (view.depth == 0).all()
        assert (view.instance_mask == 0).all()

    def test_sphere_depth_closed_form(self):
        # camera aimed straight at a sphere: center depth = distance - radius
        calib = make_ring_cameras(1, 64, ring_radius=3.0, camera_height=1.0,
                                  target=(0.0, 0.0, 1.0))[0]
        cap = Capsule(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]),
                      0.25, 5, 1)
        view = render_capsule_view([cap], calib)
        r = int(round_half_up(calib.cy))
        c = int(round_half_up(calib.cx))
        assert view.instance_mask[r, c] == 5
        assert view.depth[r, c] == pytest.approx(3.0 - 0.25, abs=1e-9)

    def test_capsule_body_depth_closed_form(self):
        # perpendicular view of a vertical capsule through its midpoint
        calib = make_ring_cameras(1, 64, ring_radius=2.5, camera_height=1.0,
                                  target=(0.0, 0.0, 1.0))[0]
        cap = Capsule(np.array([0.0, 0.0, 0.2]), np.array([0.0, 0.0, 1.8]),
                      0.1, 1, 2)
        view = render_capsule_view([cap], calib)
        r = int(round_half_up(calib.cy))
        c = int(round_half_up(calib.cx))
        assert view.depth[r, c] == pytest.approx(2.5 - 0.1, abs=1e-9)

    def test_depth_ordering_occlusion(self):
        calib = make_ring_cameras(1, 64, ring_radius=3.0, camera_height=1.0,
                                  target=(0.0, 0.0, 1.0))[0]
        # same axis, A nearer to the camera (+x side)
        a = Capsule(np.array([1.0, 0.0, 0.2]), np.array([1.0, 0.0, 1.8]), 0.3, 1, 2)
        b = Capsule(np.array([0.0, 0.0, 0.2]), np.array([0.0, 0.0, 1.8]), 0.3, 2, 2)
        view = render_capsule_view([a, b], calib)
        a_alone = render_capsule_view([a], calib)
        covered = a_alone.instance_mask == 1
        assert covered.any()
        assert (view.instance_mask[covered] == 1).all()

    def test_masks_agree_with_depth(self, scene3):
        for view in scene3.views:
            labeled = view.instance_mask > 0
            assert ((view.depth > 0) == labeled).all()
            assert ((view.part_mask > 0) == labeled).all()

    def test_render_view_checks_ownership(self, scene3):
        foreign = make_ring_cameras(3, 16, ring_radius=9.9)[2]
        with pytest.raises(ValueError, match="belong"):
            synth.render_view(scene3, foreign)


class TestMultiViewConsistency:
    def test_cross_view_depth_agreement(self, scene3):
        """Back-projected labeled pixels land near the visible surface of
        other views whenever they are visible there."""
        rng = np.random.default_rng(0)
        vi, vj = 0, 2
        view_i = scene3.views[vi]
        view_j = scene3.views[vj]
        calib_i = scene3.calibrations[vi]
        calib_j = scene3.calibrations[vj]
        max_r = max(max(r.values()) for r in scene3.radii.values())
        rows, cols = np.nonzero(view_i.instance_mask > 0)
        take = rng.choice(len(rows), size=200, replace=False)
        checked = 0
        for r, c in zip(rows[take], cols[take]):
            p = back_project(float(c), float(r), view_i.depth[r, c], calib_i)
            u, v, z, valid = project_points(p[None], calib_j)
            if not valid[0]:
                continue
            rj = int(round_half_up(v[0]))
            cj = int(round_half_up(u[0]))
            dj = view_j.depth[min(rj, 127), min(cj, 127)]
            if dj == 0:
                continue
            if dj - z[0] > -1e-9:  # visible in j (not occluded)
                assert abs(z[0] - dj) < max_r
                checked += 1
        assert checked > 50


class TestSkeleton:
    def test_required_joints_present(self):
        rng = np.random.default_rng(0)
        skel = build_skeleton(1, (0.0, 0.0), 0.3, 1.7, rng)
        for name in synth.JOINT_NAMES:
            assert name in skel.joints

    def test_ten_capsules_with_positive_bones(self):
        rng = np.random.default_rng(0)
        skel = build_skeleton(1, (0.0, 0.0), 0.0, 1.7, rng)
        caps = skeleton_capsules(skel, synth._BASE_RADII)
        assert len(caps) == 10
        for cap in caps[1:]:  # head sphere is degenerate by design
            assert np.linalg.norm(cap.pb - cap.pa) > 0
        assert caps[0].part_id == 1  # head label
