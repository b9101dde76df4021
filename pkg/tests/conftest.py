import numpy as np
import pytest

from mvparse import annotation, geometry, synth


@pytest.fixture(scope="session")
def scene3():
    """3-person occluded scene used by several suites."""
    return synth.generate_scene(3, 6, 0.6, image_size=128, seed=7)


@pytest.fixture(scope="session")
def labeled_cloud(scene3):
    views = [(v.depth, c, v.rgb) for v, c in zip(scene3.views, scene3.calibrations)]
    cloud = geometry.fuse_and_clean(views, k=20, std_ratio=2.0, stride=2)
    return annotation.label_points_by_nearest_joint(cloud, scene3.skeletons)


def identity_calib(view_id="cam", f=500.0, size=(640, 480)):
    w, h = size
    return geometry.CameraCalibration(
        view_id=view_id, fx=f, fy=f, cx=w / 2.0, cy=h / 2.0,
        rotation=np.eye(3), translation=np.zeros(3), width=w, height=h)
