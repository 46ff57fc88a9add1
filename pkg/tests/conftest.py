import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dynvol.geometry import CameraModel
from dynvol.scene import Emitter, SyntheticSceneSpec, ring_rig, synthesize_dataset

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_camera(width=4, height=3, f=2.0, pose=None, near=1.0, far=5.0):
    return CameraModel(width, height, f, f, width / 2, height / 2,
                       np.eye(4) if pose is None else pose, near, far)


@pytest.fixture
def camera():
    return make_camera()


def moving_scene():
    """One static sphere and one sphere sliding along +x."""
    return SyntheticSceneSpec(
        static=(Emitter((0.0, 0.3, 0.0), 0.6, 6.0, (0.2, 0.4, 0.9)),),
        dynamic=(Emitter((-0.6, -0.3, 0.0), 0.35, 10.0, (0.9, 0.6, 0.1),
                         {"kind": "linear", "velocity": [0.08, 0.0, 0.0]}),),
    )


@pytest.fixture(scope="session")
def tiny_video():
    """3 views (one held out), 4 frames, 16x16."""
    cams = ring_rig(3, 16, radius=4.0, height=0.5)
    return synthesize_dataset(moving_scene(), cams, 4, 64, view_ids=["a", "b", "c"], heldout_view_ids=["c"])


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
