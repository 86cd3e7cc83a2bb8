import sys

import numpy as np
import pytest

from dualmotion.curve import Curve, load_curve
from dualmotion.fixtures import data_path
from dualmotion.kinematics import RobotModel, load_model


@pytest.fixture(scope="session")
def models():
    return load_model(data_path("robot1.yaml")), load_model(data_path("robot2.yaml"))


@pytest.fixture(scope="session")
def curve1():
    return load_curve(data_path("curve1.csv"))


@pytest.fixture(scope="session")
def curve2():
    return load_curve(data_path("curve2.csv"))


def one_joint_model(tool_x=100.0, acc=40.0):
    """Single revolute z joint with an x-offset tool."""
    return RobotModel(
        name="one",
        joint_axes=[[0, 0, 1]],
        joint_origins=[[0, 0, 0]],
        tool_R=np.eye(3),
        tool_p=[tool_x, 0, 0],
        q_min=[-3.0],
        q_max=[3.0],
        qd_min=[-2.0],
        qd_max=[2.0],
        accel_nodes=[[0.0, 0.0]],
        accel_values=[[acc] * 6],
    )


def straight_curve(length=50.0, step=0.5, origin=(0.0, 0.0, 30.0), direction=(1.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0)):
    n = int(round(length / step)) + 1
    d = np.asarray(direction, float) / np.linalg.norm(direction)
    lam = np.linspace(0.0, length, n)
    p = np.asarray(origin, float) + lam[:, None] * d
    nn = np.tile(np.asarray(normal, float) / np.linalg.norm(normal), (n, 1))
    return Curve(lam, p, nn)


def arc_curve(radius=100.0, span_deg=90.0, step_deg=1.0):
    th = np.deg2rad(np.arange(0.0, span_deg + 1e-9, step_deg))
    p = np.column_stack([radius * np.cos(th), radius * np.sin(th), np.zeros_like(th)])
    n = np.tile([0.0, 0.0, 1.0], (len(th), 1))
    return Curve.from_points(p, n)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
