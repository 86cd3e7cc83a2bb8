"""Generators for the shipped test robots and target curves.

The files under ``dualmotion/data`` are produced by :func:`write_all`; they are
committed so that loading never depends on this module, but regenerating them
is deterministic.
"""

from pathlib import Path

import numpy as np

from .kinematics import RobotModel, dump_model
from .rotation import rot

DATA_DIR = Path(__file__).parent / "data"

_Y90 = rot([0, 1, 0], np.pi / 2)
_AXES = [[0, 0, 1], [0, 1, 0], [0, 1, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0]]


def _accel_grid(q_min, q_max, step, fn):
    q2s = np.arange(q_min[1], q_max[1] + 1e-9, step)
    q3s = np.arange(q_min[2], q_max[2] + 1e-9, step)
    nodes, vals = [], []
    for a in q2s:
        for b in q3s:
            nodes.append((round(a, 6), round(b, 6)))
            vals.append(fn(a, b))
    return np.array(nodes), np.array(vals)


def make_robot1():
    """Large spraying arm (2.8 m class)."""
    q_min = np.array([-2.967, -1.134, -3.142, -5.236, -2.094, -6.283])
    q_max = np.array([2.967, 1.483, 1.222, 5.236, 2.094, 6.283])
    qd = np.array([1.745, 1.571, 1.571, 3.316, 2.443, 3.316])

    def acc(q2, q3):
        reach = abs(1075 * np.sin(q2) + 1342.5 * np.cos(q2 + q3)) / 2417.5
        return [6.0 - 3.0 * reach, 5.0 - 2.0 * reach, 7.0 - 3.0 * reach, 42.5, 36.8, 50.5]

    nodes, vals = _accel_grid(q_min, q_max, 0.25, acc)
    return RobotModel(
        name="sprayer6r",
        joint_axes=_AXES,
        joint_origins=[[0, 0, 0], [320, 0, 780], [0, 0, 1075], [0, 0, 200], [1142.5, 0, 0], [200, 0, 0]],
        tool_R=_Y90,
        tool_p=[450.0, 0.0, 0.0],
        q_min=q_min,
        q_max=q_max,
        qd_min=-qd,
        qd_max=qd,
        accel_nodes=nodes,
        accel_values=vals,
    )


def make_robot2():
    """Small part-holding arm (0.7 m class)."""
    q_min = np.array([-2.967, -1.745, -3.491, -4.712, -2.269, -6.981])
    q_max = np.array([2.967, 2.269, 1.222, 4.712, 2.269, 6.981])
    qd = np.array([5.027, 4.189, 5.184, 6.981, 7.069, 10.472])

    def acc(q2, q3):
        reach = abs(350 * np.sin(q2) + 433 * np.cos(q2 + q3)) / 783.0
        return [25.0 - 10.0 * reach, 20.0 - 8.0 * reach, 30.0 - 10.0 * reach, 108.2, 145.4, 153.5]

    nodes, vals = _accel_grid(q_min, q_max, 0.25, acc)
    return RobotModel(
        name="holder6r",
        joint_axes=_AXES,
        joint_origins=[[0, 0, 0], [0, 0, 399.1], [0, 0, 350], [0, 0, 42], [351, 0, 0], [82, 0, 0]],
        tool_R=_Y90,
        tool_p=[50.0, 0.0, 0.0],
        q_min=q_min,
        q_max=q_max,
        qd_min=-qd,
        qd_max=qd,
        accel_nodes=nodes,
        accel_values=vals,
    )


def _arc_resample(P, N, step):
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    lam = np.concatenate([[0.0], np.cumsum(seg)])
    # uniform spacing at or just below ``step`` (no odd final interval)
    grid = np.linspace(0.0, lam[-1], int(np.ceil(lam[-1] / step)) + 1)
    Pi = np.column_stack([np.interp(grid, lam, P[:, k]) for k in range(3)])
    Ni = np.column_stack([np.interp(grid, lam, N[:, k]) for k in range(3)])
    Ni /= np.linalg.norm(Ni, axis=1, keepdims=True)
    return Pi, Ni


def curve1(step=0.5):
    """Frequency-increasing sinusoid draped on a paraboloid (part frame)."""
    u = np.linspace(0.0, 1.0, 40001)
    x = -200.0 + 400.0 * u
    y = 10.0 * np.sin(2 * np.pi * (1.0 * u + 0.5 * u**2))
    rs = 800.0
    z = 30.0 - (x**2 + y**2) / (2 * rs)
    P = np.column_stack([x, y, z])
    N = np.column_stack([x / rs, y / rs, np.ones_like(x)])
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    return _arc_resample(P, N, step)


def curve2(step=0.5):
    """Swept, twisted leading-edge style curve (part frame)."""
    u = np.linspace(0.0, 1.0, 40001)
    x = -175.0 + 350.0 * u
    y = 12.0 * np.sin(np.pi * u) - 6.0 * u
    z = 25.0 + 15.0 * (u - 0.5) ** 2
    P = np.column_stack([x, y, z])
    T = np.column_stack([np.full_like(u, 350.0), 12.0 * np.pi * np.cos(np.pi * u) - 6.0, 30.0 * (u - 0.5)])
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    twist = -0.35 + 0.7 * u
    N = np.column_stack([np.zeros_like(u), -np.sin(twist), np.cos(twist)])
    N -= np.sum(N * T, axis=1, keepdims=True) * T
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    return _arc_resample(P, N, step)


def write_curve_csv(path, P, N, comment=None):
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for p, n in zip(P, N):
            fh.write(",".join(f"{v:.9f}" for v in (*p, *n)) + "\n")


def write_all(out=DATA_DIR):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_model(make_robot1(), out / "robot1.yaml", accel_csv="robot1_accel.csv")
    dump_model(make_robot2(), out / "robot2.yaml", accel_csv="robot2_accel.csv")
    P, N = curve1()
    write_curve_csv(out / "curve1.csv", P, N, "curve 1: multi-frequency sinusoid on paraboloid; resolution_mm=0.5")
    P, N = curve2()
    write_curve_csv(out / "curve2.csv", P, N, "curve 2: leading-edge style curve; resolution_mm=0.5")


def data_path(name):
    return DATA_DIR / name


if __name__ == "__main__":
    write_all()
