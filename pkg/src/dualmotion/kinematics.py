"""Serial-chain kinematics for 6R industrial arms.

Chains are successive rigid transforms: joint ``i`` sits at ``joint_origins[i]``
(an offset in the previous joint's frame) and rotates about ``joint_axes[i]``.
All joint frames are aligned with the base at ``q = 0``; the flange orientation
is carried by ``tool_transform``. Lengths are mm, angles rad.
"""

from __future__ import annotations

import csv
import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from numba import njit

from .rotation import cross_nb, rot_nb, rpy_to_R


class JointLimitWarning(UserWarning):
    pass


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    p: np.ndarray

    @property
    def T(self):
        out = np.eye(4)
        out[:3, :3] = self.R
        out[:3, 3] = self.p
        return out


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RobotModel:
    name: str
    joint_axes: np.ndarray
    joint_origins: np.ndarray
    tool_R: np.ndarray
    tool_p: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    qd_min: np.ndarray
    qd_max: np.ndarray
    accel_nodes: np.ndarray  # (M, 2) grid nodes over (q2, q3)
    accel_values: np.ndarray  # (M, 6) per-joint |qdd| max
    base_R: np.ndarray = field(default_factory=lambda: _frozen(np.eye(3)))
    base_p: np.ndarray = field(default_factory=lambda: _frozen(np.zeros(3)))

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name != "name":
                object.__setattr__(self, f.name, _frozen(getattr(self, f.name)))
        n = len(self.joint_axes)
        if self.joint_origins.shape != (n, 3) or self.joint_axes.shape != (n, 3):
            raise ModelError("joint_axes and joint_origins must both be (n, 3)")
        if np.any(np.abs(np.linalg.norm(self.joint_axes, axis=1) - 1.0) > 1e-12):
            raise ModelError("joint axes must be unit vectors")
        for lo, hi, what in ((self.q_min, self.q_max, "q"), (self.qd_min, self.qd_max, "qd")):
            if lo.shape != (n,) or hi.shape != (n,):
                raise ModelError(f"{what} limits must have {n} entries")
            if np.any(lo >= hi):
                raise ModelError(f"{what}_min must be below {what}_max")
        if np.any(self.qd_min >= 0) or np.any(self.qd_max <= 0):
            raise ModelError("velocity limits must bracket zero")
        if self.accel_values.size and np.any(self.accel_values <= 0):
            raise ModelError("acceleration table values must be positive")

    @property
    def joint_count(self):
        return len(self.joint_axes)

    @property
    def base_transform(self):
        return Pose(self.base_R, self.base_p)

    @property
    def tool_transform(self):
        return Pose(self.tool_R, self.tool_p)

    @property
    def chain(self):
        """Arrays consumed by the compiled kernels."""
        return (self.joint_axes, self.joint_origins, self.tool_R, self.tool_p, self.base_R, self.base_p)

    def with_base(self, R, p):
        return dataclasses.replace(self, base_R=np.asarray(R, float), base_p=np.asarray(p, float))

    def with_limits(self, **kw):
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def fk_nb(axes, origins, tool_R, tool_p, base_R, base_p, q):
    R = base_R.copy()
    p = base_p.copy()
    for i in range(q.shape[0]):
        p = p + R @ origins[i]
        R = R @ rot_nb(axes[i], q[i])
    return R @ tool_R, p + R @ tool_p


@njit(cache=True)
def fk_jac_nb(axes, origins, tool_R, tool_p, base_R, base_p, q):
    n = q.shape[0]
    R = base_R.copy()
    p = base_p.copy()
    zs = np.empty((n, 3))
    ps = np.empty((n, 3))
    for i in range(n):
        p = p + R @ origins[i]
        zs[i] = R @ axes[i]
        ps[i] = p
        R = R @ rot_nb(axes[i], q[i])
    p_tcp = p + R @ tool_p
    J = np.empty((6, n))
    for i in range(n):
        J[0:3, i] = zs[i]
        J[3:6, i] = cross_nb(zs[i], p_tcp - ps[i])
    return R @ tool_R, p_tcp, J


@njit(cache=True)
def fk_batch_nb(axes, origins, tool_R, tool_p, base_R, base_p, Q):
    m = Q.shape[0]
    Rs = np.empty((m, 3, 3))
    ps = np.empty((m, 3))
    for k in range(m):
        R, p = fk_nb(axes, origins, tool_R, tool_p, base_R, base_p, Q[k])
        Rs[k] = R
        ps[k] = p
    return Rs, ps


# ---------------------------------------------------------------------------
# public operations


def _check_q(model, q):
    q = np.asarray(q, dtype=float)
    if q.shape != (model.joint_count,):
        raise ValueError(f"expected {model.joint_count} joint values, got shape {q.shape}")
    if np.any(q < model.q_min - 1e-12) or np.any(q > model.q_max + 1e-12):
        warnings.warn(f"{model.name}: joint vector outside limits", JointLimitWarning, stacklevel=3)
    return np.ascontiguousarray(q)


def forward_kinematics(model: RobotModel, q) -> Pose:
    q = _check_q(model, q)
    R, p = fk_nb(*model.chain, q)
    return Pose(R, p)


def jacobian(model: RobotModel, q) -> np.ndarray:
    """Geometric Jacobian in the world frame, rows ``[omega; v]``."""
    q = _check_q(model, q)
    return fk_jac_nb(*model.chain, q)[2]


def fk_batch(model: RobotModel, Q):
    Q = np.ascontiguousarray(np.atleast_2d(np.asarray(Q, dtype=float)))
    if Q.shape[1] != model.joint_count:
        raise ValueError("joint dimension mismatch")
    return fk_batch_nb(*model.chain, Q)


def within_limits(model: RobotModel, q, tol=0.0):
    q = np.asarray(q, dtype=float)
    return bool(np.all(q >= model.q_min - tol) and np.all(q <= model.q_max + tol))


def accel_limits(model: RobotModel, q) -> np.ndarray:
    """Nearest-node lookup of the (q2, q3) acceleration table.

    Accepts a single joint vector or a stack of them. Equidistant nodes resolve
    to the one listed first in the table.
    """
    if model.accel_values.size == 0:
        raise ModelError(f"{model.name}: acceleration table is empty")
    q = np.asarray(q, dtype=float)
    key = q[..., 1:3]
    d = np.sum((key[..., None, :] - model.accel_nodes) ** 2, axis=-1)
    return model.accel_values[np.argmin(d, axis=-1)]


def manipulability(model: RobotModel, q):
    J = jacobian(model, q)
    return float(np.sqrt(max(np.linalg.det(J @ J.T), 0.0)))


# ---------------------------------------------------------------------------
# file I/O


def read_accel_table(path):
    rows = []
    with open(path, newline="") as fh:
        for line in csv.reader(fh):
            if not line or line[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in line])
            except ValueError as exc:
                raise ModelError(f"{path}: non-numeric row {line}") from exc
    if not rows:
        return np.zeros((0, 2)), np.zeros((0, 6))
    arr = np.array(rows)
    if arr.shape[1] != 8:
        raise ModelError(f"{path}: acceleration rows need 8 columns (q2, q3, a1..a6)")
    return arr[:, :2], arr[:, 2:]


def write_accel_table(path, nodes, values):
    with open(path, "w", newline="") as fh:
        fh.write("# q2,q3,a1,a2,a3,a4,a5,a6  (rad, rad/s^2)\n")
        w = csv.writer(fh)
        for n, v in zip(nodes, values):
            w.writerow([repr(float(x)) for x in (*n, *v)])


def _transform(spec):
    if spec is None:
        return np.eye(3), np.zeros(3)
    if "rotation" in spec:
        R = np.array(spec["rotation"], dtype=float)
    else:
        R = rpy_to_R(spec.get("rpy", [0.0, 0.0, 0.0]))
    return R, np.array(spec.get("translation", [0.0, 0.0, 0.0]), dtype=float)


def load_model(path) -> RobotModel:
    """Load a robot model file (YAML) and its acceleration table CSV."""
    path = Path(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    n = int(doc.get("joint_count", 6))
    tool_R, tool_p = _transform(doc.get("tool_transform"))
    base_R, base_p = _transform(doc.get("base_transform"))
    table = doc.get("accel_table")
    if isinstance(table, str):
        nodes, values = read_accel_table(path.parent / table)
    elif table:
        arr = np.array(table, dtype=float)
        nodes, values = arr[:, :2], arr[:, 2:]
    else:
        nodes, values = np.zeros((0, 2)), np.zeros((0, n))
    model = RobotModel(
        name=doc["name"],
        joint_axes=doc["joint_axes"],
        joint_origins=doc["joint_origins"],
        tool_R=tool_R,
        tool_p=tool_p,
        q_min=doc["q_min"],
        q_max=doc["q_max"],
        qd_min=doc["qd_min"],
        qd_max=doc["qd_max"],
        accel_nodes=nodes,
        accel_values=values,
        base_R=base_R,
        base_p=base_p,
    )
    if model.joint_count != n:
        raise ModelError(f"{path}: joint_count={n} but {model.joint_count} axes given")
    return model


def dump_model(model: RobotModel, path, accel_csv=None):
    path = Path(path)
    doc = {
        "name": model.name,
        "joint_count": model.joint_count,
        "joint_axes": model.joint_axes.tolist(),
        "joint_origins": model.joint_origins.tolist(),
        "tool_transform": {"rotation": model.tool_R.tolist(), "translation": model.tool_p.tolist()},
        "q_min": model.q_min.tolist(),
        "q_max": model.q_max.tolist(),
        "qd_min": model.qd_min.tolist(),
        "qd_max": model.qd_max.tolist(),
        "base_transform": {"rotation": model.base_R.tolist(), "translation": model.base_p.tolist()},
    }
    if accel_csv:
        write_accel_table(path.parent / accel_csv, model.accel_nodes, model.accel_values)
        doc["accel_table"] = str(accel_csv)
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
