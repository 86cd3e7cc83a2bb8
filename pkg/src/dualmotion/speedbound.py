"""Maximum uniform relative path speed of a joint path.

With lambda_ddot = 0 the joint rates are q' * mu and joint accelerations are
q'' * mu**2, so each channel gives a closed-form upper bound on mu.
``np.inf`` is the "unbounded" sentinel for channels that impose none.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import accel_limits
from .relative_ik import JointPath

UNBOUNDED = np.inf
ZERO_THRESH = 1e-12


class SpeedBoundError(ValueError):
    pass


@dataclass(frozen=True)
class SpeedProfile:
    lam: np.ndarray
    vel_bound: np.ndarray
    acc_bound: np.ndarray

    @property
    def combined(self):
        return np.minimum(self.vel_bound, self.acc_bound)

    @property
    def mu(self):
        return float(np.min(self.combined))

    def to_csv(self, path):
        def fmt(v):
            return "unbounded" if np.isinf(v) else repr(float(v))

        with open(path, "w") as fh:
            fh.write("lam,vel_bound,acc_bound,combined\n")
            for row in zip(self.lam, self.vel_bound, self.acc_bound, self.combined):
                fh.write(",".join(fmt(v) for v in row) + "\n")


def path_derivatives(path: JointPath, uniform_tol=1e-6):
    """q'(lambda) and q''(lambda) for the 12 stacked channels (rad/mm, rad/mm^2).

    The final interval may be shorter than the rest (resample grids end on
    lambda_f); every other interval must match the first.
    """
    lam = np.asarray(path.lam, dtype=float)
    if len(lam) < 3:
        raise SpeedBoundError("need at least 3 samples")
    d = np.diff(lam)
    if np.any(d <= 0) or np.any(np.abs(d[:-1] - d[0]) > uniform_tol * max(1.0, d[0])):
        raise SpeedBoundError("lambda grid is not uniform")
    Q = np.hstack([path.q1, path.q2])
    dq = np.gradient(Q, lam, axis=0, edge_order=2)
    # three-point second difference (non-uniform form covers the last interval)
    h0, h1 = d[:-1, None], d[1:, None]
    ddq = np.empty_like(Q)
    ddq[1:-1] = 2.0 * ((Q[2:] - Q[1:-1]) / h1 - (Q[1:-1] - Q[:-2]) / h0) / (h0 + h1)
    if len(lam) >= 4:
        ddq[0] = (2 * Q[0] - 5 * Q[1] + 4 * Q[2] - Q[3]) / d[0] ** 2
        ddq[-1] = 2 * ddq[-2] - ddq[-3]
    else:
        ddq[0] = ddq[-1] = ddq[1]
    return dq, ddq


def channel_bounds(dq, ddq, qd_lo, qd_hi, acc_max, skip_ends=True):
    """Per-sample velocity and acceleration bounds on mu.

    ``qd_lo``/``qd_hi`` are per-channel joint rate limits; ``acc_max`` holds
    per-sample per-channel |qdd| limits with the same shape as ``ddq``.
    """
    dq = np.asarray(dq, dtype=float)
    ddq = np.asarray(ddq, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(dq > 0, qd_hi, qd_lo)
        vb = np.where(np.abs(dq) < ZERO_THRESH, UNBOUNDED, lim / dq)
        ab = np.where(np.abs(ddq) < ZERO_THRESH, UNBOUNDED, np.sqrt(acc_max / np.abs(ddq)))
    vel = vb.min(axis=1)
    acc = ab.min(axis=1)
    if skip_ends and len(acc) > 2:
        acc[0] = acc[-1] = UNBOUNDED
    return vel, acc


def max_uniform_speed(path: JointPath, models) -> SpeedProfile:
    m1, m2 = models
    if path.lam[-1] - path.lam[0] <= 0:
        raise SpeedBoundError("path has zero length")
    dq, ddq = path_derivatives(path)
    qd_lo = np.concatenate([m1.qd_min, m2.qd_min])
    qd_hi = np.concatenate([m1.qd_max, m2.qd_max])
    acc = np.hstack([accel_limits(m1, path.q1), accel_limits(m2, path.q2)])
    vel, accb = channel_bounds(dq, ddq, qd_lo, qd_hi, acc)
    d = np.diff(path.lam)
    if len(d) > 2 and abs(d[-1] - d[0]) > 1e-6 * max(1.0, d[0]):
        accb[-2] = UNBOUNDED  # stencil straddles the odd final interval
    return SpeedProfile(np.array(path.lam, dtype=float), vel, accb)
