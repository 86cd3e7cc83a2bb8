"""Dual-arm redundancy resolution for relative 5-dof curve tracking.

Robot 1 carries the tool, robot 2 holds the part on which the curve is defined.
The tracking constraints are

    p1 - p2 = R2 p*          (relative position)
    e_z1    = -R2 n*         (tool axis against the surface normal)

and the 12 joints are found sample by sample with damped least squares on the
6x12 relative Jacobian, seeding each sample with the previous solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .curve import Curve
from .kinematics import RobotModel, fk_jac_nb, fk_nb
from .rotation import cross_nb, rot

DAMPING = 0.01
TOL_P = 1e-3  # mm
TOL_N = 1e-5  # rad
MAX_ITER = 100
MAX_STEP = 0.3  # rad per iteration, per joint


class IKError(RuntimeError):
    def __init__(self, msg, index=None, lam=None):
        super().__init__(msg)
        self.index = index
        self.lam = lam


class NonConvergent(IKError):
    pass


class JointLimitLocked(IKError):
    pass


@dataclass(frozen=True)
class DualConfig:
    """Configuration parameters: joint seeds of both arms and the planar base of arm 2."""

    q0_1: np.ndarray
    q0_2: np.ndarray
    base2_planar: tuple  # (x mm, y mm, yaw rad)

    def __post_init__(self):
        object.__setattr__(self, "q0_1", np.array(self.q0_1, dtype=float))
        object.__setattr__(self, "q0_2", np.array(self.q0_2, dtype=float))
        object.__setattr__(self, "base2_planar", tuple(float(v) for v in self.base2_planar))

    def as_vector(self):
        return np.concatenate([self.q0_1, self.q0_2, self.base2_planar])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[:6], x[6:12], tuple(x[12:15]))

    def to_dict(self):
        return {
            "q0_1": [float(v) for v in self.q0_1],
            "q0_2": [float(v) for v in self.q0_2],
            "base2_planar": [float(v) for v in self.base2_planar],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["q0_1"], d["q0_2"], d["base2_planar"])


def planar_transform(x, y, yaw):
    return rot([0, 0, 1], yaw), np.array([x, y, 0.0])


def place(models, config: DualConfig):
    """Return the two models with robot 2's base set from the planar parameters.

    Any base transform already in robot 2's model file (e.g. a pedestal) is
    applied on top of the planar placement.
    """
    m1, m2 = models
    Rb, pb = planar_transform(*config.base2_planar)
    return m1, m2.with_base(Rb @ m2.base_R, pb + Rb @ m2.base_p)


def within_config_limits(models, config: DualConfig):
    m1, m2 = models
    return bool(
        np.all(config.q0_1 >= m1.q_min)
        and np.all(config.q0_1 <= m1.q_max)
        and np.all(config.q0_2 >= m2.q_min)
        and np.all(config.q0_2 <= m2.q_max)
    )


@dataclass(frozen=True)
class JointPath:
    lam: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    res_p: np.ndarray
    res_n: np.ndarray

    def __len__(self):
        return len(self.lam)

    def to_csv(self, path):
        header = "lam," + ",".join(f"q1_{i}" for i in range(1, 7)) + "," + ",".join(f"q2_{i}" for i in range(1, 7))
        header += ",residual_p,residual_n"
        data = np.column_stack([self.lam, self.q1, self.q2, self.res_p, self.res_n])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in data:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:7], data[:, 7:13], data[:, 13], data[:, 14])


# ---------------------------------------------------------------------------
# residual and Jacobian


def relative_error(q1, q2, models, p_star, n_star):
    """Position residual e_p (world frame, mm) and normal angle theta (rad)."""
    m1, m2 = models
    R1, p1 = fk_nb(*m1.chain, np.asarray(q1, dtype=float))
    R2, p2 = fk_nb(*m2.chain, np.asarray(q2, dtype=float))
    e_p = p1 - p2 - R2 @ np.asarray(p_star, dtype=float)
    a = R1[:, 2]
    b = -R2 @ np.asarray(n_star, dtype=float)
    theta = float(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b))
    return e_p, theta


@njit(cache=True)
def _skew_nb(v):
    S = np.zeros((3, 3))
    S[0, 1] = -v[2]
    S[0, 2] = v[1]
    S[1, 0] = v[2]
    S[1, 2] = -v[0]
    S[2, 0] = -v[1]
    S[2, 1] = v[0]
    return S


@njit(cache=True)
def _relative_jac_nb(R1, J1, R2, J2, p_star, n_star, lock2):
    a = R1[:, 2].copy()
    b = -(R2 @ n_star)
    rp = R2 @ p_star
    Jb = np.zeros((6, 12))
    Jb[0:3, 0:6] = J1[3:6]
    Jb[3:6, 0:6] = _skew_nb(b) @ _skew_nb(a) @ J1[0:3]
    if not lock2:
        Jb[0:3, 6:12] = -J2[3:6] + _skew_nb(rp) @ J2[0:3]
        Jb[3:6, 6:12] = -(_skew_nb(a) @ _skew_nb(b)) @ J2[0:3]
    return Jb


def relative_jacobian(q1, q2, models, p_star, n_star, lock_robot2=False):
    """6x12 derivative of ``[e_p; e_z1 x (-R2 n*)]`` w.r.t. ``(q1, q2)``.

    Top rows: ``[J_v1, -J_v2 + (R2 p*)^x J_w2]``. Bottom rows are the exact
    derivative of the cross-product normal residual; its nullspace contains the
    free spin of the tool about its own axis.
    """
    m1, m2 = models
    R1, _, J1 = fk_jac_nb(*m1.chain, np.asarray(q1, dtype=float))
    R2, _, J2 = fk_jac_nb(*m2.chain, np.asarray(q2, dtype=float))
    return _relative_jac_nb(R1, J1, R2, J2, np.asarray(p_star, float), np.asarray(n_star, float), lock_robot2)


# ---------------------------------------------------------------------------
# path solver


@njit(cache=True)
def _solve_point_nb(c1, c2, q1, q2, p_star, n_star, damping, tol_p, tol_n, max_iter, max_step, lock2):
    """Iterate one sample in place. Returns (converged, res_p, res_n, clamped)."""
    a1, o1, tR1, tp1, bR1, bp1, lo1, hi1 = c1
    a2, o2, tR2, tp2, bR2, bp2, lo2, hi2 = c2
    res_p = 0.0
    res_n = 0.0
    clamped = False
    polished = False
    for it in range(max_iter + 2):
        R1, p1, J1 = fk_jac_nb(a1, o1, tR1, tp1, bR1, bp1, q1)
        R2, p2, J2 = fk_jac_nb(a2, o2, tR2, tp2, bR2, bp2, q2)
        ep = p1 - p2 - R2 @ p_star
        a = R1[:, 2].copy()
        b = -(R2 @ n_star)
        c = cross_nb(a, b)
        cn = np.sqrt(c[0] ** 2 + c[1] ** 2 + c[2] ** 2)
        d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
        res_p = np.sqrt(ep[0] ** 2 + ep[1] ** 2 + ep[2] ** 2)
        res_n = np.arctan2(cn, d)
        if res_p <= tol_p and res_n <= tol_n:
            # one extra step keeps residual noise out of q'' downstream
            if polished:
                return True, res_p, res_n, clamped
            polished = True
        elif it >= max_iter:
            break
        Jb = _relative_jac_nb(R1, J1, R2, J2, p_star, n_star, lock2)
        r = np.empty(6)
        r[0:3] = ep
        if d > 0.0:
            r[3:6] = c
        else:
            # far from aligned: drive the difference vector instead
            r[3:6] = a - b
            Jb[3:6, 0:6] = -_skew_nb(a) @ J1[0:3]
            if not lock2:
                Jb[3:6, 6:12] = _skew_nb(b) @ J2[0:3]
        H = Jb @ Jb.T
        for k in range(6):
            H[k, k] += damping
        dq = -(Jb.T @ np.linalg.solve(H, r))
        m = np.max(np.abs(dq))
        if m > max_step:
            dq *= max_step / m
        clamped = False
        for k in range(6):
            q1[k] += dq[k]
            if q1[k] < lo1[k]:
                q1[k] = lo1[k]
                clamped = True
            elif q1[k] > hi1[k]:
                q1[k] = hi1[k]
                clamped = True
            if not lock2:
                q2[k] += dq[6 + k]
                if q2[k] < lo2[k]:
                    q2[k] = lo2[k]
                    clamped = True
                elif q2[k] > hi2[k]:
                    q2[k] = hi2[k]
                    clamped = True
    return False, res_p, res_n, clamped


@njit(cache=True)
def _solve_path_nb(c1, c2, P, N, q1_0, q2_0, damping, tol_p, tol_n, max_iter, max_step, jump, lock2):
    n = P.shape[0]
    Q1 = np.empty((n, 6))
    Q2 = np.empty((n, 6))
    rp = np.empty(n)
    rn = np.empty(n)
    q1 = q1_0.copy()
    q2 = q2_0.copy()
    for i in range(n):
        q1_in = q1.copy()
        q2_in = q2.copy()
        ok, res_p, res_n, clamped = _solve_point_nb(
            c1, c2, q1, q2, P[i], N[i], damping, tol_p, tol_n, max_iter, max_step, lock2
        )
        if not ok:
            locked = False
            if clamped:
                # the limits are to blame only if the unconstrained problem converges
                free1 = (c1[0], c1[1], c1[2], c1[3], c1[4], c1[5], np.full(6, -np.inf), np.full(6, np.inf))
                free2 = (c2[0], c2[1], c2[2], c2[3], c2[4], c2[5], np.full(6, -np.inf), np.full(6, np.inf))
                locked = _solve_point_nb(
                    free1, free2, q1_in, q2_in, P[i], N[i], damping, tol_p, tol_n, max_iter, max_step, lock2
                )[0]
            return (2 if locked else 1), i, Q1, Q2, rp, rn
        if i > 0:
            dmax = 0.0
            for k in range(6):
                dmax = max(dmax, abs(q1[k] - Q1[i - 1, k]), abs(q2[k] - Q2[i - 1, k]))
            if dmax > jump:
                return 3, i, Q1, Q2, rp, rn
        Q1[i] = q1
        Q2[i] = q2
        rp[i] = res_p
        rn[i] = res_n
    return 0, -1, Q1, Q2, rp, rn


def _packed(model: RobotModel):
    return (*model.chain, model.q_min, model.q_max)


def continuity_bound(step):
    """Largest accepted inter-sample joint jump (rad) for a lambda step (mm)."""
    return max(0.1, 0.2 * step)


def solve_path(
    config: DualConfig,
    curve: Curve,
    models,
    *,
    damping=DAMPING,
    tol_p=TOL_P,
    tol_n=TOL_N,
    max_iter=MAX_ITER,
    jump=None,
    lock_robot2=False,
) -> JointPath:
    """Joint paths of both arms along the curve, seeded from ``config``.

    Raises NonConvergent or JointLimitLocked with the failing sample's lambda.
    """
    placed = place(models, config)
    m1, m2 = placed
    if jump is None:
        jump = continuity_bound(curve.step) if len(curve) > 1 else np.inf
    q1_0 = np.clip(config.q0_1, m1.q_min, m1.q_max)
    q2_0 = np.clip(config.q0_2, m2.q_min, m2.q_max)
    status, idx, Q1, Q2, rp, rn = _solve_path_nb(
        _packed(m1),
        _packed(m2),
        np.ascontiguousarray(curve.p),
        np.ascontiguousarray(curve.n),
        q1_0,
        q2_0,
        float(damping),
        float(tol_p),
        float(tol_n),
        int(max_iter),
        MAX_STEP,
        float(jump),
        bool(lock_robot2),
    )
    if status == 0:
        return JointPath(curve.lam.copy(), Q1, Q2, rp, rn)
    lam = float(curve.lam[idx])
    if status == 2:
        raise JointLimitLocked(f"joint limit blocks tracking at lambda={lam:.3f} mm", idx, lam)
    if status == 3:
        raise NonConvergent(f"joint branch jump at lambda={lam:.3f} mm", idx, lam)
    raise NonConvergent(f"relative IK did not converge at lambda={lam:.3f} mm", idx, lam)


def solve_pose_ik(model: RobotModel, R_target, p_target, q_seed, tol_p=1e-9, tol_r=1e-10, max_iter=100):
    """Single-arm 6-dof IK by damped least squares. Returns (q, converged)."""
    return _pose_ik_nb(
        _packed(model),
        np.ascontiguousarray(R_target, dtype=float),
        np.asarray(p_target, dtype=float),
        np.array(q_seed, dtype=float),
        tol_p,
        tol_r,
        max_iter,
    )


@njit(cache=True)
def _pose_err_nb(R, p, R_t, p_t):
    E = R_t @ R.T
    tr = E[0, 0] + E[1, 1] + E[2, 2]
    c = min(1.0, max(-1.0, 0.5 * (tr - 1.0)))
    th = np.arccos(c)
    w = np.empty(3)
    w[0] = E[2, 1] - E[1, 2]
    w[1] = E[0, 2] - E[2, 0]
    w[2] = E[1, 0] - E[0, 1]
    if th < 1e-7:
        w *= 0.5
    else:
        w *= th / (2.0 * np.sin(th))
    err = np.empty(6)
    err[0:3] = w
    err[3:6] = p_t - p
    return err


@njit(cache=True)
def _pose_ik_nb(c, R_t, p_t, q, tol_p, tol_r, max_iter):
    a, o, tR, tp, bR, bp, lo, hi = c
    for it in range(max_iter + 1):
        R, p, J = fk_jac_nb(a, o, tR, tp, bR, bp, q)
        err = _pose_err_nb(R, p, R_t, p_t)
        ep = np.sqrt(err[3] ** 2 + err[4] ** 2 + err[5] ** 2)
        er = np.sqrt(err[0] ** 2 + err[1] ** 2 + err[2] ** 2)
        if ep <= tol_p and er <= tol_r:
            return q, True
        if it == max_iter:
            break
        H = J @ J.T
        for k in range(6):
            H[k, k] += 1e-10
        dq = J.T @ np.linalg.solve(H, err)
        m = np.max(np.abs(dq))
        if m > MAX_STEP:
            dq *= MAX_STEP / m
        q = np.minimum(np.maximum(q + dq, lo), hi)
    return q, False


@njit(cache=True)
def pose_ik_path_nb(c, Rs, ps, q0, tol_p, tol_r, max_iter):
    """Sequential pose IK along a dense Cartesian path. Returns (Q, ok_mask)."""
    n = ps.shape[0]
    Q = np.empty((n, q0.shape[0]))
    ok = np.ones(n, dtype=np.bool_)
    q = q0.copy()
    for i in range(n):
        q, conv = _pose_ik_nb(c, Rs[i], ps[i], q.copy(), tol_p, tol_r, max_iter)
        ok[i] = conv
        Q[i] = q
    return Q, ok


def pose_ik_path(model: RobotModel, Rs, ps, q0, tol_p=1e-7, tol_r=1e-9, max_iter=50):
    return pose_ik_path_nb(
        _packed(model),
        np.ascontiguousarray(Rs, dtype=float),
        np.ascontiguousarray(ps, dtype=float),
        np.array(q0, dtype=float),
        tol_p,
        tol_r,
        max_iter,
    )
