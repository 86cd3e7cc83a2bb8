"""Synchronized dual-arm controller simulation.

Both arms share one path parameter ``sigma``, the commanded time: step ``k``
occupies ``[tau_k, tau_k + T_k]`` where ``T_k`` is the step duration of the
slower arm at its commanded speed, and every arm moves at uniform progress
along its own primitive there. Segment transitions are therefore simultaneous
by construction, and commanded motion is ``sigma_dot = 1`` everywhere.

Pipeline: Cartesian paths with cubic Hermite blend zones, IK on a dense sigma
grid, a forward/backward time law on ``x = sigma_dot**2`` capped by the
commanded step rate and by the joint velocity and acceleration limits, a stop
at every fine point (blend 0), sampling at the internal rate, decimation to the
output rate, and a final uniform time stretch that certifies the limits on the
finite-difference output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from .kinematics import accel_limits, fk_batch, fk_jac_nb
from .motion_program import MotionProgram, program_states, segment_length, segment_poses
from .relative_ik import pose_ik_path

STALL_FLOOR = 1e-8  # minimum sigma_dot**2 away from stops
MIN_STEP_TIME = 1e-4  # s, for steps in which neither arm translates
RP_TO_SIGMA = 3.616  # ISO 9283 style RP = mean + 3 std of the 3D deviation of an isotropic Gaussian


class SimulationError(RuntimeError):
    pass


class CornerPathFailure(SimulationError):
    def __init__(self, msg, step=None, robot=None):
        super().__init__(msg)
        self.step = step
        self.robot = robot


class Unreachable(SimulationError):
    pass


def sigma_from_repeatability(rp):
    """Per-axis standard deviation (mm) for a path repeatability figure (mm)."""
    return float(rp) / RP_TO_SIGMA


@dataclass
class SimOptions:
    rate: float = 250.0
    internal_rate: float = 1000.0
    resolution: float = 0.5  # mm of TCP travel per sigma node
    joint_resolution: float = 2e-3  # rad per sigma node
    max_nodes_per_step: int = 4000
    noise: tuple | None = None  # per-robot per-axis sigma, mm
    seed: int = 0
    dwell: float = 1.5  # output samples held at a fine point


@dataclass(frozen=True)
class ExecutionRecord:
    t: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    sigma: np.ndarray = None
    transition_times: np.ndarray = None  # time sigma reaches 0..K (shared by both arms)
    saturated: np.ndarray = None  # per step: joint limits bound the speed somewhere
    time_scale: float = 1.0
    fine_points: np.ndarray = None

    def __len__(self):
        return len(self.t)

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    def to_csv(self, path):
        cols = ["t"] + [f"q1_{i}" for i in range(1, 7)] + [f"q2_{i}" for i in range(1, 7)]
        data = np.column_stack([self.t, self.q1, self.q2])
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in data:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:7], data[:, 7:13])


# ---------------------------------------------------------------------------
# geometry on the sigma grid


def _hermite(tau, a, b, m0, m1):
    t2, t3 = tau * tau, tau * tau * tau
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + tau
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    return h00[:, None] * a + h10[:, None] * m0 + h01[:, None] * b + h11[:, None] * m1


def _pose_and_rate(model, state, prim, s, h=1e-6):
    """Pose at progress ``s`` and its derivative w.r.t. s (position, rotation vector about ``Rw``)."""
    ss = np.array([s - h, s, s + h])
    R, p = segment_poses(model, state, prim, ss)
    return R, p, h


def _blend_radii(r, v_in, v_out):
    """Entry/exit distances keeping the Hermite control polygon inside the r-ball."""
    rho = v_in / v_out
    return min(r, 5.0 * r * rho), min(r, 5.0 * r / rho)


def _step_nodes(lengths, dq, opts):
    n = max(8, int(np.ceil(max(lengths) / opts.resolution)), int(np.ceil(dq / opts.joint_resolution)))
    return min(n, opts.max_nodes_per_step)


def _robot_geometry(model, states, prims, lengths, sig, tau, T):
    """World TCP poses of one arm on the sigma nodes, plus joint values where known directly."""
    K = len(prims)
    n = len(sig)
    k_of = np.clip(np.searchsorted(tau, sig, side="right") - 1, 0, K - 1)
    s = np.clip((sig - tau[k_of]) / T[k_of], 0.0, 1.0)
    R = np.empty((n, 3, 3))
    P = np.empty((n, 3))
    Qd = np.full((n, 6), np.nan)
    for k in range(K):
        m = k_of == k
        if not m.any():
            continue
        R[m], P[m] = segment_poses(model, states[k], prims[k], s[m])
        if prims[k].kind == "J":
            Qd[m] = states[k].q + s[m, None] * (prims[k].target - states[k].q)
    windows = []
    for k in range(K - 1):
        r = prims[k].blend
        if r <= 0:
            continue
        L0, L1 = lengths[k], lengths[k + 1]
        if r >= 0.5 * L0 or r >= 0.5 * L1:
            raise CornerPathFailure(f"{model.name}: blend {r:.3f} mm too large at waypoint {k + 1}", k + 1)
        v0, v1 = L0 / T[k], L1 / T[k + 1]
        rin, rout = _blend_radii(r, v0, v1)
        sa, sb = 1.0 - rin / L0, rout / L1
        lo, hi = tau[k + 1] - rin / v0, tau[k + 1] + rout / v1
        windows.append((lo, hi))
        m = (sig > lo) & (sig < hi)
        if not m.any():
            continue
        D = hi - lo
        tau_b = (sig[m] - lo) / D
        if prims[k].kind == "J" and prims[k + 1].kind == "J":
            # joint-space blend between two joint moves
            d0 = (prims[k].target - states[k].q) / T[k]
            d1 = (prims[k + 1].target - states[k + 1].q) / T[k + 1]
            qa = states[k].q + sa * (prims[k].target - states[k].q)
            qb = states[k + 1].q + sb * (prims[k + 1].target - states[k + 1].q)
            Qd[m] = _hermite(tau_b, qa, qb, D * d0, D * d1)
            R[m], P[m] = fk_batch(model, Qd[m])
            continue
        Ra3, pa3, h = _pose_and_rate(model, states[k], prims[k], sa)
        Rb3, pb3, _ = _pose_and_rate(model, states[k + 1], prims[k + 1], sb)
        Rw = Rotation.from_matrix(states[k + 1].R)
        wa = (Rotation.from_matrix(Ra3) * Rw.inv()).as_rotvec()
        wb = (Rotation.from_matrix(Rb3) * Rw.inv()).as_rotvec()
        ga, gb = D / (2 * h * T[k]), D / (2 * h * T[k + 1])
        P[m] = _hermite(tau_b, pa3[1], pb3[1], ga * (pa3[2] - pa3[0]), gb * (pb3[2] - pb3[0]))
        w = _hermite(tau_b, wa[1], wb[1], ga * (wa[2] - wa[0]), gb * (wb[2] - wb[0]))
        R[m] = (Rotation.from_rotvec(w) * Rw).as_matrix()
        Qd[m] = np.nan
    return R, P, Qd, windows


# ---------------------------------------------------------------------------
# time law


@njit(cache=True)
def _accel_lines(dq, ddq, A):
    """Per-channel bounds on u = sigma_ddot as lines alpha + beta * x."""
    m = dq.shape[0]
    al = np.full(m, -np.inf)
    bl = np.zeros(m)
    au = np.full(m, np.inf)
    bu = np.zeros(m)
    xcap = np.inf
    for c in range(m):
        a, b = dq[c], ddq[c]
        if abs(a) < 1e-12:
            if abs(b) > 1e-12:
                xcap = min(xcap, A[c] / abs(b))
            continue
        if a > 0:
            al[c] = -A[c] / a
            au[c] = A[c] / a
        else:
            al[c] = A[c] / a
            au[c] = -A[c] / a
        bl[c] = -b / a
        bu[c] = -b / a
    return al, bl, au, bu, xcap


@njit(cache=True)
def _u_bounds(al, bl, au, bu, x):
    lo = -1e300
    hi = 1e300
    for c in range(al.shape[0]):
        if np.isfinite(al[c]):
            lo = max(lo, al[c] + bl[c] * x)
            hi = min(hi, au[c] + bu[c] * x)
    return lo, hi


@njit(cache=True)
def time_law_nb(sig, dq, ddq, A, vlo, vhi, cap, stop):
    """Largest x = sigma_dot^2 profile under the limits (backward then forward pass)."""
    n = sig.shape[0]
    m = dq.shape[1]
    mvc = np.empty(n)
    AL = np.empty((n, m))
    BL = np.empty((n, m))
    AU = np.empty((n, m))
    BU = np.empty((n, m))
    for j in range(n):
        x = cap[j]
        for c in range(m):
            a = dq[j, c]
            if abs(a) > 1e-12:
                lim = vhi[c] if a > 0 else vlo[c]
                x = min(x, (lim / a) ** 2)
        al, bl, au, bu, xcap = _accel_lines(dq[j], ddq[j], A[j])
        x = min(x, xcap)
        for c in range(m):
            if not np.isfinite(al[c]):
                continue
            for d in range(m):
                if not np.isfinite(au[d]):
                    continue
                coef = bl[c] - bu[d]
                if coef > 0:
                    x = min(x, (au[d] - al[c]) / coef)
        mvc[j] = 0.0 if stop[j] else x
        AL[j] = al
        BL[j] = bl
        AU[j] = au
        BU[j] = bu
    xb = mvc.copy()
    for j in range(n - 2, -1, -1):
        ds = sig[j + 1] - sig[j]
        lo, _ = _u_bounds(AL[j + 1], BL[j + 1], AU[j + 1], BU[j + 1], xb[j + 1])
        xb[j] = min(xb[j], max(0.0, xb[j + 1] - 2.0 * ds * lo))
    xf = xb.copy()
    xf[0] = 0.0
    for j in range(n - 1):
        ds = sig[j + 1] - sig[j]
        _, hi = _u_bounds(AL[j], BL[j], AU[j], BU[j], xf[j])
        xf[j + 1] = min(xb[j + 1], max(0.0, xf[j] + 2.0 * ds * hi))
    return xf, mvc


def _node_times(sig, x, stop, dwell):
    """Start time, sigma, sigma rate and sigma acceleration of every node interval."""
    n = len(sig)
    ts = [0.0]
    t = 0.0
    seg_t, seg_s, seg_v, seg_a = [], [], [], []
    for j in range(n - 1):
        ds = sig[j + 1] - sig[j]
        v0, v1 = np.sqrt(x[j]), np.sqrt(x[j + 1])
        if v0 + v1 < 1e-12:
            raise SimulationError("time law stalled")
        dt = 2.0 * ds / (v0 + v1)
        seg_t.append(t)
        seg_s.append(sig[j])
        seg_v.append(v0)
        seg_a.append((x[j + 1] - x[j]) / (2.0 * ds))
        t += dt
        if stop[j + 1] and j + 1 < n - 1 and dwell > 0:
            seg_t.append(t)
            seg_s.append(sig[j + 1])
            seg_v.append(0.0)
            seg_a.append(0.0)
            t += dwell
        ts.append(t)
    return np.array(seg_t), np.array(seg_s), np.array(seg_v), np.array(seg_a), t


def _sample_sigma(tq, seg_t, seg_s, seg_v, seg_a, sig_end, t_end):
    i = np.clip(np.searchsorted(seg_t, tq, side="right") - 1, 0, len(seg_t) - 1)
    tau = tq - seg_t[i]
    s = seg_s[i] + seg_v[i] * tau + 0.5 * seg_a[i] * tau * tau
    nxt = np.append(seg_s[1:], sig_end)[i]
    s = np.minimum(np.maximum(s, seg_s[i]), nxt)
    return np.where(tq >= t_end, sig_end, s)


# ---------------------------------------------------------------------------
# execution


def _noise_offsets(models, states, K, noise, rng):
    """Joint offsets at waypoints 0..K from Gaussian Cartesian waypoint errors (zero at the start)."""
    out = []
    for r, model in enumerate(models):
        sd = 0.0 if noise is None else float(noise[r])
        off = np.zeros((K + 1, 6))
        for k in range(1, K + 1):
            dp = rng.normal(0.0, sd, 3) if sd > 0 else np.zeros(3)
            _, _, J = fk_jac_nb(*model.chain, states[r][k].q)
            off[k] = np.linalg.pinv(J[3:6]) @ dp
        out.append(off)
    return out


def _smoothstep_interp(sig, tau, off):
    k = np.clip(np.searchsorted(tau, sig, side="right") - 1, 0, len(off) - 2)
    u = np.clip((sig - tau[k]) / (tau[k + 1] - tau[k]), 0.0, 1.0)
    w = u * u * (3.0 - 2.0 * u)
    return off[k] + w[:, None] * (off[k + 1] - off[k])


def execute(program: MotionProgram, models, options: SimOptions | None = None) -> ExecutionRecord:
    opts = options or SimOptions()
    K = program.steps
    states = program_states(program, models)
    prims = (program.robot1, program.robot2)
    lengths = [np.array([segment_length(models[r], states[r][k], prims[r][k]) for k in range(K)]) for r in range(2)]

    # commanded step durations: the slower arm sets the pace
    T = np.zeros(K)
    for r in range(2):
        for k in range(K):
            T[k] = max(T[k], lengths[r][k] / prims[r][k].speed)
    T = np.maximum(T, MIN_STEP_TIME)
    tau = np.concatenate([[0.0], np.cumsum(T)])

    # sigma nodes
    nodes = []
    for k in range(K):
        dq = max(np.max(np.abs(states[r][k + 1].q - states[r][k].q)) for r in range(2))
        n = _step_nodes([lengths[0][k], lengths[1][k]], dq, opts)
        nodes.append(np.linspace(tau[k], tau[k + 1], n + 1)[:-1])
    sig = np.append(np.concatenate(nodes), tau[K])
    node_k = np.concatenate([np.full(len(nd), k) for k, nd in enumerate(nodes)] + [[K - 1]])
    is_wp = np.zeros(len(sig), dtype=bool)
    wp_index = np.full(len(sig), -1)
    starts = np.cumsum([0] + [len(nd) for nd in nodes])
    is_wp[starts] = True
    wp_index[starts] = np.arange(K + 1)

    # fine points: an arm that moves through a waypoint without blending must stop there
    stop_w = np.zeros(K + 1, dtype=bool)
    stop_w[0] = stop_w[K] = True
    for k in range(K - 1):
        for r in range(2):
            moving = lengths[r][k] > 1e-9 or lengths[r][k + 1] > 1e-9 or np.any(
                np.abs(states[r][k + 2].q - states[r][k].q) > 1e-12
            )
            if prims[r][k].blend <= 0 and moving:
                stop_w[k + 1] = True

    Qs = []
    for r, model in enumerate(models):
        R, P, Qd, _ = _robot_geometry(model, states[r], prims[r], lengths[r], sig, tau, T)
        Q, ok = pose_ik_path(model, R, P, states[r][0].q)
        if not ok.all():
            j = int(np.argmin(ok))
            raise Unreachable(f"{model.name}: Cartesian target not reachable near sigma={sig[j]:.3f}")
        direct = ~np.isnan(Qd[:, 0])
        Q[direct] = Qd[direct]
        Qs.append(Q)

    if opts.noise is not None and any(v > 0 for v in opts.noise):
        rng = np.random.default_rng(opts.seed)
        offs = _noise_offsets(models, states, K, opts.noise, rng)
        for r in range(2):
            Qs[r] = Qs[r] + _smoothstep_interp(sig, tau, offs[r])

    Qall = np.hstack(Qs)
    # piecewise splines between fine points
    is_int = is_wp & stop_w[np.maximum(wp_index, 0)]
    breaks = np.flatnonzero(is_int)
    splines = []
    dq = np.empty_like(Qall)
    ddq = np.empty_like(Qall)
    for a, b in zip(breaks[:-1], breaks[1:]):
        cs = CubicSpline(sig[a : b + 1], Qall[a : b + 1], axis=0)
        splines.append((sig[a], sig[b], cs))
        dq[a:b] = cs(sig[a:b], 1)
        ddq[a:b] = cs(sig[a:b], 2)
        dq[b] = cs(sig[b], 1)
        ddq[b] = cs(sig[b], 2)
    if len(breaks) > 2:
        # at a stop node use the larger of the one-sided derivatives
        for idx, (a, b, cs) in zip(breaks[1:-1], splines[1:]):
            dq[idx] = np.where(np.abs(cs(sig[idx], 1)) > np.abs(dq[idx]), cs(sig[idx], 1), dq[idx])

    m1, m2 = models
    A = np.hstack([accel_limits(m1, Qall[:, :6]), accel_limits(m2, Qall[:, 6:])])
    vlo = -np.concatenate([m1.qd_min, m2.qd_min])
    vhi = np.concatenate([m1.qd_max, m2.qd_max])
    k_of = node_k
    cap = np.ones(len(sig))
    x, mvc = time_law_nb(sig, dq, ddq, A, vlo, vhi, cap, is_int)
    # crawl instead of stalling where the forward pass is squeezed to zero; the stretch below certifies limits
    x = np.where(is_int, x, np.maximum(x, STALL_FLOOR * cap))

    saturated = np.zeros(K, dtype=bool)
    lim = mvc < cap * (1 - 1e-9)
    for k in range(K):
        saturated[k] = bool(np.any(lim[(k_of == k) & ~is_int]))

    def q_at(s):
        out = np.empty((len(s), 12))
        for a, b, cs in splines:
            msk = (s >= a) & (s <= b)
            out[msk] = cs(s[msk])
        return out

    dwell = opts.dwell / opts.rate
    seg = _node_times(sig, x, is_int, dwell)
    t_end = seg[4]

    ratio = max(1, int(round(opts.internal_rate / opts.rate)))
    scale = 1.0
    for _ in range(30):
        n_out = int(np.ceil(t_end * scale * opts.rate)) + 2
        t_int = np.arange((n_out - 1) * ratio + 1) / (opts.rate * ratio)
        s_int = _sample_sigma(t_int / scale, *seg[:4], tau[K], t_end)
        s_out = s_int[::ratio]
        t_out = t_int[::ratio]
        Q = q_at(s_out)
        worst = _limit_ratio(Q, models, opts.rate)
        if worst <= 1.0:
            break
        scale *= worst * (1 + 1e-9)
    else:
        raise SimulationError("could not certify joint limits on the sampled trace")

    trans = np.array([_time_at(seg, tau[k], t_end) * scale for k in range(K + 1)])
    return ExecutionRecord(t_out, Q[:, :6].copy(), Q[:, 6:].copy(), s_out, trans, saturated, scale, stop_w)


def _time_at(seg, s_target, t_end):
    seg_t, seg_s, seg_v, seg_a, _ = seg
    i = np.searchsorted(seg_s, s_target, side="right") - 1
    if i >= len(seg_t) - 1 and s_target >= seg_s[-1] and seg_v[-1] == 0 and seg_a[-1] == 0:
        return t_end
    i = max(0, min(i, len(seg_t) - 1))
    ds = s_target - seg_s[i]
    v, a = seg_v[i], seg_a[i]
    if ds <= 0:
        return seg_t[i]
    if abs(a) < 1e-15:
        return seg_t[i] + ds / v if v > 0 else seg_t[i]
    disc = max(v * v + 2 * a * ds, 0.0)
    return seg_t[i] + (np.sqrt(disc) - v) / a


def limit_excess(Q, models, rate):
    """Finite-difference joint velocity and acceleration (rest assumed before and after)."""
    m1, m2 = models
    P = np.vstack([Q[:1], Q, Q[-1:]])
    v = np.diff(P, axis=0) * rate
    a = np.diff(P, n=2, axis=0) * rate**2
    vhi = np.concatenate([m1.qd_max, m2.qd_max])
    vlo = np.concatenate([m1.qd_min, m2.qd_min])
    A = np.hstack([accel_limits(m1, Q[:, :6]), accel_limits(m2, Q[:, 6:])])
    return v, a, vlo, vhi, A


def _limit_ratio(Q, models, rate):
    v, a, vlo, vhi, A = limit_excess(Q, models, rate)
    rv = np.max(np.maximum(v / vhi, v / vlo))
    ra = np.sqrt(np.max(np.abs(a) / A))
    return float(max(rv, ra))


def average_runs(program: MotionProgram, models, n: int, options: SimOptions | None = None) -> ExecutionRecord:
    """Pointwise mean of ``n`` runs aligned on the shared path parameter, at the mean duration.

    Output sample ``i`` sits at the mean normalized-time progress of the runs;
    every run contributes its joints at the moment it reached that progress.
    """
    opts = options or SimOptions()
    if n < 1:
        raise ValueError("n must be at least 1")
    noisy = opts.noise is not None and any(v > 0 for v in opts.noise)
    if n == 1 or not noisy:
        return execute(program, models, opts)
    runs = []
    for i in range(n):
        o = SimOptions(**{**opts.__dict__, "seed": opts.seed + i})
        runs.append(execute(program, models, o))
    T = np.mean([r.t[-1] for r in runs])
    m = int(round(T * opts.rate)) + 1
    t = np.arange(m) / opts.rate
    u = t / t[-1]
    sig = np.mean([np.interp(u, r.t / r.t[-1], r.sigma) for r in runs], axis=0)
    acc1 = np.zeros((m, 6))
    acc2 = np.zeros((m, 6))
    for r in runs:
        s_r = r.sigma + 1e-12 * np.arange(len(r.sigma))  # strictly increasing through dwells
        tr = np.interp(sig, s_r, r.t)
        for j in range(6):
            acc1[:, j] += np.interp(tr, r.t, r.q1[:, j])
            acc2[:, j] += np.interp(tr, r.t, r.q2[:, j])
    base = runs[0]
    return ExecutionRecord(t, acc1 / n, acc2 / n, sig, base.transition_times, base.saturated, base.time_scale, base.fine_points)
