"""Execution metrics and waypoint iteration.

Errors are measured against the closest point of the target curve; the
waypoint updates are a proportional shift along the local error followed by a
spline-gradient correction of the remaining error peaks, with the commanded
speed backed off until every tolerance holds.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.interpolate import CubicSpline
from scipy.signal import find_peaks
from scipy.spatial.transform import Rotation

from .curve import Curve, interpolate
from .exec_sim import ExecutionRecord, SimOptions, average_runs
from .kinematics import fk_batch
from .motion_program import MotionProgram, program_states, set_blend
from .relative_ik import solve_pose_ik


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class Tolerances:
    eps_speed: float = 0.05  # fraction
    eps_pos: float = 0.5  # mm
    eps_norm: float = 3.0  # deg

    def __post_init__(self):
        if not (self.eps_speed > 0 and self.eps_pos > 0 and self.eps_norm > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class Metrics:
    max_pos_err: float
    max_norm_err: float  # deg
    mu_avg: float
    speed_std_ratio: float  # percent
    t: np.ndarray = field(repr=False, default=None)
    gate: np.ndarray = field(repr=False, default=None)
    lam: np.ndarray = field(repr=False, default=None)
    pos_err: np.ndarray = field(repr=False, default=None)
    norm_err: np.ndarray = field(repr=False, default=None)  # rad
    speed: np.ndarray = field(repr=False, default=None)
    e_p: np.ndarray = field(repr=False, default=None)  # world frame, p1 - p2 - R2 p*
    e_axis: np.ndarray = field(repr=False, default=None)  # world unit axis taking e_z1 toward -R2 n*

    def ok(self, tol: Tolerances):
        return (
            self.max_pos_err <= tol.eps_pos
            and self.max_norm_err <= tol.eps_norm
            and self.speed_std_ratio <= 100.0 * tol.eps_speed
        )

    def summary(self):
        return {
            "max_pos_err": self.max_pos_err,
            "max_norm_err": self.max_norm_err,
            "mu_avg": self.mu_avg,
            "speed_std_ratio": self.speed_std_ratio,
        }


@njit(cache=True)
def _closest_nb(P, N, lam, Q):
    """Closest polyline point: lambda, foot, interpolated normal, and whether it lies past an end."""
    m = Q.shape[0]
    n = P.shape[0]
    out_l = np.empty(m)
    foot = np.empty((m, 3))
    nrm = np.empty((m, 3))
    beyond = np.zeros(m, dtype=np.bool_)
    for k in range(m):
        best = 1e300
        for s in range(n - 1):
            ab = P[s + 1] - P[s]
            L2 = ab[0] ** 2 + ab[1] ** 2 + ab[2] ** 2
            d = Q[k] - P[s]
            u_raw = (d[0] * ab[0] + d[1] * ab[1] + d[2] * ab[2]) / L2
            u = min(1.0, max(0.0, u_raw))
            e = d - u * ab
            dd = e[0] ** 2 + e[1] ** 2 + e[2] ** 2
            if dd < best:
                best = dd
                out_l[k] = lam[s] + u * (lam[s + 1] - lam[s])
                foot[k] = P[s] + u * ab
                v = (1.0 - u) * N[s] + u * N[s + 1]
                nrm[k] = v / np.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
                beyond[k] = (s == 0 and u_raw < 0.0) or (s == n - 2 and u_raw > 1.0)
    return out_l, foot, nrm, beyond


def relative_trace(record: ExecutionRecord, models):
    """World poses of both TCPs and the relative position/normal in robot 2's TCP frame."""
    R1, p1 = fk_batch(models[0], record.q1)
    R2, p2 = fk_batch(models[1], record.q2)
    prel = np.einsum("kji,kj->ki", R2, p1 - p2)
    nrel = -np.einsum("kji,kj->ki", R2, R1[:, :, 2])
    return R1, p1, R2, p2, prel, nrel


def compute_metrics(record: ExecutionRecord, curve: Curve, models) -> Metrics:
    """Tracking and speed-uniformity statistics of an execution.

    Samples whose closest curve point is an end point reached from beyond the
    curve (lead-in and lead-out motion) are gated out.
    """
    R1, p1, R2, p2, prel, nrel = relative_trace(record, models)
    lam, foot, nfoot, beyond = _closest_nb(
        np.ascontiguousarray(curve.p), np.ascontiguousarray(curve.n), np.ascontiguousarray(curve.lam), np.ascontiguousarray(prel)
    )
    gate = ~beyond
    if gate.sum() < 3:
        raise MetricsError("record has fewer than 3 samples on the curve")
    dvec = prel - foot
    pos_err = np.linalg.norm(dvec, axis=1)
    c = np.cross(nrel, nfoot)
    norm_err = np.arctan2(np.linalg.norm(c, axis=1), np.sum(nrel * nfoot, axis=1))
    t = np.asarray(record.t, dtype=float)
    speed = np.linalg.norm(np.gradient(prel, t, axis=0), axis=1)
    e_p = np.einsum("kij,kj->ki", R2, dvec)
    ez1 = R1[:, :, 2]
    target = -np.einsum("kij,kj->ki", R2, nfoot)
    ax = np.cross(ez1, target)
    an = np.linalg.norm(ax, axis=1, keepdims=True)
    e_axis = np.divide(ax, an, out=np.zeros_like(ax), where=an > 1e-15)
    g = gate
    mu = float(np.mean(speed[g]))
    return Metrics(
        float(pos_err[g].max()),
        float(np.rad2deg(norm_err[g].max())),
        mu,
        float(100.0 * np.std(speed[g]) / mu) if mu > 0 else float("inf"),
        t,
        gate,
        lam,
        pos_err,
        norm_err,
        speed,
        e_p,
        e_axis,
    )


# ---------------------------------------------------------------------------
# waypoint geometry


def waypoint_poses(program: MotionProgram, models):
    """World TCP poses of both arms at waypoints 0..K and the relative position/normal there."""
    states = program_states(program, models)
    R1 = np.array([s.R for s in states[0]])
    p1 = np.array([s.p for s in states[0]])
    R2 = np.array([s.R for s in states[1]])
    p2 = np.array([s.p for s in states[1]])
    prel = np.einsum("kji,kj->ki", R2, p1 - p2)
    nrel = -np.einsum("kji,kj->ki", R2, R1[:, :, 2])
    return states, prel, nrel


def _adjustable(program: MotionProgram):
    """Waypoint indices whose targets may move (on-curve waypoints)."""
    K = program.steps
    return list(range(1, K)) if program.lead else list(range(1, K + 1))


def _apply_shifts(program: MotionProgram, models, states, shifts):
    """Move waypoint targets.

    ``shifts`` maps waypoint k to ``(d, axis, angle)``: the relative position
    changes by ``d`` (world frame) and the relative normal turns by ``angle``
    about the world ``axis``. Translation is split evenly between the arms,
    rotation as +angle/2 on robot 1 and -angle/2 on robot 2, and robot 1 absorbs
    the lever-arm motion caused by robot 2's rotation. Returns the new program
    and the waypoints whose joint-space update failed.
    """
    out = program.copy()
    flagged = []
    moves = {}
    for k, (d, axis, angle) in shifts.items():
        s1, s2 = states[0][k], states[1][k]
        rot1 = Rotation.from_rotvec(0.5 * angle * axis)
        rot2 = Rotation.from_rotvec(-0.5 * angle * axis)
        R1n = (rot1 * Rotation.from_matrix(s1.R)).as_matrix()
        R2n = (rot2 * Rotation.from_matrix(s2.R)).as_matrix()
        p2n = s2.p - 0.5 * d
        c = s2.R.T @ (s1.p - s2.p + d)
        p1n = p2n + R2n @ c
        moves[k] = ((R1n, p1n), (R2n, p2n))
    for k, poses in moves.items():
        for r, prims in enumerate((out.robot1, out.robot2)):
            prim = prims[k - 1]
            Rn, pn = poses[r]
            if prim.kind == "J":
                q, ok = solve_pose_ik(models[r], Rn, pn, states[r][k].q)
                if not ok:
                    flagged.append(k)
                    continue
                prim.target = q
            else:
                prim.target = np.concatenate([pn, Rotation.from_matrix(Rn).as_rotvec()])
    # circle points follow the mean shift of their segment end points
    for r, prims in enumerate((out.robot1, out.robot2)):
        for k, prim in enumerate(prims):
            if prim.kind != "C":
                continue
            ds = []
            for w in (k, k + 1):
                if w in moves:
                    ds.append(moves[w][r][1] - states[r][w].p)
                else:
                    ds.append(np.zeros(3))
            prim.via = prim.via + 0.5 * (ds[0] + ds[1])
    return out, sorted(set(flagged))


def _closest_sample(prel_w, prel, gate):
    idx = np.flatnonzero(gate)
    j = np.argmin(np.sum((prel[idx] - prel_w) ** 2, axis=1))
    return int(idx[j])


def proportional_adjust(program: MotionProgram, record: ExecutionRecord, curve: Curve, models, gamma=0.7, metrics=None, flagged=None):
    """Shift every on-curve waypoint against the executed error next to it."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    m = metrics if metrics is not None else compute_metrics(record, curve, models)
    _, _, _, _, prel, _ = relative_trace(record, models)
    states, wp_rel, _ = waypoint_poses(program, models)
    shifts = {}
    for k in _adjustable(program):
        j = _closest_sample(wp_rel[k], prel, m.gate)
        d = -gamma * m.e_p[j]
        shifts[k] = (d, m.e_axis[j], gamma * float(m.norm_err[j]))
    out, bad = _apply_shifts(program, models, states, shifts)
    if flagged is not None:
        flagged.extend(bad)
    return out


# ---------------------------------------------------------------------------
# multi-peak gradient correction


def _waypoint_lams(curve: Curve, prel):
    lam, _, _, _ = _closest_nb(
        np.ascontiguousarray(curve.p), np.ascontiguousarray(curve.n), np.ascontiguousarray(curve.lam), np.ascontiguousarray(prel)
    )
    return lam


def _spline_at(lam_w, W, lam):
    cs = CubicSpline(lam_w, W, axis=0)
    return cs(lam), cs(lam, 1)


def _curve_frame(curve: Curve, lam):
    """Curve point and unit tangent at ``lam``."""
    h = 0.5 * curve.step
    p, _ = interpolate(curve, [lam, lam - h, lam + h])
    t = p[2] - p[1]
    return p[0], t / np.linalg.norm(t)


def _curve_normal(curve: Curve, lam):
    n = np.array([np.interp(lam, curve.lam, curve.n[:, i]) for i in range(3)])
    return n / np.linalg.norm(n)


def _rotvec_between(a, b):
    c = np.cross(a, b)
    s = np.linalg.norm(c)
    if s < 1e-15:
        return np.zeros(3)
    return c / s * np.arctan2(s, a @ b)


def _normal_error(v, tangent):
    t = tangent / np.linalg.norm(tangent)
    return v - (v @ t) * t


def _descend(f, x0, h, max_halvings=8):
    """One backtracking gradient step on ``f`` from ``x0``; None when the gradient is flat or no decrease is found."""
    f0 = f(x0)
    g = np.empty_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        g[i] = (f(x0 + e) - f(x0 - e)) / (2 * h)
    gn = float(np.linalg.norm(g))
    if gn < 1e-9:
        return None
    step = 2.0 * f0 / gn**2  # Gauss-Newton length for a squared residual
    for _ in range(max_halvings + 1):
        x = x0 - step * g
        if f(x) < f0:
            return x
        step *= 0.5
    return None


def find_error_peaks(values, gate, height, prominence):
    v = np.where(gate, values, 0.0)
    peaks, _ = find_peaks(np.concatenate([[0.0], v, [0.0]]), height=height, prominence=prominence)
    return peaks - 1


def multipeak_adjust(
    program: MotionProgram, record: ExecutionRecord, curve: Curve, models, tol: Tolerances | None = None, metrics=None,
    h=0.01, h_rot=1e-4, prominence=0.05, prominence_deg=0.05, neighbours=3, flagged=None,
):
    """Local spline-gradient correction of the three waypoints nearest each error peak."""
    tol = tol or Tolerances()
    m = metrics if metrics is not None else compute_metrics(record, curve, models)
    _, _, R2, _, prel, nrel = relative_trace(record, models)
    states, wp_rel, wp_n = waypoint_poses(program, models)
    ks = np.array(_adjustable(program))
    if len(ks) < 2:
        return program.copy()
    lam_w = _waypoint_lams(curve, wp_rel[ks])
    order = np.argsort(lam_w)
    ks, lam_w = ks[order], lam_w[order]
    keep = np.concatenate([[True], np.diff(lam_w) > 1e-9])
    ks, lam_w = ks[keep], lam_w[keep]
    if len(ks) < 2:
        return program.copy()
    W = wp_rel[ks].copy()
    Nw = wp_n[ks].copy()
    R2w = np.array([states[1][k].R for k in ks])
    cand_d = {}
    cand_rot = {}
    bad = []

    # position peaks
    for j in find_error_peaks(m.pos_err, m.gate, tol.eps_pos, prominence):
        near = np.argsort(np.abs(lam_w - m.lam[j]))[:neighbours]
        e_meas = R2[j].T @ m.e_p[j]
        cp, ct = _curve_frame(curve, m.lam[j])
        S0, _ = _spline_at(lam_w, W, m.lam[j])
        # predicted offset off the curve, moved against the measured normal error
        target = _normal_error(S0 - cp, ct) - _normal_error(e_meas, ct)

        def f(x, near=near, lam=m.lam[j], target=target, cp=cp, ct=ct):
            Wx = W.copy()
            Wx[near] += x.reshape(-1, 3)
            S, _ = _spline_at(lam_w, Wx, lam)
            r = _normal_error(S - cp, ct) - target
            return float(r @ r)

        x = _descend(f, np.zeros(3 * len(near)), h)
        if x is None:
            bad.append(int(ks[near[0]]))
            continue
        for i, dx in zip(near, x.reshape(-1, 3)):
            cand_d[i] = cand_d.get(i, 0) + dx

    # orientation peaks: same scheme on the relative normal with rotation-vector increments
    for j in find_error_peaks(np.rad2deg(m.norm_err), m.gate, tol.eps_norm, prominence_deg):
        near = np.argsort(np.abs(lam_w - m.lam[j]))[:neighbours]
        n_meas = nrel[j] / np.linalg.norm(nrel[j])
        n_tgt = _curve_normal(curve, m.lam[j])
        S0, _ = _spline_at(lam_w, Nw, m.lam[j])
        n0 = S0 / np.linalg.norm(S0)
        # predicted normal must turn by the executed rotation error, taken back out
        corr = Rotation.from_rotvec(_rotvec_between(n_meas, n_tgt))
        want = corr.apply(n0)

        def f(x, near=near, lam=m.lam[j], want=want):
            Nx = Nw.copy()
            Nx[near] = Rotation.from_rotvec(x.reshape(-1, 3)).apply(Nx[near])
            S, _ = _spline_at(lam_w, Nx, lam)
            r = S / np.linalg.norm(S) - want
            return float(r @ r)

        x = _descend(f, np.zeros(3 * len(near)), h_rot)
        if x is None:
            bad.append(int(ks[near[0]]))
            continue
        for i, dx in zip(near, x.reshape(-1, 3)):
            cand_rot[i] = cand_rot.get(i, 0) + dx

    shifts = {}
    for i in set(cand_d) | set(cand_rot):
        k = int(ks[i])
        d_world = R2w[i] @ cand_d.get(i, np.zeros(3))
        rv = R2w[i] @ cand_rot.get(i, np.zeros(3))
        ang = float(np.linalg.norm(rv))
        axis = rv / ang if ang > 0 else np.array([0.0, 0.0, 1.0])
        shifts[k] = (d_world, axis, ang)
    out, fails = _apply_shifts(program, models, states, shifts)
    if flagged is not None:
        flagged.extend(sorted(set(bad + fails)))
    return out


# ---------------------------------------------------------------------------
# the tuning loop

HISTORY_COLUMNS = ("iteration", "mu_cmd", "max_pos_err", "max_norm_err", "mu_avg", "std_ratio", "blend", "action")


@dataclass
class TuneOptions:
    gamma: float = 0.7
    runs: int = 5
    noise: tuple | None = None  # per-axis sigma per robot, mm
    seed: int = 0
    fresh_noise: bool = False  # new noise draws every iteration instead of common random numbers
    backoff: float = 0.9
    blend_start: float = 10.0
    blend_growth: float = 1.5
    blend_max: float = 50.0
    max_iter: int = 20
    mu_floor: float = 1.0
    improve: float = 0.01
    dip: float = 0.05  # relative speed dip at a waypoint that calls for a larger blend
    sim: SimOptions = field(default_factory=SimOptions)


@dataclass
class TuneResult:
    program: MotionProgram
    metrics: Metrics
    history: list
    success: bool
    message: str = ""
    flagged: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.program, self.metrics, self.history))


def write_history(history, path):
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            fh.write(",".join(str(row[c]) if c == "action" else repr(row[c]) for c in HISTORY_COLUMNS) + "\n")


def violation(m: Metrics, tol: Tolerances):
    """Largest tolerance ratio; at most 1 means feasible."""
    return max(m.max_pos_err / tol.eps_pos, m.max_norm_err / tol.eps_norm, m.speed_std_ratio / (100.0 * tol.eps_speed))


def _shape_violation(m: Metrics, tol: Tolerances):
    return max(m.max_pos_err / tol.eps_pos, m.max_norm_err / tol.eps_norm)


def waypoint_dip(record: ExecutionRecord, m: Metrics, window=0.05):
    """Largest relative speed drop within ``window`` s of an interior waypoint passage."""
    tt = record.transition_times
    if tt is None or len(tt) < 3:
        return 0.0
    worst = 0.0
    for tk in tt[1:-1]:
        sel = m.gate & (np.abs(m.t - tk) <= window)
        if sel.any():
            worst = max(worst, 1.0 - float(m.speed[sel].min()) / m.mu_avg)
    return worst


def evaluate(program: MotionProgram, curve: Curve, models, options: TuneOptions, iteration=0):
    sim = dataclasses.replace(options.sim, noise=options.noise, seed=options.seed + (1000 * iteration if options.fresh_noise else 0))
    rec = average_runs(program, models, options.runs, sim)
    return rec, compute_metrics(rec, curve, models)


def tune(program: MotionProgram, curve: Curve, models, tol: Tolerances | None = None, mu_start=None, options: TuneOptions | None = None) -> TuneResult:
    """Waypoint iteration with speed backoff and blend growth.

    Each iteration executes the current program, then takes exactly one action:
    a proportional waypoint shift while it keeps reducing the error by more
    than ``improve``, a multi-peak correction once it stalls, a larger blend when
    the speed dips at waypoints, or a speed reduction by ``backoff``.
    """
    tol = tol or Tolerances()
    opt = options or TuneOptions()
    mu = float(mu_start if mu_start is not None else program.mu)
    if mu <= 0:
        raise ValueError("start speed must be positive")
    blend = opt.blend_start
    geom = program.copy()  # waypoint geometry carried between speed levels
    current = set_blend(geom.scaled(mu), models, blend)
    history, flagged = [], []
    best = None  # (violation, program, metrics)
    phase, prev_shape = "prop", None
    for it in range(opt.max_iter):
        try:
            rec, m = evaluate(current, curve, models, opt, it)
        except Exception as exc:  # corner failure or unreachable target: slow down and retry
            history.append(_row(it, mu, None, blend, f"error: {type(exc).__name__}"))
            mu *= opt.backoff
            if mu < opt.mu_floor:
                break
            current = set_blend(geom.scaled(mu), models, blend)
            continue
        v = violation(m, tol)
        if best is None or v < best[0]:
            best = (v, current.copy(), m)
        if m.ok(tol):
            history.append(_row(it, mu, m, blend, "done"))
            return TuneResult(current, m, history, True, f"tolerances met after {it + 1} executions", flagged)
        shape = _shape_violation(m, tol)
        if shape > 1.0:
            improving = prev_shape is None or shape < (1.0 - opt.improve) * prev_shape
            if phase == "prop" and improving:
                action = "proportional"
                nxt = proportional_adjust(current, rec, curve, models, opt.gamma, metrics=m, flagged=flagged)
            elif phase in ("prop", "peak") and (phase == "prop" or improving):
                phase = "peak"
                action = "multipeak"
                nxt = multipeak_adjust(current, rec, curve, models, tol, metrics=m, flagged=flagged)
            else:
                nxt = None
            prev_shape = shape if prev_shape is None else min(prev_shape, shape)
            if nxt is not None:
                history.append(_row(it, mu, m, blend, action))
                geom = nxt
                current = nxt
                continue
        elif not (rec.saturated is not None and rec.saturated.any()) and waypoint_dip(rec, m) > opt.dip and blend < opt.blend_max:
            blend = min(opt.blend_max, blend * opt.blend_growth)
            history.append(_row(it, mu, m, blend, "blend"))
            current = set_blend(current, models, blend)
            continue
        # waypoint updates exhausted or speed non-uniform: slow down from the best geometry so far
        history.append(_row(it, mu, m, blend, "backoff"))
        if rec.saturated is not None and rec.saturated.any():
            mu = min(mu, m.mu_avg)  # the limits already cap the run below the command
        mu *= opt.backoff
        phase, prev_shape = "prop", None
        if mu < opt.mu_floor:
            break
        geom = current
        current = set_blend(geom.scaled(mu), models, blend)
    if best is None:
        raise MetricsError("no execution succeeded")
    return TuneResult(best[1], best[2], history, False, "tolerances not met; returning best-so-far", flagged)


def _row(it, mu, m, blend, action):
    nan = float("nan")
    return {
        "iteration": it,
        "mu_cmd": float(mu),
        "max_pos_err": m.max_pos_err if m else nan,
        "max_norm_err": m.max_norm_err if m else nan,
        "mu_avg": m.mu_avg if m else nan,
        "std_ratio": m.speed_std_ratio if m else nan,
        "blend": float(blend),
        "action": action,
    }


# ---------------------------------------------------------------------------
# conventional baseline


@dataclass
class BaselineResult:
    program: MotionProgram
    metrics: Metrics
    speed: float
    success: bool
    probes: list


def baseline_search(program: MotionProgram, curve: Curve, models, tol: Tolerances | None = None, hi=None, options: TuneOptions | None = None, iters=12):
    """Largest commanded speed at which ``program`` meets every tolerance, by bisection."""
    tol = tol or Tolerances()
    opt = options or TuneOptions()
    hi = float(hi if hi is not None else program.mu)
    lo = opt.mu_floor
    probes = []
    best = None

    def run(v):
        p = set_blend(program.scaled(v), models, opt.blend_start)
        try:
            _, m = evaluate(p, curve, models, opt)
        except Exception:
            probes.append((v, None))
            return p, None
        probes.append((v, m))
        return p, m

    p, m = run(hi)
    if m is not None and m.ok(tol):
        return BaselineResult(p, m, hi, True, probes)
    p, m = run(lo)
    if m is None or not m.ok(tol):
        return BaselineResult(p, m, lo, False, probes)
    best = (lo, p, m)
    for _ in range(iters):
        mid = np.sqrt(lo * hi)
        p, m = run(mid)
        if m is not None and m.ok(tol):
            lo = mid
            best = (mid, p, m)
        else:
            hi = mid
    return BaselineResult(best[1], best[2], best[0], True, probes)
