"""Synchronized dual-arm motion programs and the dual greedy primitive fit.

A program is two equally long lists of primitives (moveL, moveC, moveJ); entry
``k`` of both lists forms one synchronized step. Cartesian targets are TCP
poses in the world frame, orientations stored as rotation vectors.

Each fit anchors the segment start at the previous segment's end so that the
emitted primitives are geometrically continuous, and parameterizes the fitted
motion by the lambda fraction of the span (uniform progress along it).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit
from scipy.spatial.transform import Rotation

from .curve import Curve
from .kinematics import RobotModel, fk_batch, forward_kinematics
from .relative_ik import JointPath, solve_pose_ik

KINDS = ("L", "C", "J")
HEADER = "dualmotion-program v1"


class FitError(RuntimeError):
    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class ProgramFormatError(ValueError):
    pass


@dataclass
class Primitive:
    """One motion segment of one robot.

    ``target`` is ``[x, y, z, rx, ry, rz]`` for L/C and six joint values for J.
    ``via`` is the circle point of C. ``speed`` is TCP mm/s for every kind.
    """

    kind: str
    target: np.ndarray
    via: np.ndarray | None = None
    speed: float = 100.0
    blend: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.target = np.asarray(self.target, dtype=float)
        if self.via is not None:
            self.via = np.asarray(self.via, dtype=float)
        if self.kind == "C" and self.via is None:
            raise ValueError("moveC needs a via point")
        if not self.speed > 0 or self.blend < 0:
            raise ValueError("speed must be positive and blend non-negative")

    @property
    def position(self):
        return self.target[:3]

    @property
    def rotation(self):
        return Rotation.from_rotvec(self.target[3:6]).as_matrix()

    def copy(self):
        return dataclasses.replace(self, target=self.target.copy(), via=None if self.via is None else self.via.copy())


@dataclass
class MotionProgram:
    robot1: list
    robot2: list
    start_q1: np.ndarray
    start_q2: np.ndarray
    mu: float = 0.0
    lead: bool = True
    breakpoints: list = field(default_factory=list)  # curve index reached at each step end, -1 off-curve

    def __post_init__(self):
        if len(self.robot1) != len(self.robot2):
            raise ValueError("robot programs must share the segment count")
        self.start_q1 = np.asarray(self.start_q1, dtype=float)
        self.start_q2 = np.asarray(self.start_q2, dtype=float)

    @property
    def steps(self):
        return len(self.robot1)

    @property
    def interior_count(self):
        return self.steps - 2 if self.lead else self.steps

    def copy(self):
        return MotionProgram(
            [p.copy() for p in self.robot1],
            [p.copy() for p in self.robot2],
            self.start_q1.copy(),
            self.start_q2.copy(),
            self.mu,
            self.lead,
            list(self.breakpoints),
        )

    def kinds(self, robot):
        prims = self.robot1 if robot == 1 else self.robot2
        return "".join(p.kind for p in prims)

    def scaled(self, mu_new):
        """Same geometry with every speed scaled to a new relative speed."""
        out = self.copy()
        f = mu_new / self.mu
        for p in out.robot1 + out.robot2:
            p.speed *= f
        out.mu = float(mu_new)
        return out


# ---------------------------------------------------------------------------
# single-segment fits


class SegmentFit(NamedTuple):
    primitive: Primitive | None
    deviation: float
    degenerate: bool = False


def _fractions(n, t):
    if t is None:
        return np.linspace(0.0, 1.0, n)
    return np.asarray(t, dtype=float)


def _rotvec(R):
    return Rotation.from_matrix(R).as_rotvec()


def _fit_rotation(R, Ra, t):
    """Least-squares end rotation for axis-angle interpolation from ``Ra``."""
    rel = Rotation.from_matrix(R) * Rotation.from_matrix(Ra).inv()
    w = rel.as_rotvec()
    denom = np.sum(t * t)
    wd = (t[:, None] * w).sum(axis=0) / denom
    return (Rotation.from_rotvec(wd) * Rotation.from_matrix(Ra)).as_matrix()


def _point_segment_dist(P, a, b):
    ab = b - a
    L2 = ab @ ab
    if L2 < 1e-24:
        return np.linalg.norm(P - a, axis=1)
    u = np.clip((P - a) @ ab / L2, 0.0, 1.0)
    return np.linalg.norm(P - (a + u[:, None] * ab), axis=1)


def fit_segment_L(p, R, start=None, t=None, pin_end=False) -> SegmentFit:
    """moveL fit of poses ``(p, R)``; the first pose is the nominal start.

    The end position minimizes the squared error of ``start + t * (end - start)``
    against the points; ``pin_end`` uses the last point instead.
    """
    p = np.asarray(p, dtype=float)
    R = np.asarray(R, dtype=float)
    if len(p) < 2:
        raise FitError("moveL fit needs at least 2 points")
    Ra, pa = start if start is not None else (R[0], p[0])
    t = _fractions(len(p), t)
    if pin_end:
        pe, Re = p[-1], R[-1]
    else:
        pe = pa + (t[:, None] * (p - pa)).sum(axis=0) / np.sum(t * t)
        Re = _fit_rotation(R, Ra, t)
    dev = float(np.max(_point_segment_dist(p, pa, pe)))
    return SegmentFit(Primitive("L", np.concatenate([pe, _rotvec(Re)])), dev)


def circle_through(a, b, c):
    """Centre, radius, unit normal of the circle through three points (None if collinear)."""
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    nn = n @ n
    if nn < 1e-18 * (ab @ ab) * (ac @ ac) or nn == 0.0:
        return None
    centre = a + (np.cross(n, ab) * (ac @ ac) + np.cross(ac, n) * (ab @ ab)) / (2.0 * nn)
    return centre, float(np.linalg.norm(a - centre)), n / np.sqrt(nn)


def arc_geometry(pa, via, pe):
    """Arc from pa through via to pe: centre, radius, in-plane basis (u, v), sweep angle."""
    circ = circle_through(pa, via, pe)
    if circ is None:
        return None
    centre, r, n = circ
    u = (pa - centre) / r
    v = np.cross(n, u)

    def ang(x):
        d = x - centre
        return np.arctan2(d @ v, d @ u) % (2 * np.pi)

    av, ae = ang(via), ang(pe)
    sweep = ae if av <= ae else ae - 2 * np.pi
    return centre, r, u, v, sweep


def arc_points(geom, s):
    centre, r, u, v, sweep = geom
    th = np.asarray(s, dtype=float) * sweep
    return centre + r * (np.cos(th)[:, None] * u + np.sin(th)[:, None] * v)


def fit_segment_C(p, R, start=None, t=None, max_radius=1e6) -> SegmentFit:
    """moveC fit: principal-component plane, circle constrained through the start.

    Collinear points are reported ``degenerate`` with the deviation of the
    moveL fallback.
    """
    p = np.asarray(p, dtype=float)
    R = np.asarray(R, dtype=float)
    if len(p) < 3:
        raise FitError("moveC fit needs at least 3 points")
    Ra, pa = start if start is not None else (R[0], p[0])
    t = _fractions(len(p), t)
    X = np.vstack([pa, p]) - pa
    span = np.max(np.linalg.norm(X, axis=1))
    _, sv, vt = np.linalg.svd(X - X.mean(axis=0))
    e1, e2 = vt[0], vt[1]
    xy = np.column_stack([X @ e1, X @ e2])
    # circle through the origin: x^2 + y^2 = 2 a x + 2 b y
    A = 2.0 * xy
    rhs = np.sum(xy * xy, axis=1)
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    rad = float(np.hypot(*sol))
    if sv[1] <= 1e-9 * max(sv[0], 1e-300) or rad > max_radius * max(span, 1e-12):
        line = fit_segment_L(p, R, start=(Ra, pa), t=t)
        return SegmentFit(None, line.deviation, True)
    centre = pa + sol[0] * e1 + sol[1] * e2
    n = np.cross(e1, e2)
    u = (pa - centre) / rad
    v = np.cross(n, u)
    d = p - centre
    ang = np.unwrap(np.concatenate([[0.0], np.arctan2(d @ v, d @ u)]))[1:]
    sweep = ang[-1]
    geom = (centre, rad, u, v, sweep)
    pe = arc_points(geom, [1.0])[0]
    via = arc_points(geom, [0.5])[0]
    # deviation against the fitted arc: radial/plane distance inside the sweep, else endpoint distance
    inside = (ang / sweep >= 0.0) & (ang / sweep <= 1.0) if sweep != 0 else np.zeros(len(p), bool)
    dp = d @ n
    dr = np.hypot(d @ u, d @ v) - rad
    dist = np.where(inside, np.hypot(dp, dr), np.minimum(np.linalg.norm(p - pa, axis=1), np.linalg.norm(p - pe, axis=1)))
    Re = _fit_rotation(R, Ra, t)
    prim = Primitive("C", np.concatenate([pe, _rotvec(Re)]), via=via)
    return SegmentFit(prim, float(np.max(dist)))


def fit_segment_J(q, start=None, t=None, pin_end=False) -> SegmentFit:
    """moveJ fit: joint-linear motion from the anchored start; deviation in rad (max norm)."""
    q = np.asarray(q, dtype=float)
    if len(q) < 2:
        raise FitError("moveJ fit needs at least 2 samples")
    qa = np.asarray(start, dtype=float) if start is not None else q[0]
    t = _fractions(len(q), t)
    qe = q[-1].copy() if pin_end else qa + (t[:, None] * (q - qa)).sum(axis=0) / np.sum(t * t)
    pred = qa + t[:, None] * (qe - qa)
    return SegmentFit(Primitive("J", qe), float(np.max(np.abs(q - pred))))


# ---------------------------------------------------------------------------
# segment evaluation


@dataclass
class RobotState:
    q: np.ndarray
    R: np.ndarray
    p: np.ndarray


def state_from_q(model, q):
    pose = forward_kinematics(model, q)
    return RobotState(np.array(q, dtype=float), pose.R, pose.p)


def segment_poses(model: RobotModel, state: RobotState, prim: Primitive, s):
    """TCP poses along a primitive at progress fractions ``s`` (pre-blending)."""
    s = np.asarray(s, dtype=float)
    if prim.kind == "J":
        Q = state.q + s[:, None] * (prim.target - state.q)
        return fk_batch(model, Q)
    Ra = Rotation.from_matrix(state.R)
    w = (Rotation.from_rotvec(prim.target[3:6]) * Ra.inv()).as_rotvec()
    Rs = (Rotation.from_rotvec(s[:, None] * w) * Ra).as_matrix()
    if prim.kind == "L":
        ps = state.p + s[:, None] * (prim.position - state.p)
    else:
        geom = arc_geometry(state.p, prim.via, prim.position)
        ps = arc_points(geom, s) if geom is not None else state.p + s[:, None] * (prim.position - state.p)
    return Rs, ps


def segment_length(model, state, prim, n=64):
    if prim.kind == "L":
        return float(np.linalg.norm(prim.position - state.p))
    _, ps = segment_poses(model, state, prim, np.linspace(0.0, 1.0, n + 1))
    return float(np.sum(np.linalg.norm(np.diff(ps, axis=0), axis=1)))


def advance(model, state: RobotState, prim: Primitive, seed=None) -> RobotState:
    """Robot state after executing ``prim`` from ``state``."""
    if prim.kind == "J":
        return state_from_q(model, prim.target)
    Re, pe = prim.rotation, prim.position
    q, ok = solve_pose_ik(model, Re, pe, state.q if seed is None else seed)
    if not ok:
        raise FitError(f"{model.name}: segment end pose is not reachable")
    return RobotState(q, Re, pe.copy())


def program_states(program: MotionProgram, models):
    """Robot states at the start and after every step, for both robots."""
    out = []
    for model, prims, q0 in ((models[0], program.robot1, program.start_q1), (models[1], program.robot2, program.start_q2)):
        st = [state_from_q(model, q0)]
        for prim in prims:
            st.append(advance(model, st[-1], prim))
        out.append(st)
    return out


# ---------------------------------------------------------------------------
# relative deviation against the curve


@njit(cache=True)
def _polyline_dev_nb(P, N, Q, NQ, hints, lo, hi, w):
    m = Q.shape[0]
    dist = np.empty(m)
    ang = np.empty(m)
    for k in range(m):
        a0 = max(lo, hints[k] - w)
        a1 = min(hi - 1, hints[k] + w)
        best = 1e300
        bn = np.zeros(3)
        for s in range(a0, a1 + 1):
            ab = P[s + 1] - P[s]
            L2 = ab[0] ** 2 + ab[1] ** 2 + ab[2] ** 2
            d = Q[k] - P[s]
            u = (d[0] * ab[0] + d[1] * ab[1] + d[2] * ab[2]) / L2
            u = min(1.0, max(0.0, u))
            e = d - u * ab
            dd = e[0] ** 2 + e[1] ** 2 + e[2] ** 2
            if dd < best:
                best = dd
                bn = (1.0 - u) * N[s] + u * N[s + 1]
        dist[k] = np.sqrt(best)
        nq = NQ[k]
        c0 = nq[1] * bn[2] - nq[2] * bn[1]
        c1 = nq[2] * bn[0] - nq[0] * bn[2]
        c2 = nq[0] * bn[1] - nq[1] * bn[0]
        ang[k] = np.arctan2(np.sqrt(c0 * c0 + c1 * c1 + c2 * c2), nq[0] * bn[0] + nq[1] * bn[1] + nq[2] * bn[2])
    return dist, ang


def relative_pose(R1, p1, R2, p2):
    """Tool position and tool-axis-derived normal in robot 2's TCP frame."""
    prel = np.einsum("kji,kj->ki", R2, p1 - p2)
    nrel = -np.einsum("kji,kj->ki", R2, R1[:, :, 2])
    return prel, nrel


def span_deviation(curve: Curve, i0, i1, prel, nrel, hints, window=40, margin=2):
    """Distance (mm) and normal angle (rad) of relative samples to the curve span [i0, i1].

    The span is widened by ``margin`` samples so an anchored start that sits
    within tolerance of the previous span is not judged against a cut-off polyline.
    """
    i0 = max(0, i0 - margin)
    i1 = min(len(curve) - 1, max(i1 + margin, i0 + 1))
    return _polyline_dev_nb(
        np.ascontiguousarray(curve.p),
        np.ascontiguousarray(curve.n),
        np.ascontiguousarray(prel),
        np.ascontiguousarray(nrel),
        np.asarray(hints, dtype=np.int64),
        int(i0),
        int(i1),
        int(window),
    )


# ---------------------------------------------------------------------------
# dual greedy fit


@dataclass
class FitOptions:
    tol: float = 0.1  # mm, relative position
    normal_tol_deg: float = 1.0
    extension: float = 30.0  # mm of relative path for lead-in/out
    blend: float = 0.0
    pin_end: bool = False


class _Candidate(NamedTuple):
    prim: Primitive
    R: np.ndarray  # poses on the evaluation grid
    p: np.ndarray


class _Span:
    """Cartesian data of one robot over the full path (world frame)."""

    def __init__(self, model, Q):
        self.model = model
        self.Q = Q
        self.R, self.p = fk_batch(model, Q)


def _eval_grid(lam, s, e):
    t = (lam[s : e + 1] - lam[s]) / (lam[e] - lam[s])
    mid = 0.5 * (t[1:] + t[:-1])
    grid = np.empty(2 * len(t) - 1)
    grid[0::2] = t
    grid[1::2] = mid
    hints = s + np.arange(len(grid)) // 2
    return t, grid, np.minimum(hints, e - 1)


def _candidates(span: _Span, state: RobotState, s, e, t, grid, pin_end):
    out = {}
    idx = slice(s, e + 1)
    p, R = span.p[idx], span.R[idx]
    start = (state.R, state.p)
    fits = [fit_segment_L(p, R, start=start, t=t, pin_end=pin_end)]
    if e - s >= 2:
        fits.append(fit_segment_C(p, R, start=start, t=t))
    fits.append(fit_segment_J(span.Q[idx], start=state.q, t=t, pin_end=pin_end))
    for f in fits:
        if f.primitive is None:
            continue
        Rg, pg = segment_poses(span.model, state, f.primitive, grid)
        out[f.primitive.kind] = _Candidate(f.primitive, Rg, pg)
    return out


def _pair_ok(curve, c1, c2, s, e, hints, tol, ntol):
    prel, nrel = relative_pose(c1.R, c1.p, c2.R, c2.p)
    d, a = span_deviation(curve, s, e, prel, nrel, hints)
    return d.max() <= tol and a.max() <= ntol


def _feasible_pairs(curve, spans, states, s, e, opts, first_only=False):
    t, grid, hints = _eval_grid(curve.lam, s, e)
    cand1 = _candidates(spans[0], states[0], s, e, t, grid, opts.pin_end)
    cand2 = _candidates(spans[1], states[1], s, e, t, grid, opts.pin_end)
    ntol = np.deg2rad(opts.normal_tol_deg)
    pairs = []
    order = sorted(
        ((k1, k2) for k1 in KINDS for k2 in KINDS),
        key=lambda kk: (KINDS.index(kk[0]) + KINDS.index(kk[1]), KINDS.index(kk[0])),
    )
    for k1, k2 in order:
        if k1 in cand1 and k2 in cand2 and _pair_ok(curve, cand1[k1], cand2[k2], s, e, hints, opts.tol, ntol):
            pairs.append((cand1[k1].prim, cand2[k2].prim))
            if first_only:
                break
    return pairs


def _lead_joints(Q, lam, i, j, ext):
    """Joints extrapolated linearly from sample i away from sample j by ``ext`` mm of lambda."""
    return Q[i] + (Q[i] - Q[j]) / abs(lam[i] - lam[j]) * ext


def _leads(spans, end_states, lam, ext):
    """Start joints plus lead-in and lead-out moveJ extending both arms ``ext`` mm of lambda.

    Joint-space leads stay smooth where a Cartesian line would cross a wrist
    singularity; the lead motion is off the curve and not held to tolerance.
    """
    n = len(lam)
    start_q, leads_in, leads_out = [], [], []
    for r, span in enumerate(spans):
        q_in = _lead_joints(span.Q, lam, 0, 1, ext)
        q_out = end_states[r].q + (span.Q[n - 1] - span.Q[n - 2]) / abs(lam[n - 1] - lam[n - 2]) * ext
        for q in (q_in, q_out):
            if np.any(q < span.model.q_min) or np.any(q > span.model.q_max):
                raise FitError(f"{span.model.name}: lead motion leaves the joint limits", 0)
        start_q.append(q_in)
        leads_in.append(Primitive("J", span.Q[0].copy()))
        leads_out.append(Primitive("J", q_out))
    return start_q, leads_in, leads_out


def greedy_fit_dual(path: JointPath, models, curve: Curve, options: FitOptions | None = None, mu=100.0) -> MotionProgram:
    """Fewest synchronized primitives whose relative motion stays within ``tol`` of the curve.

    ``models`` must already carry robot 2's base placement (see relative_ik.place);
    ``curve`` is the curve the path was solved on (same sample count).
    """
    opts = options or FitOptions()
    if opts.tol <= 0:
        raise ValueError("fitting tolerance must be positive")
    n = len(path)
    if n < 2 or n != len(curve):
        raise FitError("path must have at least 2 samples and match the curve")
    lam = curve.lam
    spans = (_Span(models[0], path.q1), _Span(models[1], path.q2))
    states = [state_from_q(models[0], path.q1[0]), state_from_q(models[1], path.q2[0])]
    prog1, prog2, bps = [], [], []
    s = 0
    while s < n - 1:

        def feasible(e):
            return _feasible_pairs(curve, spans, states, s, e, opts, first_only=True)

        if not feasible(s + 1):
            raise FitError(f"tolerance {opts.tol} mm unreachable on span starting at index {s}", s)
        lo, hi = s + 1, n - 1
        if feasible(hi):
            lo = hi
        else:
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if feasible(mid):
                    lo = mid
                else:
                    hi = mid
        e = lo
        while e + 1 <= n - 1 and feasible(e + 1):
            e += 1
        p1, p2 = _feasible_pairs(curve, spans, states, s, e, opts, first_only=True)[0]
        states = [advance(models[0], states[0], p1, seed=path.q1[e]), advance(models[1], states[1], p2, seed=path.q2[e])]
        prog1.append(p1)
        prog2.append(p2)
        bps.append(e)
        s = e

    start_q = [path.q1[0], path.q2[0]]
    lead = opts.extension > 0 and n >= 2
    if lead:
        start_q, leads_in, leads_out = _leads(spans, states, lam, opts.extension)
        prog1 = [leads_in[0]] + prog1 + [leads_out[0]]
        prog2 = [leads_in[1]] + prog2 + [leads_out[1]]
        bps = [0] + bps + [-1]
    prog = MotionProgram(prog1, prog2, start_q[0], start_q[1], mu=mu, lead=lead, breakpoints=bps)
    assign_speeds(prog, models, curve, mu, opts.extension)
    if opts.blend > 0:
        set_blend(prog, models, opts.blend)
    return prog


def uniform_line_program(path: JointPath, models, curve: Curve, waypoints=50, speed=100.0, extension=30.0) -> MotionProgram:
    """Conventional single-arm program: robot 2 holds its pose, robot 1 runs moveL through equally spaced curve points."""
    n = len(path)
    if waypoints < 2 or n < 2 or n != len(curve):
        raise FitError("need at least 2 waypoints and a path matching the curve")
    idx = np.unique(np.round(np.linspace(0, n - 1, waypoints)).astype(int))
    if len(idx) != waypoints:
        raise FitError(f"curve has too few samples for {waypoints} waypoints")
    spans = (_Span(models[0], path.q1), _Span(models[1], path.q2))
    prog1 = [Primitive("L", np.concatenate([spans[0].p[i], _rotvec(spans[0].R[i])])) for i in idx[1:]]
    prog2 = [Primitive("J", path.q2[i]) for i in idx[1:]]
    bps = [int(i) for i in idx[1:]]
    start_q = [path.q1[0], path.q2[0]]
    lead = extension > 0
    if lead:
        ends = [state_from_q(models[0], path.q1[-1]), state_from_q(models[1], path.q2[-1])]
        start_q, leads_in, leads_out = _leads(spans, ends, curve.lam, extension)
        prog1 = [leads_in[0]] + prog1 + [leads_out[0]]
        prog2 = [leads_in[1]] + prog2 + [leads_out[1]]
        bps = [0] + bps + [-1]
    prog = MotionProgram(prog1, prog2, start_q[0], start_q[1], mu=speed, lead=lead, breakpoints=bps)
    for p in prog.robot1 + prog.robot2:
        p.speed = float(speed)
    return prog


def relative_lengths(program: MotionProgram, curve: Curve, extension=30.0):
    """Relative-path length covered by each step (mm)."""
    out = []
    prev = 0
    for k, b in enumerate(program.breakpoints):
        if program.lead and (k == 0 or k == program.steps - 1):
            out.append(extension)
        else:
            out.append(float(curve.lam[b] - curve.lam[prev]))
        if b >= 0:
            prev = b
    return np.array(out)


def assign_speeds(program: MotionProgram, models, curve: Curve, mu, extension=30.0):
    """Per-robot TCP speeds so each step covers its relative length at ``mu``."""
    rel = relative_lengths(program, curve, extension)
    states = program_states(program, models)
    for r, prims in enumerate((program.robot1, program.robot2)):
        for k, prim in enumerate(prims):
            L = segment_length(models[r], states[r][k], prim)
            prim.speed = float(mu * L / rel[k]) if L > 1e-6 and rel[k] > 0 else float(mu)
    program.mu = float(mu)
    return program


def segment_lengths(program: MotionProgram, models):
    states = program_states(program, models)
    return [
        np.array([segment_length(models[r], states[r][k], prim) for k, prim in enumerate(prims)])
        for r, prims in enumerate((program.robot1, program.robot2))
    ]


def set_blend(program: MotionProgram, models, radius, frac=0.4):
    """Blend radius at every interior waypoint, clipped to ``frac`` of the adjacent segment lengths."""
    lengths = segment_lengths(program, models)
    for r, prims in enumerate((program.robot1, program.robot2)):
        L = lengths[r]
        for k, prim in enumerate(prims):
            if k == len(prims) - 1:
                prim.blend = 0.0
            else:
                prim.blend = float(max(0.0, min(radius, frac * L[k], frac * L[k + 1])))
    return program


def program_deviation(program: MotionProgram, models, curve: Curve, per_step=None):
    """Max relative position (mm) and normal (rad) deviation of the interior steps, pre-blending."""
    states = program_states(program, models)
    ks = range(1, program.steps - 1) if program.lead else range(program.steps)
    dmax = amax = 0.0
    prev = 0
    devs = []
    for k in range(program.steps):
        b = program.breakpoints[k]
        if k in ks:
            s, e = prev, b
            _, grid, hints = _eval_grid(curve.lam, s, e)
            R1, p1 = segment_poses(models[0], states[0][k], program.robot1[k], grid)
            R2, p2 = segment_poses(models[1], states[1][k], program.robot2[k], grid)
            prel, nrel = relative_pose(R1, p1, R2, p2)
            d, a = span_deviation(curve, s, e, prel, nrel, hints)
            devs.append((float(d.max()), float(a.max())))
            dmax = max(dmax, d.max())
            amax = max(amax, a.max())
        if b >= 0:
            prev = b
    if per_step is not None:
        per_step.extend(devs)
    return float(dmax), float(amax)


def is_maximal(program: MotionProgram, path: JointPath, models, curve: Curve, options: FitOptions | None = None):
    """Re-test greedy maximality: extending any interior step by one sample breaks tolerance."""
    opts = options or FitOptions()
    spans = (_Span(models[0], path.q1), _Span(models[1], path.q2))
    states = program_states(program, models)
    ks = list(range(1, program.steps - 1) if program.lead else range(program.steps))
    prev = 0
    n = len(curve)
    for k in range(program.steps):
        b = program.breakpoints[k]
        if k in ks and b < n - 1:
            if k == ks[0]:
                st = [state_from_q(models[0], path.q1[0]), state_from_q(models[1], path.q2[0])]
            else:
                st = [states[0][k], states[1][k]]
            if _feasible_pairs(curve, spans, st, prev, b + 1, opts, first_only=True):
                return False
        if b >= 0:
            prev = b
    return True


# ---------------------------------------------------------------------------
# text format


def _fmt(vals):
    return " ".join(repr(float(v)) for v in vals)


def _prim_text(prim: Primitive):
    vals = list(prim.target)
    if prim.kind == "C":
        vals += list(prim.via)
    return f"{prim.kind} {_fmt(vals)} {float(prim.speed)!r} {float(prim.blend)!r}"


def format_program(program: MotionProgram) -> str:
    lines = [
        HEADER,
        f"mu {float(program.mu)!r}",
        f"lead {int(program.lead)}",
        "breakpoints " + " ".join(str(int(b)) for b in program.breakpoints),
        f"start | robot1: {_fmt(program.start_q1)} | robot2: {_fmt(program.start_q2)}",
    ]
    for k, (a, b) in enumerate(zip(program.robot1, program.robot2)):
        lines.append(f"{k} | robot1: {_prim_text(a)} | robot2: {_prim_text(b)}")
    return "\n".join(lines) + "\n"


def _parse_prim(text, where):
    tok = text.split()
    kind = tok[0]
    try:
        vals = [float(v) for v in tok[1:]]
    except ValueError as exc:
        raise ProgramFormatError(f"{where}: non-numeric field") from exc
    need = {"L": 8, "C": 11, "J": 8}.get(kind)
    if need is None or len(vals) != need:
        raise ProgramFormatError(f"{where}: bad primitive {kind!r} with {len(vals)} values")
    via = np.array(vals[6:9]) if kind == "C" else None
    return Primitive(kind, np.array(vals[:6]), via, vals[-2], vals[-1])


def parse_program(text: str) -> MotionProgram:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != HEADER:
        raise ProgramFormatError("missing program header")
    fields = {}
    steps1, steps2 = [], []
    start = None
    for i, ln in enumerate(lines[1:], 2):
        if "|" in ln:
            head, r1, r2 = (part.strip() for part in ln.split("|"))
            if not r1.startswith("robot1:") or not r2.startswith("robot2:"):
                raise ProgramFormatError(f"line {i}: expected robot1/robot2 fields")
            r1, r2 = r1[7:].strip(), r2[7:].strip()
            if head == "start":
                start = (np.array(r1.split(), float), np.array(r2.split(), float))
            else:
                if int(head) != len(steps1):
                    raise ProgramFormatError(f"line {i}: step index out of order")
                steps1.append(_parse_prim(r1, f"line {i}"))
                steps2.append(_parse_prim(r2, f"line {i}"))
        else:
            key, _, rest = ln.partition(" ")
            fields[key] = rest
    if start is None:
        raise ProgramFormatError("missing start line")
    bps = [int(v) for v in fields.get("breakpoints", "").split()]
    return MotionProgram(steps1, steps2, start[0], start[1], float(fields.get("mu", 0.0)), fields.get("lead", "1") == "1", bps)


def save_program(program: MotionProgram, path):
    with open(path, "w") as fh:
        fh.write(format_program(program))


def load_program(path) -> MotionProgram:
    with open(path) as fh:
        return parse_program(fh.read())
