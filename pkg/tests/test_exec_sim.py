import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import straight_curve
from dualmotion.config_opt import baseline_seed
from dualmotion.exec_sim import (
    CornerPathFailure,
    SimOptions,
    average_runs,
    execute,
    limit_excess,
    sigma_from_repeatability,
)
from dualmotion.kinematics import forward_kinematics
from dualmotion.motion_program import MotionProgram, Primitive, fk_batch, greedy_fit_dual, program_states, set_blend
from dualmotion.relative_ik import place, solve_path

BASE2 = np.array([2800.0, 0.0, np.pi])


@pytest.fixture(scope="module")
def cell(models):
    """Placed arms and a start pose for hand-written programs; robot 2 holds still."""
    cfg = baseline_seed(straight_curve(), models, np.zeros(6), BASE2)
    M = place(models, cfg)
    T = forward_kinematics(M[0], cfg.q0_1)
    return M, cfg.q0_1, cfg.q0_2, T.p, Rotation.from_matrix(T.R).as_rotvec()


def lprog(cell, offsets, speed=100.0, blend=0.0):
    M, q1, q2, p0, rv = cell
    r1 = [Primitive("L", np.concatenate([p0 + o, rv]), speed=speed, blend=blend) for o in offsets]
    r1[-1].blend = 0.0
    r2 = [Primitive("J", q2.copy()) for _ in offsets]
    return MotionProgram(r1, r2, q1, q2, mu=speed, lead=False, breakpoints=[0] * len(offsets))


def tcp(M, rec):
    return fk_batch(M[0], rec.q1)[1]


def within_limits(M, rec, rate=250.0):
    v, a, vlo, vhi, A = limit_excess(np.hstack([rec.q1, rec.q2]), M, rate)
    return np.all(v <= vhi + 1e-6) and np.all(v >= vlo - 1e-6) and np.all(np.abs(a) <= A + 1e-6)


@pytest.fixture(scope="module")
def fitted(models, curve1):
    c = curve1.subset(np.arange(240))
    cfg = baseline_seed(c, models, np.zeros(6), BASE2)
    M = place(models, cfg)
    prog = greedy_fit_dual(solve_path(cfg, c, models), M, c, mu=300.0)
    return M, prog


def test_single_line_duration_and_end(cell):
    M, *_, p0, _ = cell
    rec = execute(lprog(cell, [[0, 100, 0]]), M)
    assert rec.t[-1] >= 1.0
    assert np.linalg.norm(tcp(M, rec)[-1] - (p0 + [0, 100, 0])) <= 1e-6
    assert within_limits(M, rec)


def test_fine_corner_is_exact(cell):
    M, *_, p0, _ = cell
    rec = execute(lprog(cell, [[0, 100, 0], [0, 100, 100]]), M)
    assert np.linalg.norm(tcp(M, rec) - (p0 + [0, 100, 0]), axis=1).min() <= 1e-6


def test_blend_cuts_corner(cell):
    M, *_, p0, _ = cell
    corner = p0 + [0, 100, 0]
    dips = []
    for b in (0.0, 10.0):
        rec = execute(lprog(cell, [[0, 100, 0], [0, 100, 100]], blend=b), M)
        p = tcp(M, rec)
        d = np.linalg.norm(p - corner, axis=1)
        speed = np.linalg.norm(np.gradient(p, rec.t, axis=0), axis=1)
        i = np.argmin(d)
        dips.append((d[i], speed[i]))
    (d0, v0), (d10, v10) = dips
    assert 0 < d10 <= 10.0
    assert v10 > v0  # a blended corner is taken without stopping


def test_fast_joint_move_saturates(cell):
    M, q1, q2, *_ = cell
    prog = MotionProgram([Primitive("J", q1 + [0.5, 0, 0, 0, 0, 0], speed=1e5)], [Primitive("J", q2.copy())], q1, q2, lead=False, breakpoints=[0])
    rec = execute(prog, M)
    assert rec.saturated.all()
    v, a, vlo, vhi, A = limit_excess(np.hstack([rec.q1, rec.q2]), M, 250.0)
    worst = max(np.max(v / vhi), np.max(v / vlo), np.max(np.abs(a) / A))
    assert worst == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(rec.q1[-1], q1 + [0.5, 0, 0, 0, 0, 0], atol=1e-9)


def test_corner_path_failure(cell):
    M, *_ = cell
    with pytest.raises(CornerPathFailure):
        execute(lprog(cell, [[0, 20, 0], [0, 20, 20]], blend=10.0), M)


def test_average_of_one_is_execute(cell):
    M, *_ = cell
    prog = lprog(cell, [[0, 20, 0], [0, 20, 20]])
    opts = SimOptions(noise=(0.1, 0.0), seed=4)
    a, b = average_runs(prog, M, 1, opts), execute(prog, M, opts)
    assert np.array_equal(a.q1, b.q1) and np.array_equal(a.t, b.t)


def test_noise_free_average_is_execute(cell):
    M, *_ = cell
    prog = lprog(cell, [[0, 20, 0], [0, 20, 20]])
    a, b = average_runs(prog, M, 5), execute(prog, M)
    assert np.array_equal(a.q1, b.q1)


def test_average_shrinks_waypoint_noise(cell):
    """Per-axis waypoint error of a 5-run mean stays within 3 sigma / sqrt(5) almost always."""
    M, *_, p0, _ = cell
    offs = [[0, 20, 0], [0, 20, 20], [0, 40, 20]]
    prog = lprog(cell, offs)
    sig = 0.1
    tau = np.array([0.2, 0.4, 0.6])  # commanded time at the waypoints: 20 mm at 100 mm/s each
    hits = []
    for trial in range(40):
        rec = average_runs(prog, M, 5, SimOptions(noise=(sig, 0.0), seed=1000 * trial))
        p = tcp(M, rec)
        for k, o in enumerate(offs):
            i = np.argmin(np.abs(rec.sigma - tau[k]))
            hits.extend(np.abs(p[i] - (p0 + o)) <= 3 * sig / np.sqrt(5))
    assert np.mean(hits) >= 0.99


def test_repeatability_sigma():
    assert sigma_from_repeatability(3.616) == pytest.approx(1.0, rel=1e-3)


# invariants on a fitted dual program


def test_fitted_waypoints_exact(fitted):
    M, prog = fitted
    rec = execute(prog, M)
    states = program_states(prog, M)
    for k, t in enumerate(rec.transition_times):
        if not rec.fine_points[k]:
            continue
        near = np.flatnonzero(np.abs(rec.t - t) <= 2.0 / 250.0)
        # both arms dwell on their waypoint poses at the shared transition time; joints may
        # differ along a wrist singularity's null motion, so poses are compared
        for r, Q in enumerate((rec.q1, rec.q2)):
            _, P = fk_batch(M[r], Q[near])
            assert np.linalg.norm(P - states[r][k].p, axis=1).min() <= 1e-6


def test_fitted_limits_respected(fitted):
    M, prog = fitted
    for b in (0.0, 5.0):
        p = set_blend(prog.copy(), M, b) if b else prog
        assert within_limits(M, execute(p, M))


def test_blend_containment(fitted):
    M, prog = fitted
    p = set_blend(prog.copy(), M, 5.0)
    rec = execute(p, M)
    states = program_states(p, M)
    for r, (prims, Q) in enumerate(((p.robot1, rec.q1), (p.robot2, rec.q2))):
        pos = fk_batch(M[r], Q)[1]
        for k in range(len(prims) - 1):
            a, b = prims[k], prims[k + 1]
            if a.blend <= 0 or a.kind == "J" or b.kind == "J":
                continue
            wp = states[r][k + 1].p
            near = np.linalg.norm(pos - wp, axis=1)
            # inside the zone the path stays within the blend radius of the waypoint
            t0, t1 = rec.transition_times[k], rec.transition_times[k + 2]
            inside = (rec.t > t0) & (rec.t < t1) & (near < 2 * a.blend)
            assert near[inside].min() <= a.blend + 1e-6
