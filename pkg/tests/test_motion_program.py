import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import straight_curve
from dualmotion.config_opt import baseline_seed
from dualmotion.motion_program import (
    FitError,
    FitOptions,
    MotionProgram,
    Primitive,
    ProgramFormatError,
    arc_geometry,
    arc_points,
    fit_segment_C,
    fit_segment_J,
    fit_segment_L,
    format_program,
    greedy_fit_dual,
    is_maximal,
    load_program,
    parse_program,
    program_deviation,
    program_states,
    save_program,
    segment_poses,
    set_blend,
    uniform_line_program,
)
from dualmotion.relative_ik import place, solve_path

BASE2 = np.array([2800.0, 0.0, np.pi])


def rots(n):
    return np.tile(np.eye(3), (n, 1, 1))


def setup(models, curve):
    cfg = baseline_seed(curve, models, np.zeros(6), BASE2)
    return solve_path(cfg, curve, models), place(models, cfg)


@pytest.fixture(scope="module")
def line_fit(models):
    c = straight_curve()
    path, M = setup(models, c)
    return c, path, M, greedy_fit_dual(path, M, c, mu=200.0)


@pytest.fixture(scope="module")
def piece_fit(models, curve1):
    c = curve1.subset(np.arange(240))
    path, M = setup(models, c)
    return c, path, M, greedy_fit_dual(path, M, c, mu=300.0)


# single-segment fits


def test_L_collinear():
    p = np.linspace([0, 0, 0], [10, 5, -2], 11)
    f = fit_segment_L(p, rots(11))
    assert f.deviation < 1e-12
    assert np.allclose(f.primitive.position, p[-1])


def test_L_semicircle_sagitta():
    R = 40.0
    th = np.linspace(0, np.pi, 181)
    p = np.column_stack([R * np.cos(th), R * np.sin(th), 0 * th])
    assert fit_segment_L(p, rots(181), pin_end=True).deviation == pytest.approx(R)


def test_L_noisy_line_monte_carlo():
    sigma = 0.01
    end = np.array([50.0, 0, 0])
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = np.linspace([0, 0, 0], end, 51) + rng.normal(0, sigma, (51, 3))
        f = fit_segment_L(p, rots(51), start=(np.eye(3), np.zeros(3)))
        assert f.deviation <= 5 * sigma
        assert np.linalg.norm(f.primitive.position - end) <= 0.05


def test_L_orientation_interpolation():
    Re = Rotation.from_rotvec([0, 0, 0.4]).as_matrix()
    s = np.linspace(0, 1, 11)
    Rs = Rotation.from_rotvec(s[:, None] * [0, 0, 0.4]).as_matrix()
    f = fit_segment_L(np.outer(s, [10, 0, 0]), Rs)
    assert np.allclose(f.primitive.rotation, Re, atol=1e-12)


def test_C_exact_quarter_arc():
    R = 80.0
    th = np.linspace(0, np.pi / 2, 31)
    p = np.column_stack([R * np.cos(th), R * np.sin(th), np.full_like(th, 5.0)])
    f = fit_segment_C(p, rots(31))
    assert f.deviation <= 1e-9 and not f.degenerate
    assert np.allclose(f.primitive.via, [R * np.cos(np.pi / 4), R * np.sin(np.pi / 4), 5.0], atol=1e-9)
    assert np.allclose(f.primitive.position, p[-1], atol=1e-9)


def test_C_straight_line_degenerate():
    p = np.linspace([0, 0, 0], [30, 0, 0], 21)
    f = fit_segment_C(p, rots(21))
    assert f.degenerate and f.primitive is None and f.deviation < 1e-12


def test_C_helix_against_dense_arc():
    R, rise = 60.0, 0.4
    th = np.linspace(0, np.pi / 2, 41)
    p = np.column_stack([R * np.cos(th), R * np.sin(th), rise * th / th[-1]])
    f = fit_segment_C(p, rots(41))
    geom = arc_geometry(p[0], f.primitive.via, f.primitive.position)
    dense = arc_points(geom, np.linspace(0, 1, 200001))
    brute = max(np.min(np.linalg.norm(dense - x, axis=1)) for x in p)
    assert f.deviation == pytest.approx(brute, abs=1e-3)
    assert 0 < f.deviation <= rise / 2  # the fitted plane tilts to absorb most of the rise


def test_J_linear_zero():
    t = np.linspace(0, 1, 21)[:, None]
    q = 0.1 + t * np.linspace(-1, 1, 6)
    f = fit_segment_J(q)
    assert f.deviation < 1e-12 and np.allclose(f.primitive.target, q[-1])


def test_J_quadratic_sagitta():
    a = 0.3
    t = np.linspace(0, 1, 101)
    q = np.zeros((101, 6))
    q[:, 2] = a * t**2
    f = fit_segment_J(q, pin_end=True)
    assert f.deviation == pytest.approx(a / 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5), st.floats(-1, 1), st.floats(-1, 1))
def test_J_decouples(j, a, b):
    t = np.linspace(0, 1, 15)
    q = np.zeros((15, 6))
    q[:, j] = a * t + b * t**3
    single = fit_segment_J(q[:, j : j + 1])
    full = fit_segment_J(q)
    assert full.deviation == pytest.approx(single.deviation, abs=1e-15)
    assert full.primitive.target[j] == pytest.approx(single.primitive.target[0])


# dual greedy fit


def test_straight_line_single_segment(line_fit):
    c, path, M, prog = line_fit
    assert prog.interior_count == 1
    assert prog.steps == 3 and prog.lead


def test_fit_within_tolerance(piece_fit, line_fit):
    for c, path, M, prog in (piece_fit, line_fit):
        d, a = program_deviation(prog, M, c)
        assert d <= FitOptions().tol and np.rad2deg(a) <= FitOptions().normal_tol_deg


def test_fit_synchronized_and_maximal(piece_fit):
    c, path, M, prog = piece_fit
    assert len(prog.robot1) == len(prog.robot2) == len(prog.breakpoints)
    assert prog.interior_count >= 2
    assert is_maximal(prog, path, M, c)


def test_segment_continuity(piece_fit):
    c, path, M, prog = piece_fit
    states = program_states(prog, M)
    for r, prims in enumerate((prog.robot1, prog.robot2)):
        for k, prim in enumerate(prims):
            if prim.kind == "J":
                continue
            R, p = segment_poses(M[r], states[r][k], prim, [0.0, 1.0])
            assert np.allclose(p[0], states[r][k].p, atol=1e-9)
            assert np.allclose(p[1], states[r][k + 1].p, atol=1e-9)


def test_fit_first_sample_anchor(piece_fit):
    c, path, M, prog = piece_fit
    states = program_states(prog, M)
    # after the lead-in both arms sit exactly on the first path sample
    assert np.allclose(states[0][1].q, path.q1[0]) and np.allclose(states[1][1].q, path.q2[0])


def test_unreachable_tolerance(piece_fit):
    c, path, M, _ = piece_fit
    with pytest.raises(FitError) as err:
        greedy_fit_dual(path, M, c, FitOptions(tol=1e-9))
    assert err.value.index == 0


def test_uniform_line_program_counts(models):
    c = straight_curve(100.0)
    path, M = setup(models, c)
    prog = uniform_line_program(path, M, c, waypoints=11, speed=80.0)
    assert prog.interior_count == 10
    assert set(prog.kinds(1)[1:-1]) == {"L"}
    assert all(p.speed == 80.0 for p in prog.robot1)


def test_set_blend_clipped(piece_fit):
    c, path, M, prog = piece_fit
    p = set_blend(prog.copy(), M, 1e6, frac=0.4)
    assert p.robot1[-1].blend == 0.0
    assert all(0 <= x.blend for x in p.robot1 + p.robot2)


# text format


def test_program_roundtrip(tmp_path, piece_fit):
    prog = piece_fit[3]
    save_program(prog, tmp_path / "a.prog")
    back = load_program(tmp_path / "a.prog")
    assert format_program(back) == format_program(prog)
    for a, b in zip(prog.robot1 + prog.robot2, back.robot1 + back.robot2):
        assert a.kind == b.kind and np.array_equal(a.target, b.target) and a.speed == b.speed


def test_program_format_errors():
    with pytest.raises(ProgramFormatError):
        parse_program("not a program\n")
    good = format_program(MotionProgram([Primitive("J", np.zeros(6))], [Primitive("J", np.ones(6))], np.zeros(6), np.zeros(6)))
    with pytest.raises(ProgramFormatError):
        parse_program(good.replace("J 1.0", "J x"))


def test_primitive_validation():
    with pytest.raises(ValueError):
        Primitive("Q", np.zeros(6))
    with pytest.raises(ValueError):
        Primitive("C", np.zeros(6))
    with pytest.raises(ValueError):
        MotionProgram([Primitive("J", np.zeros(6))], [], np.zeros(6), np.zeros(6))
