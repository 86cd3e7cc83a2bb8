import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmotion.kinematics import accel_limits
from dualmotion.relative_ik import JointPath
from dualmotion.speedbound import (
    UNBOUNDED,
    SpeedBoundError,
    SpeedProfile,
    channel_bounds,
    max_uniform_speed,
    path_derivatives,
)


def joint_path(Q, lam):
    z = np.zeros(len(lam))
    return JointPath(lam, Q[:, :6], Q[:, 6:], z, z)


def smooth_path(models, rng, n=401, length=200.0):
    """Random sum-of-sines joint motion well inside the joint limits."""
    lam = np.linspace(0.0, length, n)
    lo = np.concatenate([m.q_min for m in models])
    hi = np.concatenate([m.q_max for m in models])
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    Q = np.empty((n, 12))
    for j in range(12):
        a = rng.uniform(0.02, 0.2, 3)
        w = rng.uniform(0.005, 0.05, 3)
        ph = rng.uniform(0, 2 * np.pi, 3)
        Q[:, j] = mid[j] + 0.3 * half[j] * rng.uniform(-1, 1) + (a[:, None] * np.sin(w[:, None] * lam + ph[:, None])).sum(0)
    return joint_path(Q, lam)


def brute_force_mu(path, models, grid=0.1, hi=20000.0):
    """Largest grid speed at which every sampled joint rate and interior joint acceleration is admissible."""
    lam = path.lam
    h = lam[1] - lam[0]
    Q = np.hstack([path.q1, path.q2])
    dq = np.gradient(Q, h, axis=0, edge_order=2)
    ddq = np.diff(Q, 2, axis=0) / h**2
    m1, m2 = models
    vlo = np.concatenate([m1.qd_min, m2.qd_min])
    vhi = np.concatenate([m1.qd_max, m2.qd_max])
    A = np.hstack([accel_limits(m1, path.q1), accel_limits(m2, path.q2)])[1:-1]

    def ok(v):
        rate = dq * v
        return np.all(rate <= vhi) and np.all(rate >= vlo) and np.all(np.abs(ddq) * v * v <= A)

    lo_i, hi_i = 0, int(hi / grid)
    while hi_i - lo_i > 1:  # feasibility is monotone in the speed
        mid = (lo_i + hi_i) // 2
        if ok(mid * grid):
            lo_i = mid
        else:
            hi_i = mid
    return lo_i * grid


def test_linear_path_derivatives():
    lam = np.linspace(0, 10, 21)
    Q = np.outer(lam, np.linspace(-0.1, 0.1, 12)) + 0.3
    dq, ddq = path_derivatives(joint_path(Q, lam))
    assert np.allclose(dq, np.linspace(-0.1, 0.1, 12))
    assert np.allclose(ddq, 0, atol=1e-12)


def test_constant_path_derivatives(models):
    lam = np.linspace(0, 10, 21)
    path = joint_path(np.full((21, 12), 0.4), lam)
    dq, ddq = path_derivatives(path)
    assert np.abs(dq).max() < 1e-14 and np.abs(ddq).max() < 1e-14
    prof = max_uniform_speed(path, models)
    assert np.all(prof.vel_bound == UNBOUNDED) and np.all(prof.acc_bound == UNBOUNDED)


def test_sine_path_derivatives():
    w = 0.2
    for h in (0.5, 0.25):
        lam = np.arange(0, 40 + h / 2, h)
        Q = np.tile(np.sin(w * lam)[:, None], (1, 12))
        dq, ddq = path_derivatives(joint_path(Q, lam))
        err_d = np.max(np.abs(dq[:, 0] - w * np.cos(w * lam)))
        err_dd = np.max(np.abs(ddq[1:-1, 0] + w * w * np.sin(w * lam[1:-1])))
        assert err_d <= 2 * (w * h) ** 2 * w
        assert err_dd <= (w * h) ** 2 * w * w


def test_nonuniform_grid_rejected():
    lam = np.array([0, 1, 2.5, 3, 4.0])
    with pytest.raises(SpeedBoundError):
        path_derivatives(joint_path(np.zeros((5, 12)), lam))


def test_one_channel_velocity():
    vb, ab = channel_bounds([[0.01]], [[0.0]], [-2.0], [2.0], [[40.0]], skip_ends=False)
    assert vb[0] == pytest.approx(200.0) and ab[0] == UNBOUNDED


def test_one_channel_acceleration():
    vb, ab = channel_bounds([[0.01]], [[1e-4]], [-2.0], [2.0], [[40.0]], skip_ends=False)
    assert ab[0] == pytest.approx(632.4555, rel=1e-6)
    assert SpeedProfile(np.zeros(1), vb, ab).mu == pytest.approx(200.0)


def test_single_moving_joint_profile(models):
    lam = np.linspace(0, 20, 41)
    Q = np.zeros((41, 12))
    Q[:, 0] = 0.01 * lam
    m1 = models[0].with_limits(qd_min=-np.full(6, 2.0), qd_max=np.full(6, 2.0))
    prof = max_uniform_speed(joint_path(Q, lam), (m1, models[1]))
    assert np.allclose(prof.vel_bound, 200.0)
    assert np.all(prof.acc_bound == UNBOUNDED)
    assert prof.mu == pytest.approx(200.0)


def test_zero_length_path(models):
    with pytest.raises(SpeedBoundError):
        max_uniform_speed(joint_path(np.zeros((1, 12)), np.zeros(1)), models)


def test_matches_brute_force(models):
    rng = np.random.default_rng(11)
    for _ in range(20):
        path = smooth_path(models, rng)
        mu = max_uniform_speed(path, models).mu
        ref = brute_force_mu(path, models)
        assert ref <= mu <= ref + 0.1 + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.3, 0.99), st.booleans())
def test_tightening_limits_never_raises_mu(models, seed, f, which):
    path = smooth_path(models, np.random.default_rng(seed), n=201)
    mu = max_uniform_speed(path, models).mu
    m1 = models[0]
    tight = m1.with_limits(qd_min=m1.qd_min * f, qd_max=m1.qd_max * f) if which else m1.with_limits(accel_values=m1.accel_values * f)
    assert max_uniform_speed(path, (tight, models[1])).mu <= mu + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.2, 5.0))
def test_velocity_scale_law(models, seed, c):
    path = smooth_path(models, np.random.default_rng(seed), n=201)
    scaled = JointPath(path.lam / c, path.q1, path.q2, path.res_p, path.res_n)  # q' scaled by c
    a = max_uniform_speed(path, models).vel_bound
    b = max_uniform_speed(scaled, models).vel_bound
    fin = np.isfinite(a)
    assert np.allclose(b[fin], a[fin] / c, rtol=1e-9)


def test_profile_csv(tmp_path, models):
    lam = np.linspace(0, 20, 41)
    Q = np.zeros((41, 12))
    Q[:, 0] = 0.01 * lam
    prof = max_uniform_speed(joint_path(Q, lam), models)
    prof.to_csv(tmp_path / "s.csv")
    text = (tmp_path / "s.csv").read_text()
    assert text.startswith("lam,vel_bound,acc_bound,combined") and "unbounded" in text
