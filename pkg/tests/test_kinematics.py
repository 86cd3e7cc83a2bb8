import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import one_joint_model
from dualmotion.kinematics import (
    ModelError,
    RobotModel,
    accel_limits,
    dump_model,
    fk_batch,
    forward_kinematics,
    jacobian,
    load_model,
)


def homogeneous(R=np.eye(3), p=np.zeros(3)):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p
    return T


def fk_oracle(model, q):
    """Product of 4x4 rigid transforms, built independently of the library kernels."""
    T = homogeneous(model.base_R, model.base_p)
    for axis, origin, qi in zip(model.joint_axes, model.joint_origins, q):
        T = T @ homogeneous(p=origin) @ homogeneous(Rotation.from_rotvec(axis * qi).as_matrix())
    return T @ homogeneous(model.tool_R, model.tool_p)


def random_q(model, rng, n):
    return model.q_min + rng.random((n, model.joint_count)) * (model.q_max - model.q_min)


def test_zero_pose_is_product_of_fixed_transforms(models):
    for m in models:
        T = homogeneous(m.base_R, m.base_p)
        for o in m.joint_origins:
            T = T @ homogeneous(p=o)
        T = T @ homogeneous(m.tool_R, m.tool_p)
        pose = forward_kinematics(m, np.zeros(6))
        assert np.allclose(pose.T, T, atol=1e-12)


@given(st.floats(-3.0, 3.0))
def test_one_joint_tool_circle(q):
    pose = forward_kinematics(one_joint_model(), [q])
    assert np.allclose(pose.p, [100 * np.cos(q), 100 * np.sin(q), 0.0], atol=1e-9)


def test_fk_matches_rigid_transform_oracle(models):
    rng = np.random.default_rng(3)
    for m in models:
        for q in random_q(m, rng, 10):
            T = fk_oracle(m, q)
            pose = forward_kinematics(m, q)
            assert np.allclose(pose.p, T[:3, 3], atol=1e-9)
            assert np.allclose(pose.R, T[:3, :3], atol=1e-12)


def test_fk_batch_agrees_with_single(models):
    rng = np.random.default_rng(4)
    m = models[1]
    Q = random_q(m, rng, 7)
    Rs, ps = fk_batch(m, Q)
    for k, q in enumerate(Q):
        pose = forward_kinematics(m, q)
        assert np.allclose(Rs[k], pose.R) and np.allclose(ps[k], pose.p)


def test_one_joint_jacobian_column():
    m = one_joint_model()
    q = 0.7
    J = jacobian(m, [q])
    p = forward_kinematics(m, [q]).p
    assert np.allclose(J[:, 0], np.concatenate([[0, 0, 1], np.cross([0, 0, 1], p)]))


def numeric_jacobian(model, q, h=1e-6):
    J = np.zeros((6, len(q)))
    for i in range(len(q)):
        dq = np.zeros(len(q))
        dq[i] = h
        a, b = forward_kinematics(model, q + dq), forward_kinematics(model, q - dq)
        J[3:, i] = (a.p - b.p) / (2 * h)
        J[:3, i] = Rotation.from_matrix(a.R @ b.R.T).as_rotvec() / (2 * h)
    return J


def test_jacobian_central_differences(models):
    rng = np.random.default_rng(5)
    for m in models:
        for q in random_q(m, rng, 10):
            assert np.allclose(jacobian(m, q), numeric_jacobian(m, q), atol=1e-5)


def test_wrist_singularity_rank(models):
    q = np.array([0.2, 0.3, -0.4, 0.5, 0.0, -0.3])  # q5 = 0 aligns joints 4 and 6
    for m in models:
        sv = np.linalg.svd(jacobian(m, q), compute_uv=False)
        assert sv[-1] < 1e-9 * sv[0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_first_order_consistency(models, seed):
    """Pose change from a small joint step is J qdot dt up to second order."""
    m = models[0]
    rng = np.random.default_rng(seed)
    q = random_q(m, rng, 1)[0] * 0.9
    qd = rng.normal(size=6)
    errs = []
    for dt in (1e-3, 1e-4):
        a, b = forward_kinematics(m, q), forward_kinematics(m, q + qd * dt)
        tw = jacobian(m, q) @ qd * dt
        d = np.concatenate([Rotation.from_matrix(b.R @ a.R.T).as_rotvec(), b.p - a.p])
        errs.append(np.linalg.norm(d - tw))
    assert errs[1] <= errs[0] * 0.02 + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=6, max_size=6))
def test_rotation_orthonormal(models, q):
    R = forward_kinematics(models[0], np.clip(q, -1.1, 1.2)).R
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)


def test_accel_single_node():
    vals = [40, 40, 40, 42.5, 36.8, 50.5]
    m = one_joint_model().with_limits(accel_nodes=[[0.0, 0.0]], accel_values=[vals])
    rng = np.random.default_rng(0)
    for q in rng.uniform(-3, 3, (5, 6)):
        assert np.array_equal(accel_limits(m, q), vals)


def test_accel_tie_goes_to_first_node():
    m = one_joint_model().with_limits(accel_nodes=[[0.0, 0.0], [1.0, 0.0]], accel_values=[[1.0] * 6, [2.0] * 6])
    assert np.array_equal(accel_limits(m, [0, 0.5, 0, 0, 0, 0]), [1.0] * 6)
    assert np.array_equal(accel_limits(m, [0, 0.51, 0, 0, 0, 0]), [2.0] * 6)


def test_accel_dense_table_at_nodes():
    g2, g3 = np.meshgrid(np.arange(-1, 1.01, 0.25), np.arange(-1, 1.01, 0.25), indexing="ij")
    nodes = np.column_stack([g2.ravel(), g3.ravel()])
    vals = np.tile(50 + 10 * nodes[:, :1], (1, 6))
    m = one_joint_model().with_limits(accel_nodes=nodes, accel_values=vals)
    for (a, b), v in zip(nodes, vals):
        assert np.allclose(accel_limits(m, [0.3, a, b, 0, 0, 0]), v)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10.0, 10.0), min_size=6, max_size=6))
def test_accel_total_and_nearest(models, q):
    m = models[1]
    a = accel_limits(m, np.array(q))
    nearest = np.argmin(np.sum((m.accel_nodes - q[1:3]) ** 2, axis=1))
    assert np.array_equal(a, m.accel_values[nearest])


def test_empty_accel_table_raises():
    m = one_joint_model().with_limits(accel_nodes=np.zeros((0, 2)), accel_values=np.zeros((0, 6)))
    with pytest.raises(ModelError):
        accel_limits(m, np.zeros(6))


def test_jacobian_dimension_mismatch(models):
    with pytest.raises(ValueError):
        jacobian(models[0], np.zeros(5))


def test_model_validation():
    with pytest.raises(ModelError):
        RobotModel("bad", [[0, 0, 2]], [[0, 0, 0]], np.eye(3), [0, 0, 0], [-1], [1], [-1], [1], [[0, 0]], [[1] * 6])
    with pytest.raises(ModelError):
        RobotModel("bad", [[0, 0, 1]], [[0, 0, 0]], np.eye(3), [0, 0, 0], [1], [-1], [-1], [1], [[0, 0]], [[1] * 6])


def test_model_roundtrip(tmp_path, models):
    for m in models:
        dump_model(m, tmp_path / f"{m.name}.yaml", accel_csv=f"{m.name}.csv")
        back = load_model(tmp_path / f"{m.name}.yaml")
        for f in ("joint_axes", "joint_origins", "tool_R", "tool_p", "q_min", "q_max", "qd_min", "qd_max", "accel_nodes", "accel_values"):
            assert np.array_equal(getattr(back, f), getattr(m, f)), f
