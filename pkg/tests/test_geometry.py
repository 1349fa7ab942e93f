import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relocvo.errors import BehindCameraError
from relocvo.geometry import (
    SE3,
    CameraIntrinsics,
    Sim3,
    act,
    compose,
    inverse,
    pose_from_fields,
    pose_to_fields,
    project,
    relpose_residual_jacobian,
    reprojection_residual_jacobian,
    right_jacobian,
    se3_exp,
    se3_log,
    sim3_exp,
    sim3_log,
    so3_exp,
    so3_log,
)


def random_twist(rng, dim=6, max_angle=math.pi * 0.999, trans=3.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    omega = axis * rng.uniform(0, max_angle)
    rho = rng.uniform(-trans, trans, size=3)
    if dim == 6:
        return np.concatenate([rho, omega])
    return np.concatenate([rho, omega, [rng.uniform(-1.5, 1.5)]])


def random_se3(rng):
    return SE3.exp(random_twist(rng))


def random_sim3(rng):
    return Sim3.exp(random_twist(rng, 7))


def numeric_jacobian(f, x0, retract, dim, eps=1e-6):
    r0 = f(x0)
    J = np.zeros((r0.size, dim))
    for k in range(dim):
        d = np.zeros(dim)
        d[k] = eps
        J[:, k] = (f(retract(x0, d)) - f(retract(x0, -d))) / (2 * eps)
    return J


def rel_err(A, B):
    return np.abs(A - B).max() / max(np.abs(B).max(), 1e-8)


# --- exp / log ---------------------------------------------------------------


def test_zero_twist_is_identity():
    T = se3_exp(np.zeros(6))
    np.testing.assert_allclose(T.matrix(), np.eye(4))


def test_pure_translation():
    T = se3_exp([1, 2, 3, 0, 0, 0])
    np.testing.assert_allclose(T.R, np.eye(3))
    np.testing.assert_allclose(T.t, [1, 2, 3])
    np.testing.assert_allclose(se3_log(SE3(t=[1, 2, 3])), [1, 2, 3, 0, 0, 0], atol=1e-15)


def test_quarter_turn_about_z():
    T = se3_exp([0, 0, 0, 0, 0, math.pi / 2])
    np.testing.assert_allclose(T.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    np.testing.assert_allclose(T.t, 0, atol=1e-15)
    np.testing.assert_allclose(se3_log(T), [0, 0, 0, 0, 0, math.pi / 2], atol=1e-15)


def test_identity_log_is_zero():
    np.testing.assert_array_equal(se3_log(SE3()), np.zeros(6))
    np.testing.assert_array_equal(sim3_log(Sim3()), np.zeros(7))


def test_pure_scaling_log():
    xi = sim3_log(Sim3(s=2.0))
    np.testing.assert_allclose(xi, [0, 0, 0, 0, 0, 0, math.log(2.0)], atol=1e-15)


def test_roundtrip_random_twists():
    rng = np.random.default_rng(0)
    for dim, exp in ((6, SE3.exp), (7, Sim3.exp)):
        worst = 0.0
        for _ in range(1000):
            xi = random_twist(rng, dim)
            worst = max(worst, np.abs(exp(xi).log() - xi).max())
        assert worst < 1e-9


@pytest.mark.parametrize("theta", [0.0, 1e-9, 1e-7, 1e-5, 1e-3, 1e-2, 0.5, 3.0, math.pi - 1e-7])
@pytest.mark.parametrize("sigma", [0.0, 1e-9, 1e-4, 0.3, -2.0, 4.0])
def test_sim3_roundtrip_near_branch_points(theta, sigma):
    xi = np.concatenate([[0.3, -1.2, 0.7], np.full(3, theta / math.sqrt(3)), [sigma]])
    assert np.abs(Sim3.exp(xi).log() - xi).max() < 1e-9


def test_sim3_matches_se3_at_unit_scale():
    rng = np.random.default_rng(1)
    for _ in range(200):
        xi = random_twist(rng)
        A = SE3.exp(xi)
        B = Sim3.exp(np.concatenate([xi, [0.0]]))
        assert np.abs(A.matrix() - B.matrix()).max() < 1e-12
        assert np.abs(np.concatenate([A.log(), [0.0]]) - B.log()).max() < 1e-12
        p = rng.normal(size=3)
        assert np.abs(A.act(p) - B.act(p)).max() < 1e-12
        C = random_se3(rng)
        assert np.abs((A @ C).matrix() - (B @ Sim3.from_se3(C)).matrix()).max() < 1e-12


def test_rotation_by_pi_branch():
    for axis in np.eye(3):
        R = so3_exp(axis * math.pi)
        omega = so3_log(R)
        assert abs(np.linalg.norm(omega) - math.pi) < 1e-12
        # dominant-axis branch: positive along the rotation axis
        assert omega @ axis > 0
        np.testing.assert_allclose(so3_exp(omega), R, atol=1e-12)
    R = so3_exp(np.array([1.0, -1.0, 0.0]) / math.sqrt(2) * math.pi)
    np.testing.assert_allclose(so3_exp(so3_log(R)), R, atol=1e-12)


# --- group axioms ------------------------------------------------------------


def test_group_axioms():
    rng = np.random.default_rng(2)
    for make in (random_se3, random_sim3):
        for _ in range(1000):
            A, B, C = make(rng), make(rng), make(rng)
            lhs = ((A @ B) @ C).matrix()
            rhs = (A @ (B @ C)).matrix()
            assert np.abs(lhs - rhs).max() < 1e-12 * max(1.0, np.abs(lhs).max())
            assert np.abs((A @ A.inverse()).matrix() - np.eye(4)).max() < 1e-12
            assert np.abs((A @ type(A).identity()).matrix() - A.matrix()).max() == 0.0


def test_act_composition():
    rng = np.random.default_rng(3)
    for make in (random_se3, random_sim3):
        for _ in range(100):
            A, B = make(rng), make(rng)
            p = rng.normal(size=3)
            np.testing.assert_allclose(act(compose(A, B), p), act(A, act(B, p)), atol=1e-9)


def test_compose_with_inverse_is_identity():
    T = SE3.exp([0.4, -1, 2, 0.3, 0.2, -0.1])
    np.testing.assert_allclose(compose(T, inverse(T)).matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(act(SE3(), [1, 2, 3]), [1, 2, 3])


def test_sim3_act_example():
    S = Sim3(t=[1, 0, 0], s=2.0)
    np.testing.assert_allclose(S.act([1, 1, 1]), [3, 2, 2])


def test_quaternion_unit_norm():
    rng = np.random.default_rng(4)
    for _ in range(100):
        q = random_se3(rng).quaternion
        assert abs(np.linalg.norm(q) - 1) < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.lists(st.floats(-1.8, 1.8), min_size=3, max_size=3),
    st.floats(-2, 2),
)
def test_sim3_roundtrip_property(rho, omega, sigma):
    xi = np.array(rho + omega + [sigma])
    assert np.abs(Sim3.exp(xi).log() - xi).max() < 1e-9


# --- projection --------------------------------------------------------------

K = CameraIntrinsics(100, 100, 50, 50, 100, 100)


def test_project_examples():
    np.testing.assert_allclose(project(K, [0, 0, 1]), [50, 50])
    np.testing.assert_allclose(project(K, [1, 0, 2]), [100, 50])
    with pytest.raises(BehindCameraError):
        project(K, [0, 0, -1])


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(-1, 100, 50, 50, 100, 100)
    with pytest.raises(ValueError):
        CameraIntrinsics(100, 100, 150, 50, 100, 100)


def test_pyramid_intrinsics_preserve_rays():
    K0 = CameraIntrinsics(40, 40, 31.5, 31.5, 64, 64)
    K1 = K0.at_level(1)
    assert (K1.width, K1.height) == (32, 32)
    # level-1 pixel (x, y) is centred on level-0 pixel (2x + 0.5, 2y + 0.5)
    np.testing.assert_allclose(K1.bearings([[3.0, 15.0]]), K0.bearings([[6.5, 30.5]]), atol=1e-15)


# --- Jacobians vs central differences ----------------------------------------


def test_right_jacobian_definition():
    rng = np.random.default_rng(5)
    for dim, G in ((6, SE3), (7, Sim3)):
        for _ in range(20):
            xi = random_twist(rng, dim, trans=1.0)
            Jr = right_jacobian(xi)
            # Exp(xi + d) = Exp(xi) Exp(Jr d)  =>  d/dd [Log(Exp(xi)^-1 Exp(xi+d))] = Jr
            num = numeric_jacobian(lambda d: G.exp(xi).local(G.exp(xi + d)), np.zeros(dim), lambda x, d: x + d, dim)
            assert rel_err(Jr, num) < 1e-6


def test_relpose_residual_zero_at_truth():
    rng = np.random.default_rng(6)
    Ti, Tj = random_se3(rng), random_se3(rng)
    r, _, _ = relpose_residual_jacobian(Ti @ Tj.inverse(), Ti, Tj)
    assert np.abs(r).max() < 1e-12


def test_relpose_identity_structure():
    I = SE3()
    r, Ji, Jj = relpose_residual_jacobian(I, I, I)
    np.testing.assert_array_equal(r, np.zeros(6))
    np.testing.assert_allclose(Ji, -np.eye(6), atol=1e-15)
    np.testing.assert_allclose(Jj, np.eye(6), atol=1e-15)
    num = numeric_jacobian(lambda T: relpose_residual_jacobian(I, T, I)[0], I, SE3.retract, 6)
    np.testing.assert_allclose(num, Ji, atol=1e-8)


def test_relpose_jacobians_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        Ti, Tj = random_se3(rng), random_se3(rng)
        P = (Ti @ Tj.inverse()) @ SE3.exp(0.3 * rng.normal(size=6))
        _, Ji, Jj = relpose_residual_jacobian(P, Ti, Tj)
        ni = numeric_jacobian(lambda T: relpose_residual_jacobian(P, T, Tj)[0], Ti, SE3.retract, 6)
        nj = numeric_jacobian(lambda T: relpose_residual_jacobian(P, Ti, T)[0], Tj, SE3.retract, 6)
        worst = max(worst, rel_err(Ji, ni), rel_err(Jj, nj))
    assert worst < 1e-5


def test_reprojection_jacobian_finite_differences():
    rng = np.random.default_rng(8)
    Kc = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    for _ in range(100):
        T = SE3.exp(np.concatenate([rng.normal(scale=0.3, size=3), rng.normal(scale=0.2, size=3)]))
        X = rng.uniform([-2, -2, 4], [2, 2, 8], size=(5, 3))
        X = T.inverse().act(X)
        uv = rng.uniform(0, 400, size=(5, 2))
        _, J = reprojection_residual_jacobian(Kc, T, X, uv)
        num = numeric_jacobian(lambda P: reprojection_residual_jacobian(Kc, P, X, uv)[0].ravel(), T, SE3.retract, 6)
        assert rel_err(J.reshape(-1, 6), num) < 1e-5


# --- serialization -----------------------------------------------------------


def test_pose_fields_roundtrip():
    rng = np.random.default_rng(9)
    T = random_se3(rng)
    back = pose_from_fields(pose_to_fields(T).split())
    assert np.abs(back.matrix() - T.matrix()).max() < 1e-8
    S = random_sim3(rng)
    fields = pose_to_fields(S).split()
    assert len(fields) == 8
    assert np.abs(pose_from_fields(fields).matrix() - S.matrix()).max() < 1e-7
