import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coopfuse import se3
from coopfuse.errors import AngleNearPi
from coopfuse.se3 import Pose


def hat6(xi):
    M = np.zeros((4, 4))
    M[:3, :3] = se3.skew(xi[:3])
    M[:3, 3] = xi[3:]
    return M


def expm_series(M, terms=20):
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms):
        term = term @ M / k
        out = out + term
    return out


def logm_series(T, terms=60):
    # log(I + X) = X - X^2/2 + ... ; valid for moderate rotations
    X = T - np.eye(4)
    out = np.zeros((4, 4))
    P = np.eye(4)
    for k in range(1, terms):
        P = P @ X
        out = out + ((-1) ** (k + 1)) * P / k
    return out


def random_pose(rng, max_angle=2.5):
    ax = rng.normal(size=3)
    ax /= np.linalg.norm(ax)
    return se3.exp(np.r_[ax * rng.uniform(0, max_angle), rng.normal(size=3)])


def test_exp_zero_is_identity():
    T = se3.exp(np.zeros(6))
    assert np.array_equal(T.R, np.eye(3)) and np.array_equal(T.t, np.zeros(3))


def test_exp_pure_rotation():
    T = se3.exp([0, 0, np.pi / 2, 0, 0, 0])
    assert np.allclose(T.R, se3.rot_z(np.pi / 2), atol=1e-15)
    assert np.allclose(T.t, 0)


def test_exp_rotation_with_translation_against_series():
    xi = np.array([0, 0, np.pi / 2, 1, 0, 0])
    T = se3.exp(xi)
    assert np.allclose(T.t, [2 / np.pi, 2 / np.pi, 0], atol=1e-12)
    assert np.allclose(T.matrix(), expm_series(hat6(xi), 40), atol=1e-12)


def test_exp_matches_power_series_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        xi = rng.normal(size=6)
        xi *= rng.uniform(0, 1) / np.linalg.norm(xi)
        assert np.max(np.abs(se3.exp(xi).matrix() - expm_series(hat6(xi)))) <= 1e-10


@pytest.mark.parametrize("scale", [0.0, 1e-12, 1e-9, 1e-7, 1e-4, 0.05, 0.0999, 0.1001, 0.3])
def test_exp_continuous_across_series_cutoff(scale):
    rng = np.random.default_rng(1)
    xi = rng.normal(size=6)
    xi[:3] *= scale / np.linalg.norm(xi[:3]) if scale else 0.0
    assert np.max(np.abs(se3.exp(xi).matrix() - expm_series(hat6(xi), 30))) <= 1e-13


def test_log_identity():
    assert np.array_equal(se3.log(Pose.identity()), np.zeros(6))


def test_log_against_series_oracle():
    T = Pose(se3.rot_z(0.3), [1, 2, 3])
    xi = se3.log(T)
    assert np.allclose(hat6(xi), logm_series(T.matrix()), atol=1e-12)


def test_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(500):
        xi = rng.normal(size=6)
        xi[:3] *= rng.uniform(0, 3) / np.linalg.norm(xi[:3])
        assert np.max(np.abs(se3.log(se3.exp(xi)) - xi)) <= 1e-9


def test_log_near_pi_raises():
    with pytest.raises(AngleNearPi):
        se3.log(se3.exp([0, 0, np.pi - 1e-8, 0, 0, 0]))
    se3.log(se3.exp([0, 0, np.pi - 1e-3, 0, 0, 0]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1.5, 1.5)))
def test_round_trip_property(xi):
    assert np.max(np.abs(se3.log(se3.exp(xi)) - xi)) <= 1e-9


def test_right_jacobian_identity_at_zero():
    assert np.allclose(se3.right_jacobian(np.zeros(6)), np.eye(6))
    assert np.allclose(se3.right_jacobian_inv(np.zeros(6)), np.eye(6))


def test_right_jacobian_defining_relation():
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(50):
        xi = rng.normal(size=6)
        Jr = se3.right_jacobian(xi)
        T = se3.exp(xi)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            fd = (se3.log(T.inverse() @ se3.exp(xi + e)) - se3.log(T.inverse() @ se3.exp(xi - e))) / (2 * h)
            assert np.max(np.abs(fd - Jr[:, k])) <= 1e-8


def test_right_jacobian_inverse():
    rng = np.random.default_rng(4)
    for _ in range(100):
        xi = rng.normal(size=6) * rng.uniform(0, 2)
        assert np.allclose(se3.right_jacobian(xi) @ se3.right_jacobian_inv(xi), np.eye(6), atol=1e-9)


def test_right_jacobian_small_angle():
    xi = np.r_[1e-9, -2e-9, 5e-10, 0.3, -0.2, 0.1]
    assert np.allclose(se3.right_jacobian(xi) @ se3.right_jacobian_inv(xi), np.eye(6), atol=1e-12)


def test_adjoint_identity_and_homomorphism():
    assert np.allclose(se3.adjoint(Pose.identity()), np.eye(6))
    rng = np.random.default_rng(5)
    for _ in range(50):
        A, B = random_pose(rng), random_pose(rng)
        assert np.allclose(se3.adjoint(A @ B), se3.adjoint(A) @ se3.adjoint(B), atol=1e-12)


def test_adjoint_defining_relation():
    rng = np.random.default_rng(6)
    h = 1e-6
    for _ in range(50):
        T = random_pose(rng)
        Ad = se3.adjoint(T)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            fd = (se3.log(T @ se3.exp(e) @ T.inverse()) - se3.log(T @ se3.exp(-e) @ T.inverse())) / (2 * h)
            assert np.max(np.abs(fd - Ad[:, k])) <= 1e-8


def test_interpolate_endpoints_and_midpoint():
    rng = np.random.default_rng(7)
    Ta, Tb = random_pose(rng, 1.0), random_pose(rng, 1.0)
    T0 = se3.interpolate(Ta, Tb, 0.0)
    assert np.array_equal(T0.R, Ta.R) and np.array_equal(T0.t, Ta.t)
    T1 = se3.interpolate(Ta, Tb, 1.0)
    assert np.allclose(T1.matrix(), Tb.matrix(), atol=1e-9)
    mid = se3.interpolate(Pose.identity(), Pose(np.eye(3), [2, 0, 0]), 0.5)
    assert np.allclose(mid.t, [1, 0, 0])
    with pytest.raises(ValueError):
        se3.interpolate(Ta, Tb, 1.5)


@pytest.mark.parametrize("kind", ["translation", "rotation"])
def test_interpolate_reverse_agrees_on_subgroups(kind):
    rng = np.random.default_rng(8)
    for _ in range(20):
        if kind == "translation":
            Ta = Pose(se3.rot_z(0.4), rng.normal(size=3))
            Tb = Pose(Ta.R, rng.normal(size=3))
        else:
            Ta = Pose(np.eye(3), np.zeros(3))
            Tb = Pose(se3.so3_exp(rng.normal(size=3) * 0.5), np.zeros(3))
        tau = rng.uniform()
        a = se3.interpolate(Ta, Tb, tau)
        b = se3.interpolate(Tb, Ta, 1 - tau)
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-9)


def test_skew():
    assert np.allclose(se3.skew([1, 0, 0]) @ [0, 1, 0], [0, 0, 1])
    rng = np.random.default_rng(9)
    for _ in range(100):
        v, w = rng.normal(size=3), rng.normal(size=3)
        S = se3.skew(v)
        assert np.array_equal(S.T, -S)
        assert np.allclose(S @ w, np.cross(v, w), atol=1e-14)
        assert np.allclose(se3.vee(S), v)


def test_quaternion_round_trip():
    rng = np.random.default_rng(10)
    for _ in range(50):
        T = random_pose(rng, 3.0)
        q = T.quaternion()
        assert q[0] >= 0
        assert np.allclose(Pose.from_quaternion(q, T.t).R, T.R, atol=1e-12)


def test_wrap_angle():
    assert se3.wrap_angle(np.pi) == np.pi
    assert se3.wrap_angle(-np.pi) == np.pi
    assert np.isclose(se3.wrap_angle(3 * np.pi / 2), -np.pi / 2)
