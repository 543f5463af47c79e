import numpy as np
import pytest

from coopfuse import se3
from coopfuse.errors import NotPositiveDefinite, TauOutOfRange
from coopfuse.factors import (
    DetectionFactor,
    DetectionMeasurement,
    FactorEvaluation,
    MarginalFactor,
    NoiseModel,
    RelativePoseFactor,
    Se3PriorFactor,
    TiltPriorFactor,
    VariableKey,
    detection_error,
    detection_kernel,
    eval_detection,
    eval_relative_pose,
    eval_se3_prior,
    eval_tilt_prior,
    numeric_jacobians,
    numeric_jacobians_batch,
    whiten,
)
from coopfuse.se3 import Pose


def rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rand_pose(rng, yaw_only=False):
    if yaw_only:
        return Pose.from_yaw(rng.uniform(-np.pi, np.pi), rng.normal(size=3) * 3)
    ax = rng.normal(size=3)
    return se3.exp(np.r_[ax / np.linalg.norm(ax) * rng.uniform(0, 2.5), rng.normal(size=3) * 3])


def near(rng, T, scale=0.3):
    return T @ se3.exp(rng.normal(size=6) * scale)


def jac_ok(A, N):
    return np.linalg.norm(A - N) <= 1e-5 * max(np.linalg.norm(N), 1.0)


def test_prior_at_mean():
    rng = np.random.default_rng(0)
    P = rand_pose(rng)
    ev = eval_se3_prior(P, P)
    assert np.allclose(ev.error, 0, atol=1e-12)
    assert np.allclose(ev.jacobians[0], np.eye(6), atol=1e-12)


def test_prior_first_order_expansion():
    rng = np.random.default_rng(1)
    P = rand_pose(rng)
    delta = rng.normal(size=6) * 1e-4
    ev = eval_se3_prior(P @ se3.exp(delta), P)
    assert np.max(np.abs(ev.error - delta)) < 1e-7


def test_tilt_examples():
    assert np.allclose(eval_tilt_prior(Pose.from_yaw(1.2)).error, 0, atol=1e-15)
    for yaw in (-2.0, 0.0, 0.7, 3.0):
        e = eval_tilt_prior(Pose(se3.rot_z(yaw) @ rx(0.1), np.zeros(3))).error
        assert np.allclose(e, [0.1, 0.0], atol=1e-3)


def test_tilt_yaw_invariant():
    rng = np.random.default_rng(2)
    for _ in range(20):
        T = rand_pose(rng)
        yawed = Pose(se3.rot_z(rng.uniform(-3, 3)) @ T.R, T.t)
        assert np.allclose(eval_tilt_prior(T).error, eval_tilt_prior(yawed).error, atol=1e-12)


def test_tilt_jacobian_at_zero_tilt_selects_roll_pitch():
    J = eval_tilt_prior(Pose.from_yaw(0.4)).jacobians[0]
    assert np.allclose(J, np.hstack([np.eye(2), np.zeros((2, 4))]), atol=1e-15)


def test_relative_zero_when_consistent():
    rng = np.random.default_rng(3)
    for _ in range(20):
        Ta, M = rand_pose(rng), rand_pose(rng)
        assert np.allclose(eval_relative_pose(Ta, Ta @ M, M).error, 0, atol=1e-9)


def test_relative_jacobian_block_structure_yaw_only():
    rng = np.random.default_rng(4)
    for _ in range(20):
        Ta, Tb = rand_pose(rng, True), rand_pose(rng, True)
        ev = eval_relative_pose(Ta, Tb, Ta.inverse() @ Tb)
        Ja, Jb = ev.jacobians
        assert np.allclose(Ja[:3, :3], -Tb.R.T @ Ta.R, atol=1e-9)
        assert np.allclose(Ja[3:, :3], Tb.R.T @ se3.skew(Tb.t - Ta.t) @ Ta.R, atol=1e-9)
        assert np.allclose(Jb, np.eye(6), atol=1e-9)


def test_detection_zero_error_example():
    d0 = np.array([1.0, -2.0, 0.5])
    I = Pose.identity()
    Y = Pose(np.eye(3), d0)
    for tau in (0.0, 0.3, 1.0):
        assert np.allclose(eval_detection(I, I, Y, Y, d0, tau, tau).error, 0, atol=1e-15)


def test_detection_tau_zero_blocks():
    rng = np.random.default_rng(5)
    X1, X2, Y1, Y2 = (rand_pose(rng, True) for _ in range(4))
    ev = eval_detection(X1, X2, Y1, Y2, np.zeros(3), 0.0, 0.0)
    Jxk, Jxk1, Jyl, Jyl1 = ev.jacobians
    assert np.allclose(Jxk1, 0) and np.allclose(Jyl1, 0)
    v = X1.R.T @ (Y1.t - X1.t)
    assert np.allclose(Jxk[:, :3], X1.R.T @ se3.skew(Y1.t - X1.t) @ X1.R, atol=1e-12)
    assert np.allclose(Jxk[:, :3], se3.skew(v), atol=1e-12)
    assert np.allclose(Jxk[:, 3:], -np.eye(3))
    assert np.allclose(Jyl[:, :3], 0)
    assert np.allclose(Jyl[:, 3:], X1.R.T @ Y1.R, atol=1e-12)


def test_detection_tau_out_of_range():
    I = Pose.identity()
    with pytest.raises(TauOutOfRange):
        eval_detection(I, I, I, I, np.zeros(3), 1.2, 0.0)


def test_detection_gauge_invariance():
    rng = np.random.default_rng(6)
    for _ in range(50):
        poses = [rand_pose(rng) for _ in range(4)]
        poses[1] = near(rng, poses[0])
        poses[3] = near(rng, poses[2])
        G = Pose.from_yaw(rng.uniform(-3, 3), rng.normal(size=3) * 5)
        d = rng.normal(size=3)
        tx, ty = rng.uniform(size=2)
        e0 = detection_error(*poses, d, tx, ty)
        e1 = detection_error(*[G @ p for p in poses], d, tx, ty)
        assert np.max(np.abs(e0 - e1)) <= 1e-9


@pytest.mark.parametrize("yaw_only", [True, False])
def test_prior_relative_tilt_fd(yaw_only):
    rng = np.random.default_rng(7 + yaw_only)
    for _ in range(100):
        T, P = rand_pose(rng, yaw_only), rand_pose(rng, yaw_only)
        P = near(rng, T, 0.5)
        ev = eval_se3_prior(T, P)
        N = numeric_jacobians(lambda ps: eval_se3_prior(ps[0], P).error, [T])
        assert jac_ok(ev.jacobians[0], N[0])

        ev = eval_tilt_prior(T)
        N = numeric_jacobians(lambda ps: eval_tilt_prior(ps[0]).error, [T])
        assert jac_ok(ev.jacobians[0], N[0])

        Tb = near(rng, T, 0.5)
        M = near(rng, T.inverse() @ Tb, 0.2)
        ev = eval_relative_pose(T, Tb, M)
        N = numeric_jacobians(lambda ps: eval_relative_pose(ps[0], ps[1], M).error, [T, Tb])
        assert all(jac_ok(a, n) for a, n in zip(ev.jacobians, N))


@pytest.mark.parametrize("tau", [0.0, 0.3, 0.5, 1.0])
@pytest.mark.parametrize("yaw_only", [True, False])
def test_detection_fd(tau, yaw_only):
    rng = np.random.default_rng(int(tau * 10) + 100 * yaw_only)
    for _ in range(10):
        X1, Y1 = rand_pose(rng, yaw_only), rand_pose(rng, yaw_only)
        X2, Y2 = near(rng, X1, 0.4), near(rng, Y1, 0.4)
        d = rng.normal(size=3)
        ty = rng.uniform()
        ev = eval_detection(X1, X2, Y1, Y2, d, tau, ty)
        num = eval_detection(X1, X2, Y1, Y2, d, tau, ty, numeric=True)
        assert all(jac_ok(a, n) for a, n in zip(ev.jacobians, num.jacobians))


def test_batch_fd_matches_pose_fd():
    rng = np.random.default_rng(13)
    X1, Y1 = rand_pose(rng), rand_pose(rng)
    poses = [X1, near(rng, X1), Y1, near(rng, Y1)]
    d = rng.normal(size=3)
    ref = numeric_jacobians(lambda ps: detection_error(*ps, d, 0.4, 0.6), poses)
    R = np.stack([p.R for p in poses])[None]
    t = np.stack([p.t for p in poses])[None]
    fn = lambda R, t: detection_kernel(*(a for i in range(4) for a in (R[:, i], t[:, i])),
                                      np.array([0.4]), np.array([0.6]), d[None], jac=False)[0]
    got = numeric_jacobians_batch(fn, R, t)[0]
    assert all(np.allclose(g, r, atol=1e-9) for g, r in zip(got, ref))


def test_whiten_examples():
    rng = np.random.default_rng(9)
    ev = FactorEvaluation(rng.normal(size=3), [rng.normal(size=(3, 6))])
    same = whiten(ev, NoiseModel.from_covariance(np.eye(3)))
    assert np.allclose(same.error, ev.error) and np.allclose(same.jacobians[0], ev.jacobians[0])
    scaled = whiten(ev, NoiseModel.from_sigmas([0.5] * 3))
    assert np.allclose(scaled.error, ev.error / 0.5)
    for _ in range(50):
        A = rng.normal(size=(6, 6))
        cov = A @ A.T + 0.1 * np.eye(6)
        e = rng.normal(size=6)
        w = whiten(FactorEvaluation(e, []), cov)
        assert abs(w.error @ w.error - e @ np.linalg.solve(cov, e)) <= 1e-9 * max(1.0, e @ e)


def test_noise_model_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        NoiseModel.from_covariance(np.diag([1.0, -1.0]))
    with pytest.raises(NotPositiveDefinite):
        NoiseModel.from_covariance(np.full((2, 2), np.nan))


def test_noise_model_diag_floor():
    nm = NoiseModel.from_covariance(np.zeros((2, 2)))
    assert np.allclose(nm.covariance, np.eye(2) * 1e-12)


def test_noise_from_information_drops_null_space():
    U = np.linalg.qr(np.random.default_rng(10).normal(size=(4, 4)))[0]
    info = U @ np.diag([0.0, 1.0, 2.0, 3.0]) @ U.T
    nm = NoiseModel.from_information(info)
    assert nm.sqrt_info.shape == (3, 4)
    assert np.allclose(nm.information, info, atol=1e-12)


def test_graph_factor_classes_match_wrappers():
    rng = np.random.default_rng(11)
    keys = tuple(VariableKey("X", i) for i in range(4))
    poses = [rand_pose(rng) for _ in range(4)]
    poses[1] = near(rng, poses[0])
    poses[3] = near(rng, poses[2])
    nm6 = NoiseModel.from_sigmas([0.1] * 6)
    nm3 = NoiseModel.from_sigmas([0.1] * 3)

    f = Se3PriorFactor(keys[:1], nm6, prior=poses[1])
    assert np.allclose(f.evaluate(poses[:1]).error, eval_se3_prior(poses[0], poses[1]).error)
    f = TiltPriorFactor(keys[:1], NoiseModel.from_sigmas([1e-3, 1e-3]))
    assert np.allclose(f.evaluate(poses[:1]).jacobians[0], eval_tilt_prior(poses[0]).jacobians[0])
    M = near(rng, poses[0].inverse() @ poses[1])
    f = RelativePoseFactor(keys[:2], nm6, measured=M, source="lio")
    assert f.kind == "lio"
    ref = eval_relative_pose(poses[0], poses[1], M)
    got = f.evaluate(poses[:2])
    assert np.allclose(got.error, ref.error) and np.allclose(got.jacobians[1], ref.jacobians[1])
    det = DetectionMeasurement(rng.normal(size=3), 1.0, 3)
    f = DetectionFactor(keys, nm3, measurement=det, tau_x=0.2, tau_y=0.7)
    ref = eval_detection(*poses, det, 0.2, 0.7)
    got = f.evaluate(poses)
    assert np.allclose(got.error, ref.error)
    assert all(np.allclose(a, b) for a, b in zip(got.jacobians, ref.jacobians))


def test_marginal_factor_fd():
    rng = np.random.default_rng(12)
    for _ in range(20):
        lin = tuple(rand_pose(rng) for _ in range(2))
        cur = [near(rng, p, 0.3) for p in lin]
        A = rng.normal(size=(12, 12))
        f = MarginalFactor((VariableKey("X", 0), VariableKey("Y", 0)), NoiseModel.from_information(A @ A.T),
                           linpoints=lin, delta_bar=rng.normal(size=12) * 0.1)
        ev = f.evaluate(cur)
        N = numeric_jacobians(lambda ps: f.evaluate(ps).error, cur)
        assert all(jac_ok(a, n) for a, n in zip(ev.jacobians, N))


def test_detection_measurement_validation():
    with pytest.raises(ValueError):
        DetectionMeasurement(np.zeros(3), float("nan"), 1)
    m = DetectionMeasurement([1, 2, 3], 0.5, 1)
    assert not m.d.flags.writeable
