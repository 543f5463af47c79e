import mpmath
import numpy as np
import pytest

from coopfuse.config import ConfigError
from coopfuse.errors import NonPositiveDt, NotPSD
from coopfuse.se3 import Pose
from coopfuse.weighting import (
    LioHealth,
    VioSample,
    WeightingParams,
    detection_noise,
    lio_noise,
    vio_noise,
    vio_sigmas,
    wasserstein2,
)

P = WeightingParams()


def rand_spd(rng, scale=1.0):
    A = rng.normal(size=(3, 3)) * scale
    return A @ A.T + 1e-3 * scale**2 * np.eye(3)


def w2_mp(S1, S2, dps=40):
    """Trace formula in 128+ bit arithmetic."""
    with mpmath.workdps(dps):
        A = mpmath.matrix(S1.tolist())
        B = mpmath.matrix(S2.tolist())

        def sqrtm_sym(M):
            E, Q = mpmath.eigsy(M)
            D = mpmath.diag([mpmath.sqrt(max(e, 0)) for e in E])
            return Q * D * Q.T

        rA = sqrtm_sym(A)
        C = rA * B * rA
        C = (C + C.T) / 2
        rC = sqrtm_sym(C)
        tr = sum(A[i, i] + B[i, i] - 2 * rC[i, i] for i in range(3))
        return float(mpmath.sqrt(max(tr, 0)))


def test_lio_noise_healthy_table_values():
    cov = lio_noise(True, True, 0.5, P)
    expect = np.diag([1e-6, 1e-6, 0.001**2, 0.01**2, 0.01**2, 0.01**2]) * 0.5
    assert np.allclose(cov, expect, rtol=1e-15, atol=0)


@pytest.mark.parametrize("flags", [(False, True), (True, False), (False, False)])
def test_lio_noise_degenerate_uses_hi(flags):
    cov = lio_noise(*flags, 1.0, P)
    assert np.allclose(np.diag(cov)[2:], [1.0, 25.0, 25.0, 25.0])


def test_lio_noise_linear_in_dt():
    for h in [(True, True), (False, True)]:
        assert np.allclose(lio_noise(*h, 1.0, P), 2 * lio_noise(*h, 0.5, P))
    with pytest.raises(NonPositiveDt):
        lio_noise(True, True, 0.0, P)


def test_lio_health_threshold():
    assert LioHealth.from_min_eig(429.9, P).degenerate
    assert not LioHealth.from_min_eig(430.0, P).degenerate


def test_w2_identical_is_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        S = rand_spd(rng)
        assert wasserstein2(S, S) <= 1e-9


def test_w2_diagonal_closed_form():
    assert np.isclose(wasserstein2(np.eye(3), 4 * np.eye(3)), np.sqrt(3), rtol=0, atol=1e-14)
    rng = np.random.default_rng(1)
    for _ in range(200):
        a, b = rng.uniform(0, 2, 3), rng.uniform(0, 2, 3)
        ref = np.sqrt(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2))
        assert abs(wasserstein2(np.diag(a), np.diag(b)) - ref) <= 1e-10


def test_w2_matches_high_precision_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        S1, S2 = rand_spd(rng), rand_spd(rng)
        assert abs(wasserstein2(S1, S2) - w2_mp(S1, S2)) <= 1e-9


def test_w2_metric_properties():
    rng = np.random.default_rng(3)
    for _ in range(200):
        A, B, C = rand_spd(rng), rand_spd(rng), rand_spd(rng)
        assert wasserstein2(A, B) == wasserstein2(B, A)
        assert wasserstein2(A, C) <= wasserstein2(A, B) + wasserstein2(B, C) + 1e-9


def test_w2_rejects_non_psd():
    with pytest.raises(NotPSD):
        wasserstein2(np.diag([1.0, 1.0, -1.0]), np.eye(3))
    with pytest.raises(NotPSD):
        wasserstein2(np.array([[1.0, 0.5, 0], [0, 1, 0], [0, 0, 1]]), np.eye(3))


def vs(cov, stamp):
    return VioSample(Pose.identity(), cov, stamp)


def test_vio_noise_lower_clamp():
    S = np.eye(3) * 0.01
    cov = vio_noise(vs(S, 0.0), vs(S, 0.5), P)
    assert np.isclose(np.sqrt(cov[3, 3]), 0.1 * np.sqrt(0.5))
    assert np.isclose(np.sqrt(cov[2, 2]), 0.01 * 0.5)


def test_vio_noise_upper_clamp_inflates_yaw():
    cov = vio_noise(vs(np.eye(3) * 0.01, 0.0), vs(np.eye(3), 0.5), P)
    assert np.isclose(np.sqrt(cov[3, 3]), 5.0 * np.sqrt(0.5))
    assert np.isclose(np.sqrt(cov[2, 2]), 20 * 0.01 * 0.5)


def test_vio_sigmas_hand_evaluated():
    pos, yaw = vio_sigmas(0.005, 0.5, P)
    assert np.isclose(pos, 1.3)
    assert np.isclose(yaw, 0.005)


def test_vio_sigmas_bounds_and_monotone():
    rng = np.random.default_rng(4)
    w = np.sort(rng.uniform(0, 0.1, 500))
    dt = 0.5
    s = np.array([vio_sigmas(x, dt, P)[0] for x in w])
    assert np.all(s >= 0.1 * np.sqrt(dt) - 1e-15) and np.all(s <= 5.0 * np.sqrt(dt) + 1e-15)
    assert np.all(np.diff(s) >= 0)


def test_vio_noise_rejects_bad_dt():
    with pytest.raises(NonPositiveDt):
        vio_noise(vs(np.eye(3), 1.0), vs(np.eye(3), 1.0), P)


def test_detection_noise():
    assert np.allclose(detection_noise(P), np.eye(3) * 0.0169)
    q = WeightingParams(sigma_det=0.26)
    assert np.allclose(detection_noise(q), 4 * detection_noise(P))


def test_params_validation():
    with pytest.raises(ConfigError):
        WeightingParams(vmin_sigma_pos=6.0)
    with pytest.raises(ConfigError):
        WeightingParams(mu=-1.0)
    assert WeightingParams().with_mu(500.0).mu == 500.0
