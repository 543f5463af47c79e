"""Adaptive measurement noise for odometry and detection factors.

LIO relative poses switch between a tight and a loose diagonal covariance
depending on the scan-matcher degeneracy flag of both endpoints. VIO relative
poses get a positional sigma proportional to the 2-Wasserstein distance
between the positional covariances of consecutive filter outputs.

Both paths scale *variances* linearly in the sample interval ``dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, NonPositiveDt, NotPSD
from .se3 import Pose

PSD_TOL = 1e-10


@dataclass(frozen=True)
class WeightingParams:
    """Noise parameters; defaults reproduce the experiment table.

    ``sigma_roll`` / ``sigma_pitch`` are not published and default to a
    near-hard 1e-3 rad.
    """

    lambda_thr: float = 430.0
    sigma_roll: float = 1e-3
    sigma_pitch: float = 1e-3
    lo_sigma_yaw: float = 0.001
    hi_sigma_yaw: float = 1.0
    lo_sigma_pos: float = 0.01
    hi_sigma_pos: float = 5.0
    vmin_sigma_pos: float = 0.1
    vmax_sigma_pos: float = 5.0
    mu: float = 260.0
    nu: float = 20.0
    v_sigma_yaw: float = 0.01
    sigma_det: float = 0.13

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v <= 0:
                raise ConfigError(f"weighting.{f.name} must be a positive number, got {v!r}")
        if not (self.lo_sigma_pos <= self.vmin_sigma_pos < self.vmax_sigma_pos <= self.hi_sigma_pos):
            raise ConfigError("weighting: need lo_sigma_pos <= vmin_sigma_pos < vmax_sigma_pos <= hi_sigma_pos")

    def with_mu(self, mu):
        return replace(self, mu=mu)


@dataclass(frozen=True)
class LioHealth:
    min_eig: float
    degenerate: bool

    @classmethod
    def from_min_eig(cls, min_eig, params: WeightingParams):
        return cls(float(min_eig), bool(min_eig < params.lambda_thr))


@dataclass(frozen=True)
class VioSample:
    pose: Pose
    pos_cov: np.ndarray
    stamp: float


def lio_noise(healthy_k: bool, healthy_k1: bool, dt: float, p: WeightingParams) -> np.ndarray:
    if not dt > 0:
        raise NonPositiveDt(f"dt={dt}")
    if healthy_k and healthy_k1:
        yaw, pos = p.lo_sigma_yaw, p.lo_sigma_pos
    else:
        yaw, pos = p.hi_sigma_yaw, p.hi_sigma_pos
    sig = np.array([p.sigma_roll, p.sigma_pitch, yaw, pos, pos, pos])
    return np.diag(sig**2) * dt


def _check_psd(S, name):
    S = np.asarray(S, dtype=float)
    if S.shape != (3, 3) or not np.all(np.isfinite(S)):
        raise NotPSD(f"{name} must be a finite 3x3 matrix")
    if np.max(np.abs(S - S.T)) > PSD_TOL * max(1.0, np.max(np.abs(S))):
        raise NotPSD(f"{name} is not symmetric")
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w[0] < -PSD_TOL * max(1.0, w[-1]):
        raise NotPSD(f"{name} has negative eigenvalue {w[0]:.3e}")
    return w.clip(min=0.0), V


def _psd_sqrt(w, V):
    return (V * np.sqrt(w)) @ V.T


def wasserstein2(S1, S2) -> float:
    """2-Wasserstein distance between zero-mean Gaussians N(0, S1), N(0, S2).

    Evaluated as ||A - B U||_F with A = S1^1/2, B = S2^1/2 and U the
    orthogonal polar factor aligning them; its square equals
    Tr[S1 + S2 - 2 (A S2 A)^1/2] without the cancellation of the trace form.
    """
    A = _psd_sqrt(*_check_psd(S1, "S1"))
    B = _psd_sqrt(*_check_psd(S2, "S2"))
    # fixed argument order makes the result exactly symmetric
    if B.tobytes() < A.tobytes():
        A, B = B, A
    P, _, Qt = np.linalg.svd(A @ B)
    U = Qt.T @ P.T
    return float(np.linalg.norm(A - B @ U))


def vio_sigmas(W2: float, dt: float, p: WeightingParams):
    """(sigma_pos, sigma_yaw) for one VIO relative pose."""
    if not dt > 0:
        raise NonPositiveDt(f"dt={dt}")
    raw = p.mu * W2
    hi = p.vmax_sigma_pos * np.sqrt(dt)
    sigma_pos = max(p.vmin_sigma_pos * np.sqrt(dt), min(hi, raw))
    sigma_yaw = p.v_sigma_yaw * dt
    if raw > hi:
        sigma_yaw *= p.nu
    return sigma_pos, sigma_yaw


def vio_noise(prev: VioSample, cur: VioSample, p: WeightingParams) -> np.ndarray:
    dt = cur.stamp - prev.stamp
    if not dt > 0:
        raise NonPositiveDt(f"dt={dt}")
    sigma_pos, sigma_yaw = vio_sigmas(wasserstein2(prev.pos_cov, cur.pos_cov), dt, p)
    sig = np.array([p.sigma_roll, p.sigma_pitch, sigma_yaw, sigma_pos, sigma_pos, sigma_pos])
    return np.diag(sig**2)


def detection_noise(p: WeightingParams) -> np.ndarray:
    return np.eye(3) * p.sigma_det**2


def tilt_noise(p: WeightingParams) -> np.ndarray:
    return np.diag([p.sigma_roll**2, p.sigma_pitch**2])
