"""SE(3)/SO(3) arithmetic with rotation-first tangent vectors.

A tangent vector is ``xi = (phi, rho)``: three rotation components (rad)
followed by three translation components (m). Perturbations are applied on
the right, ``T * Exp(xi)``, so covariances and Jacobians live in the body
frame of ``T``.

The ``*_rt`` functions and the Jacobian helpers operate on arrays with
arbitrary leading batch dimensions (rotations ``(..., 3, 3)``, translations
``(..., 3)``, tangents ``(..., 6)``). ``Pose`` wraps a single element.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import AngleNearPi

# Below this angle the trigonometric coefficients switch to Taylor series.
SERIES_CUTOFF = 0.1
NEAR_PI_MARGIN = 1e-6

_I3 = np.eye(3)


def _series(theta2, coeffs):
    out = coeffs[-1]
    for c in coeffs[-2::-1]:
        out = out * theta2 + c
    return out * np.ones_like(theta2)


# Taylor coefficients in theta**2 (terms through theta**8).
_A = (1.0, -1 / 6, 1 / 120, -1 / 5040, 1 / 362880)
_B = (1 / 2, -1 / 24, 1 / 720, -1 / 40320, 1 / 3628800)
_C = (1 / 6, -1 / 120, 1 / 5040, -1 / 362880, 1 / 39916800)
_D = (1 / 12, 1 / 720, 1 / 30240, 1 / 1209600, 1 / 47900160)
_E = (1 / 24, -1 / 720, 1 / 40320, -1 / 3628800, 1 / 479001600)
_F = (1 / 120, -1 / 2520, 1 / 120960, -1 / 9979200, 1 / 1245404160)
_G = (1.0, 1 / 6, 7 / 360, 31 / 15120, 127 / 604800)


def _coeff(theta, series, exact):
    """Evaluate a smooth even function of theta, Taylor near zero."""
    theta = np.asarray(theta, dtype=float)
    small = theta < SERIES_CUTOFF
    if not small.any():
        return exact(theta)
    if small.all():
        return _series(theta * theta, series)
    safe = np.where(small, 1.0, theta)
    return np.where(small, _series(theta * theta, series), exact(safe))


def _sinc(th):
    return _coeff(th, _A, lambda x: np.sin(x) / x)


def _one_minus_cos(th):
    return _coeff(th, _B, lambda x: 2.0 * np.sin(0.5 * x) ** 2 / (x * x))


def _x_minus_sin(th):
    return _coeff(th, _C, lambda x: (x - np.sin(x)) / x**3)


def _jinv_coeff(th):
    return _coeff(th, _D, lambda x: 1.0 / (x * x) - (1.0 + np.cos(x)) / (2.0 * x * np.sin(x)))


def _q_coeff2(th):
    return _coeff(th, _E, lambda x: (x * x + 2.0 * np.cos(x) - 2.0) / (2.0 * x**4))


def _q_coeff3(th):
    return _coeff(th, _F, lambda x: (2.0 * x - 3.0 * np.sin(x) + x * np.cos(x)) / (2.0 * x**5))


def _x_over_sin(th):
    return _coeff(th, _G, lambda x: x / np.sin(x))


def skew(v):
    """Hat operator: ``skew(v) @ w == cross(v, w)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _angle(phi):
    return np.linalg.norm(phi, axis=-1)


def _scale(c, m):
    return c[..., None, None] * m


# --------------------------------------------------------------------- SO(3)

def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    th = _angle(phi)
    K = skew(phi)
    return _I3 + _scale(_sinc(th), K) + _scale(_one_minus_cos(th), K @ K)


def so3_log(R):
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    th = np.arctan2(s, c)
    if np.any(th > np.pi - NEAR_PI_MARGIN):
        raise AngleNearPi(f"rotation angle {float(np.max(th)):.9f} rad is within {NEAR_PI_MARGIN} of pi")
    return _x_over_sin(th)[..., None] * w


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    th = _angle(phi)
    K = skew(phi)
    return _I3 + _scale(_one_minus_cos(th), K) + _scale(_x_minus_sin(th), K @ K)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    th = _angle(phi)
    K = skew(phi)
    return _I3 - 0.5 * K + _scale(_jinv_coeff(th), K @ K)


def so3_right_jacobian(phi):
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi):
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


# --------------------------------------------------------------------- SE(3)

def exp_rt(xi):
    """Tangent (..., 6) -> (R, t)."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    R = so3_exp(phi)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    return R, t


def log_rt(R, t):
    """(R, t) -> tangent (..., 6). Raises AngleNearPi."""
    phi = so3_log(R)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), np.asarray(t, dtype=float))
    return np.concatenate([phi, rho], axis=-1)


def compose_rt(R1, t1, R2, t2):
    return R1 @ R2, t1 + np.einsum("...ij,...j->...i", R1, t2)


def inverse_rt(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("...ij,...j->...i", Rt, t)


def adjoint_rt(R, t):
    """6x6 adjoint in rotation-first layout: [[R, 0], [t^ R, R]]."""
    R = np.asarray(R, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = skew(t) @ R
    return out


def _q_left(rho, phi):
    th = _angle(phi)
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    term1 = PR + RP + PRP
    term2 = PP @ Rh + RP @ P - 3.0 * PRP
    term3 = PRP @ P + PP @ RP
    return (
        0.5 * Rh
        + _scale(_x_minus_sin(th), term1)
        + _scale(_q_coeff2(th), term2)
        + _scale(_q_coeff3(th), term3)
    )


def right_jacobian(xi):
    """SE(3) right Jacobian: Exp(xi + d) ~= Exp(xi) Exp(Jr(xi) d)."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    J = so3_right_jacobian(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., 3:, :3] = _q_left(-rho, -phi)
    return out


def right_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    Ji = so3_right_jacobian_inv(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., 3:, :3] = -Ji @ _q_left(-rho, -phi) @ Ji
    return out


# ---------------------------------------------------------------- Pose value

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping body-frame vectors into the parent frame."""

    R: np.ndarray
    t: np.ndarray
    stamp: Optional[float] = None

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if self.stamp is not None:
            object.__setattr__(self, "stamp", float(self.stamp))

    @classmethod
    def identity(cls, stamp=None):
        return cls(_I3, np.zeros(3), stamp)

    @classmethod
    def from_matrix(cls, M, stamp=None):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3], stamp)

    @classmethod
    def from_quaternion(cls, qwxyz, t, stamp=None):
        qw, qx, qy, qz = qwxyz
        return cls(Rotation.from_quat([qx, qy, qz, qw]).as_matrix(), t, stamp)

    @classmethod
    def from_yaw(cls, yaw, t=(0.0, 0.0, 0.0), stamp=None):
        return cls(rot_z(yaw), t, stamp)

    def quaternion(self):
        """(qw, qx, qy, qz) with qw >= 0."""
        qx, qy, qz, qw = Rotation.from_matrix(self.R).as_quat()
        q = np.array([qw, qx, qy, qz])
        return -q if qw < 0 else q

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self):
        Ri, ti = inverse_rt(self.R, self.t)
        return Pose(Ri, ti)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            R, t = compose_rt(self.R, self.t, other.R, other.t)
            return Pose(R, t)
        return self.R @ np.asarray(other, dtype=float) + self.t

    def with_stamp(self, stamp):
        return Pose(self.R, self.t, stamp)

    @property
    def yaw(self):
        return yaw_of(self.R)

    def __repr__(self):
        return f"Pose(t={np.array2string(self.t, precision=4)}, yaw={self.yaw:.4f}, stamp={self.stamp})"


def exp(xi) -> Pose:
    R, t = exp_rt(np.asarray(xi, dtype=float).reshape(6))
    return Pose(R, t)


def log(T: Pose) -> np.ndarray:
    return log_rt(T.R, T.t)


def adjoint(T: Pose) -> np.ndarray:
    return adjoint_rt(T.R, T.t)


def interpolate(Ta: Pose, Tb: Pose, tau: float) -> Pose:
    """Ta * Exp(tau * Log(Ta^-1 Tb)); exact endpoints at tau 0 and 1."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau={tau} outside [0, 1]")
    if tau == 0.0:
        return Pose(Ta.R, Ta.t)
    if tau == 1.0:
        return Pose(Tb.R, Tb.t)
    return Ta @ exp(tau * log(Ta.inverse() @ Tb))


def rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(R):
    R = np.asarray(R)
    return np.arctan2(R[..., 1, 0], R[..., 0, 0])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)
