"""Error functions, analytic Jacobians and noise models of the graph factors.

Residual conventions (right perturbation ``T * Exp(xi)`` on every variable):

* SE(3) prior        e = Log(P^-1 T)                               (6)
* tilt prior         e = (g_y, -g_x),  g = R^T z                    (2)
* relative pose      e = Log(M^-1 Ta^-1 Tb)                         (6)
* detection          e = [Tx_int^-1 Ty_int]_tr - d                  (3)

where ``Tx_int``/``Ty_int`` are the manifold interpolations of the two
variables bracketing the detection stamp.

Every kernel below is vectorized over a leading factor axis; the ``eval_*``
functions are thin single-factor wrappers around them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from . import se3
from .errors import NotPositiveDefinite, TauOutOfRange
from .se3 import Pose

DIAG_FLOOR = 1e-12
_Z = np.array([0.0, 0.0, 1.0])


@dataclass
class FactorEvaluation:
    error: np.ndarray
    jacobians: List[np.ndarray]


@dataclass(frozen=True)
class VariableKey:
    robot: str
    index: int

    def __str__(self):
        return f"{self.robot}{self.index}"


@dataclass(frozen=True)
class DetectionMeasurement:
    d: np.ndarray
    stamp: float
    track_id: int

    def __post_init__(self):
        d = np.array(self.d, dtype=float).reshape(3)
        d.setflags(write=False)
        object.__setattr__(self, "d", d)
        if not np.isfinite(self.stamp):
            raise ValueError("detection stamp must be finite")


class NoiseModel:
    """Gaussian noise held as a whitening matrix ``S`` with S^T S = Sigma^-1."""

    def __init__(self, sqrt_info, covariance=None):
        self.sqrt_info = np.asarray(sqrt_info, dtype=float)
        self._cov = covariance

    @classmethod
    def from_covariance(cls, cov):
        cov = np.array(cov, dtype=float, ndmin=2)
        if cov.shape[0] != cov.shape[1] or not np.all(np.isfinite(cov)):
            raise NotPositiveDefinite("covariance must be a finite square matrix")
        cov = 0.5 * (cov + cov.T)
        diag = np.diag(cov)
        if np.any(diag < -DIAG_FLOOR):
            raise NotPositiveDefinite("covariance has a negative variance")
        cov = cov + np.diag(np.clip(DIAG_FLOOR - diag, 0.0, None))
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from None
        S = np.linalg.solve(L, np.eye(cov.shape[0]))
        return cls(S, cov)

    @classmethod
    def from_sigmas(cls, sigmas):
        return cls.from_covariance(np.diag(np.asarray(sigmas, dtype=float) ** 2))

    @classmethod
    def from_information(cls, info, rel_tol=1e-12):
        """Square root of a PSD information matrix; null directions carry no weight."""
        info = 0.5 * (np.asarray(info, dtype=float) + np.asarray(info, dtype=float).T)
        w, U = np.linalg.eigh(info)
        keep = w > rel_tol * max(w[-1], 0.0)
        if not np.any(keep):
            raise NotPositiveDefinite("information matrix has no positive eigenvalue")
        return cls(np.sqrt(w[keep])[:, None] * U[:, keep].T)

    @property
    def dim(self):
        return self.sqrt_info.shape[1]

    @property
    def covariance(self):
        if self._cov is None:
            self._cov = np.linalg.pinv(self.sqrt_info.T @ self.sqrt_info)
        return self._cov

    @property
    def information(self):
        return self.sqrt_info.T @ self.sqrt_info


def whiten(ev: FactorEvaluation, noise) -> FactorEvaluation:
    """Premultiply error and Jacobians by the inverse Cholesky factor."""
    if not isinstance(noise, NoiseModel):
        noise = NoiseModel.from_covariance(noise)
    S = noise.sqrt_info
    return FactorEvaluation(S @ ev.error, [S @ J for J in ev.jacobians])


# ------------------------------------------------------------------- kernels

def prior_kernel(R, t, Rp, tp, jac=True):
    Rd, td = se3.compose_rt(*se3.inverse_rt(Rp, tp), R, t)
    e = se3.log_rt(Rd, td)
    return e, (se3.right_jacobian_inv(e)[:, None] if jac else None)


def tilt_kernel(R, jac=True):
    g = R[..., 2, :]
    e = np.stack([g[..., 1], -g[..., 0]], axis=-1)
    if not jac:
        return e, None
    J = np.zeros(R.shape[:-2] + (2, 6))
    J[..., 0, 0] = g[..., 2]
    J[..., 0, 2] = -g[..., 0]
    J[..., 1, 1] = g[..., 2]
    J[..., 1, 2] = -g[..., 1]
    return e, J[:, None]


def relative_kernel(Ra, ta, Rb, tb, Rm, tm, jac=True):
    Rab, tab = se3.compose_rt(*se3.inverse_rt(Ra, ta), Rb, tb)
    Rd, td = se3.compose_rt(*se3.inverse_rt(Rm, tm), Rab, tab)
    e = se3.log_rt(Rd, td)
    if not jac:
        return e, None
    Jinv = se3.right_jacobian_inv(e)
    Ad_ba = se3.adjoint_rt(*se3.inverse_rt(Rab, tab))
    return e, np.stack([-Jinv @ Ad_ba, Jinv], axis=1)


def _interp_kernel(Rk, tk, Rk1, tk1, tau, jac=True):
    """Interpolated pose and its 6x6 partials w.r.t. both endpoints."""
    Rrel, trel = se3.compose_rt(*se3.inverse_rt(Rk, tk), Rk1, tk1)
    L = se3.log_rt(Rrel, trel)
    tL = tau[:, None] * L
    Re, te = se3.exp_rt(tL)
    Ri, ti = se3.compose_rt(Rk, tk, Re, te)
    if not jac:
        return Ri, ti, None, None
    JJ = se3.right_jacobian(tL) @ se3.right_jacobian_inv(L)
    JJ = tau[:, None, None] * JJ
    d_k = se3.adjoint_rt(*se3.inverse_rt(Re, te)) - JJ @ se3.adjoint_rt(*se3.inverse_rt(Rrel, trel))
    return Ri, ti, d_k, JJ


def detection_kernel(Rxk, txk, Rxk1, txk1, Ryl, tyl, Ryl1, tyl1, tau_x, tau_y, d, jac=True):
    Rx, tx, dxk, dxk1 = _interp_kernel(Rxk, txk, Rxk1, txk1, tau_x, jac)
    Ry, ty, dyk, dyk1 = _interp_kernel(Ryl, tyl, Ryl1, tyl1, tau_y, jac)
    RxT = np.swapaxes(Rx, -1, -2)
    v = np.einsum("...ij,...j->...i", RxT, ty - tx)
    e = v - d
    if not jac:
        return e, None
    n = e.shape[0]
    De_x = np.zeros((n, 3, 6))
    De_x[:, :, :3] = se3.skew(v)
    De_x[:, :, 3:] = -np.eye(3)
    De_y = np.zeros((n, 3, 6))
    De_y[:, :, 3:] = RxT @ Ry
    J = np.stack([De_x @ dxk, De_x @ dxk1, De_y @ dyk, De_y @ dyk1], axis=1)
    return e, J


# ------------------------------------------------------ single-factor wrappers

def _b(pose: Pose):
    return pose.R[None], pose.t[None]


def _single(e, J):
    return FactorEvaluation(e[0], [J[0, i] for i in range(J.shape[1])])


def eval_se3_prior(T: Pose, prior: Pose) -> FactorEvaluation:
    return _single(*prior_kernel(*_b(T), *_b(prior)))


def eval_tilt_prior(T: Pose) -> FactorEvaluation:
    return _single(*tilt_kernel(T.R[None]))


def eval_relative_pose(Ta: Pose, Tb: Pose, meas: Pose) -> FactorEvaluation:
    return _single(*relative_kernel(*_b(Ta), *_b(Tb), *_b(meas)))


def _check_tau(tau):
    if not (0.0 <= tau <= 1.0) or not np.isfinite(tau):
        raise TauOutOfRange(f"tau={tau} outside [0, 1]")


def detection_error(Txk, Txk1, Tyl, Tyl1, d, tau_x, tau_y) -> np.ndarray:
    e, _ = detection_kernel(
        *_b(Txk), *_b(Txk1), *_b(Tyl), *_b(Tyl1),
        np.array([tau_x], float), np.array([tau_y], float), np.asarray(d, float)[None],
    )
    return e[0]


def eval_detection(Txk, Txk1, Tyl, Tyl1, d, tau_x, tau_y, numeric=False) -> FactorEvaluation:
    """Quaternary detection factor; ``numeric=True`` swaps in central differences."""
    _check_tau(tau_x)
    _check_tau(tau_y)
    if isinstance(d, DetectionMeasurement):
        d = d.d
    d = np.asarray(d, dtype=float)
    poses = [Txk, Txk1, Tyl, Tyl1]
    ev = _single(*detection_kernel(
        *_b(Txk), *_b(Txk1), *_b(Tyl), *_b(Tyl1),
        np.array([tau_x], float), np.array([tau_y], float), d[None],
    ))
    if numeric:
        ev.jacobians = numeric_jacobians(lambda ps: detection_error(*ps, d, tau_x, tau_y), poses)
    return ev


def numeric_jacobians(err_fn, poses: Sequence[Pose], h=1e-6) -> List[np.ndarray]:
    """Central differences of ``err_fn`` under right perturbations of each pose."""
    out = []
    for i, P in enumerate(poses):
        cols = []
        for k in range(6):
            dv = np.zeros(6)
            dv[k] = h
            plus = list(poses)
            minus = list(poses)
            plus[i] = P @ se3.exp(dv)
            minus[i] = P @ se3.exp(-dv)
            cols.append((err_fn(plus) - err_fn(minus)) / (2 * h))
        out.append(np.stack(cols, axis=1))
    return out


def numeric_jacobians_batch(err_fn, R, t, h=1e-6) -> np.ndarray:
    """Vectorized central differences.

    ``R`` (M,k,3,3) and ``t`` (M,k,3) stack k poses for M configurations;
    ``err_fn(R, t)`` returns (M,d). Result is (M,k,d,6).
    """
    M, k = R.shape[:2]
    cols = []
    for i in range(k):
        for c in range(6):
            dv = np.zeros(6)
            dv[c] = h
            pair = []
            for sgn in (1.0, -1.0):
                dR, dt = se3.exp_rt(sgn * dv)
                Rp, tp = R.copy(), t.copy()
                Rp[:, i], tp[:, i] = se3.compose_rt(R[:, i], t[:, i], dR, dt)
                pair.append(err_fn(Rp, tp))
            cols.append((pair[0] - pair[1]) / (2 * h))
    J = np.stack(cols, axis=-1)
    return J.reshape(M, J.shape[1], k, 6).transpose(0, 2, 1, 3)


# --------------------------------------------------------------- graph factors

@dataclass
class Factor:
    """A factor bound to variable keys.

    Subclasses implement ``prepare`` (stack the constant data of a homogeneous
    group once) and ``run`` (evaluate the group at stacked poses).
    """

    keys: Tuple[VariableKey, ...]
    noise: NoiseModel
    kind: str = field(default="", init=False)

    @classmethod
    def prepare(cls, factors, idx) -> dict:
        ii = np.array([[idx[k] for k in f.keys] for f in factors], dtype=int)
        return {"ii": ii, "S": np.stack([f.noise.sqrt_info for f in factors])}

    @classmethod
    def run(cls, prep, R, t, jac=True, whitened=True):
        """Errors (M,d), Jacobians (M,k,d,6) or None, variable indices (M,k)."""
        raise NotImplementedError

    @classmethod
    def batch(cls, factors, R, t, idx, whitened=True):
        return cls.run(cls.prepare(factors, idx), R, t, True, whitened)

    def evaluate(self, poses: Sequence[Pose]) -> FactorEvaluation:
        R = np.stack([p.R for p in poses])
        t = np.stack([p.t for p in poses])
        idx = {k: i for i, k in enumerate(self.keys)}
        e, J, _ = type(self).batch([self], R, t, idx, whitened=False)
        return _single(e, J)


def _finish(prep, e, J, whitened):
    if whitened:
        S = prep["S"]
        e = np.einsum("mij,mj->mi", S, e)
        if J is not None:
            J = np.einsum("mij,mkjc->mkic", S, J)
    return e, J, prep["ii"]


@dataclass
class Se3PriorFactor(Factor):
    prior: Pose = None

    def __post_init__(self):
        self.kind = "prior"

    @classmethod
    def prepare(cls, factors, idx):
        prep = super().prepare(factors, idx)
        prep["Rp"] = np.stack([f.prior.R for f in factors])
        prep["tp"] = np.stack([f.prior.t for f in factors])
        return prep

    @classmethod
    def run(cls, prep, R, t, jac=True, whitened=True):
        i = prep["ii"][:, 0]
        e, J = prior_kernel(R[i], t[i], prep["Rp"], prep["tp"], jac)
        return _finish(prep, e, J, whitened)


@dataclass
class TiltPriorFactor(Factor):
    def __post_init__(self):
        self.kind = "tilt"

    @classmethod
    def run(cls, prep, R, t, jac=True, whitened=True):
        e, J = tilt_kernel(R[prep["ii"][:, 0]], jac)
        return _finish(prep, e, J, whitened)


@dataclass
class RelativePoseFactor(Factor):
    measured: Pose = None
    source: str = "odom"

    def __post_init__(self):
        self.kind = self.source

    @classmethod
    def prepare(cls, factors, idx):
        prep = super().prepare(factors, idx)
        prep["Rm"] = np.stack([f.measured.R for f in factors])
        prep["tm"] = np.stack([f.measured.t for f in factors])
        return prep

    @classmethod
    def run(cls, prep, R, t, jac=True, whitened=True):
        ia, ib = prep["ii"].T
        e, J = relative_kernel(R[ia], t[ia], R[ib], t[ib], prep["Rm"], prep["tm"], jac)
        return _finish(prep, e, J, whitened)


@dataclass
class DetectionFactor(Factor):
    measurement: DetectionMeasurement = None
    tau_x: float = 0.0
    tau_y: float = 0.0
    target: str = ""

    def __post_init__(self):
        self.kind = "det"
        _check_tau(self.tau_x)
        _check_tau(self.tau_y)

    @classmethod
    def prepare(cls, factors, idx):
        prep = super().prepare(factors, idx)
        prep["tx"] = np.array([f.tau_x for f in factors])
        prep["ty"] = np.array([f.tau_y for f in factors])
        prep["d"] = np.stack([f.measurement.d for f in factors])
        return prep

    @classmethod
    def run(cls, prep, R, t, jac=True, whitened=True):
        a, b, c, d = prep["ii"].T
        e, J = detection_kernel(R[a], t[a], R[b], t[b], R[c], t[c], R[d], t[d],
                                prep["tx"], prep["ty"], prep["d"], jac)
        return _finish(prep, e, J, whitened)


@dataclass
class MarginalFactor(Factor):
    """Gaussian left behind by marginalization, over several variables.

    Residual ``S (delta - delta_bar)`` with ``delta_i = Log(lin_i^-1 T_i)``
    and ``S = noise.sqrt_info``. Groups must share the same arity, so the
    graph prepares each marginal factor on its own.
    """

    linpoints: Tuple[Pose, ...] = ()
    delta_bar: np.ndarray = None

    def __post_init__(self):
        self.kind = "marginal"

    @classmethod
    def prepare(cls, factors, idx):
        if len(factors) != 1:
            raise ValueError("marginal factors are prepared one at a time")
        f = factors[0]
        prep = super().prepare(factors, idx)
        prep["Rl"] = np.stack([p.R for p in f.linpoints])
        prep["tl"] = np.stack([p.t for p in f.linpoints])
        prep["db"] = np.asarray(f.delta_bar, dtype=float)
        return prep

    @classmethod
    def run(cls, prep, R, t, jac=True, whitened=True):
        ii = prep["ii"][0]
        S = prep["S"][0] if whitened else np.eye(6 * len(ii))
        delta = se3.log_rt(*se3.compose_rt(*se3.inverse_rt(prep["Rl"], prep["tl"]), R[ii], t[ii]))
        e = S @ (delta.reshape(-1) - prep["db"])
        J = None
        if jac:
            Jd = se3.right_jacobian_inv(delta)
            J = np.stack([S[:, 6 * j:6 * j + 6] @ Jd[j] for j in range(len(ii))])[None]
        return e[None], J, prep["ii"]


FACTOR_TYPES = (Se3PriorFactor, TiltPriorFactor, RelativePoseFactor, DetectionFactor, MarginalFactor)
