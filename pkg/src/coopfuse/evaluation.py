"""Trajectory accuracy: interpolation to common stamps, rigid alignment, ATE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from . import se3
from .errors import InsufficientOverlap, ZeroVariance
from .initialization import align_yaw_translation
from .weighting import wasserstein2

MODES = ("2d", "3d", "yaw")


@dataclass
class Trajectory:
    stamps: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1, 3, 3)
        if not (len(self.stamps) == len(self.positions) == len(self.rotations)):
            raise ValueError("trajectory arrays differ in length")
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("trajectory stamps must be strictly increasing")

    def __len__(self):
        return len(self.stamps)

    @classmethod
    def from_poses(cls, poses):
        return cls([p.stamp for p in poses], [p.t for p in poses], [p.R for p in poses])

    def window(self, t0=-np.inf, t1=np.inf):
        m = (self.stamps >= t0) & (self.stamps <= t1)
        return Trajectory(self.stamps[m], self.positions[m], self.rotations[m])

    def transformed(self, R, t):
        return Trajectory(self.stamps, self.positions @ np.asarray(R).T + t, np.asarray(R) @ self.rotations)

    def interpolate(self, stamps):
        """Positions linearly, rotations by slerp; stamps must lie inside the span."""
        stamps = np.asarray(stamps, dtype=float)
        pos = np.stack([np.interp(stamps, self.stamps, self.positions[:, i]) for i in range(3)], axis=1)
        if len(self.stamps) == 1:
            rot = np.repeat(self.rotations, len(stamps), axis=0)
        else:
            rot = Slerp(self.stamps, Rotation.from_matrix(self.rotations))(stamps).as_matrix()
        return Trajectory(stamps, pos, rot)


def associate(estimate: Trajectory, ground_truth: Trajectory):
    """Estimate samples inside the GT span, with GT interpolated to them."""
    inside = (estimate.stamps >= ground_truth.stamps[0]) & (estimate.stamps <= ground_truth.stamps[-1])
    if inside.sum() < 2:
        raise InsufficientOverlap(f"{int(inside.sum())} overlapping stamps")
    est = Trajectory(estimate.stamps[inside], estimate.positions[inside], estimate.rotations[inside])
    return est, ground_truth.interpolate(est.stamps)


def umeyama(src, dst):
    """Rigid (R, t) minimizing sum |R src + t - dst|^2, no scale."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - cd).T @ (src - cs)
    U, _, Vt = np.linalg.svd(C)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    return R, cd - R @ cs


def umeyama_yaw(src, dst):
    res = align_yaw_translation(src, dst, min_spread=0.0)
    return res.transform.R, res.transform.t


def align(estimate: Trajectory, ground_truth: Trajectory, method="se3", fit=None):
    """Estimate mapped into the GT frame.

    ``fit`` optionally restricts the samples used to fit the transform to a
    (t0, t1) stamp window; the transform is applied to all samples.
    """
    est, gt = associate(estimate, ground_truth)
    m = np.ones(len(est), bool) if fit is None else (est.stamps >= fit[0]) & (est.stamps <= fit[1])
    if m.sum() < 2:
        raise InsufficientOverlap("fewer than two samples in the alignment window")
    solver = umeyama if method == "se3" else umeyama_yaw
    R, t = solver(est.positions[m], gt.positions[m])
    return est.transformed(R, t), gt


def errors(aligned: Trajectory, gt: Trajectory, mode):
    if mode == "3d":
        return np.linalg.norm(aligned.positions - gt.positions, axis=1)
    if mode == "2d":
        return np.linalg.norm(aligned.positions[:, :2] - gt.positions[:, :2], axis=1)
    if mode == "yaw":
        return se3.wrap_angle(se3.yaw_of(aligned.rotations) - se3.yaw_of(gt.rotations))
    raise ValueError(f"unknown ATE mode {mode!r}")


def ate(estimate: Trajectory, ground_truth: Trajectory, mode="3d", method="se3") -> float:
    """RMSE of position (2d/3d, m) or wrapped yaw (rad) after rigid alignment."""
    if mode not in MODES:
        raise ValueError(f"unknown ATE mode {mode!r}")
    aligned, gt = align(estimate, ground_truth, method)
    e = errors(aligned, gt, mode)
    return float(np.sqrt(np.mean(e**2)))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVariance("constant series")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def relative_position_errors(stamps, poses_R, poses_t, ground_truth: Trajectory):
    """Norm of each consecutive relative-translation error against GT."""
    gt = ground_truth.interpolate(stamps)
    RiT = np.swapaxes(poses_R[:-1], -1, -2)
    rel = np.einsum("nij,nj->ni", RiT, poses_t[1:] - poses_t[:-1])
    GiT = np.swapaxes(gt.rotations[:-1], -1, -2)
    rel_gt = np.einsum("nij,nj->ni", GiT, gt.positions[1:] - gt.positions[:-1])
    return np.linalg.norm(rel - rel_gt, axis=1)


def wasserstein_error_correlation(stamps, poses_R, poses_t, pos_covs, ground_truth: Trajectory):
    """Pearson r between per-step W2 of positional covariances and relative position error.

    Returns (r, w2 series, error series). Samples outside the GT span are ignored.
    """
    stamps = np.asarray(stamps, dtype=float)
    inside = (stamps >= ground_truth.stamps[0]) & (stamps <= ground_truth.stamps[-1])
    stamps, poses_R, poses_t = stamps[inside], np.asarray(poses_R)[inside], np.asarray(poses_t)[inside]
    pos_covs = np.asarray(pos_covs)[inside]
    if len(stamps) < 11:
        raise InsufficientOverlap(f"{max(len(stamps) - 1, 0)} relative-pose pairs, need >= 10")
    w2 = np.array([wasserstein2(a, b) for a, b in zip(pos_covs[:-1], pos_covs[1:])])
    err = relative_position_errors(stamps, poses_R, poses_t, ground_truth)
    return pearson(w2, err), w2, err


def directional_drift(estimate: Trajectory, ground_truth: Trajectory, other_gt: Trajectory,
                      t0, t1, fit_until) -> float:
    """RMS position error of ``estimate`` inside [t0, t1] along the horizontal
    direction perpendicular to the line towards the other robot.

    The estimate is aligned to GT on samples up to ``fit_until`` only, so error
    accumulated afterwards is not absorbed by the alignment.
    """
    aligned, gt = align(estimate, ground_truth, "se3", fit=(-np.inf, fit_until))
    m = (aligned.stamps >= t0) & (aligned.stamps <= t1)
    if m.sum() < 1:
        raise InsufficientOverlap("no estimate samples inside the drift window")
    other = other_gt.interpolate(aligned.stamps[m])
    base = other.positions[:, :2] - gt.positions[m, :2]
    perp = np.stack([-base[:, 1], base[:, 0]], axis=1)
    perp /= np.linalg.norm(perp, axis=1, keepdims=True)
    err = aligned.positions[m, :2] - gt.positions[m, :2]
    proj = np.sum(err * perp, axis=1)
    return float(np.sqrt(np.mean(proj**2)))
