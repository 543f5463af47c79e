"""Frame initialization of a detected robot from detections of it.

A detected robot's odometry positions (its V frame) are aligned to the
detector's detections of it, expressed in the detector's odometry frame L,
with a yaw+translation transform. The transform then places the robot's first
pose in the world frame, which coincides with the detector's first pose.
"""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import se3
from .errors import ConfigError, DegenerateSpread
from .se3 import Pose

ANCHOR_COV = np.diag([1e-6] * 6)
FIRST_POSE_COV = np.diag([1e-2, 1e-2, 0.1, 0.25, 0.25, 0.25])


@dataclass(frozen=True)
class InitConfig:
    min_spread: float = 1.0
    cost_sigma_multiple: float = 2.0
    min_correspondences: int = 10
    buffer_seconds: float = 10.0

    def __post_init__(self):
        if not self.min_spread > 0:
            raise ConfigError("init.min_spread must be > 0")
        if not self.cost_sigma_multiple > 0:
            raise ConfigError("init.cost_sigma_multiple must be > 0")
        if self.min_correspondences < 2:
            raise ConfigError("init.min_correspondences must be >= 2")
        if not self.buffer_seconds > 0:
            raise ConfigError("init.buffer_seconds must be > 0")

    def max_cost_per_point(self, sigma_det):
        return (self.cost_sigma_multiple * sigma_det) ** 2


@dataclass
class AlignmentResult:
    transform: Pose
    cost: float
    n: int
    spread: float
    accepted: bool = True

    @property
    def theta(self):
        return float(self.transform.yaw)

    @property
    def cost_per_point(self):
        return self.cost / self.n


def xy_spread(points) -> float:
    """Largest pairwise xy distance among the points."""
    p = np.asarray(points, dtype=float)[:, :2]
    p = p - p.mean(axis=0)
    diff = p[:, None, :] - p[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff**2, axis=-1))))


def align_yaw_translation(src, dst, min_spread=1.0, max_cost_per_point=None) -> AlignmentResult:
    """Least-squares ``dst ~ Rz(theta) src + t`` in closed form."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("src and dst must have equal length")
    if len(src) < 2:
        raise ValueError("need at least two correspondences")
    spread = xy_spread(src)
    if spread < min_spread:
        raise DegenerateSpread(f"xy spread {spread:.3f} m below {min_spread} m")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    p, q = src - cs, dst - cd
    s = np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0])
    c = np.sum(p[:, 0] * q[:, 0] + p[:, 1] * q[:, 1])
    theta = float(np.arctan2(s, c))
    R = se3.rot_z(theta)
    t = cd - R @ cs
    res = src @ R.T + t - dst
    cost = float(np.sum(res**2))
    accepted = True if max_cost_per_point is None else cost / len(src) < max_cost_per_point
    return AlignmentResult(Pose(R, t), cost, len(src), spread, accepted)


@dataclass
class InitBuffer:
    """Sliding buffers feeding initialization.

    ``tracks`` maps a detector track id to (stamp, detection position in L);
    ``odom`` maps a robot to (stamp, pose in its own odometry frame).
    """

    seconds: float = 10.0
    tracks: Dict[int, List[Tuple[float, np.ndarray]]] = field(default_factory=lambda: defaultdict(list))
    odom: Dict[str, List[Tuple[float, Pose]]] = field(default_factory=lambda: defaultdict(list))

    def add_detection(self, track_id, stamp, p_L):
        buf = self.tracks[track_id]
        bisect.insort(buf, (float(stamp), np.asarray(p_L, dtype=float)), key=lambda x: x[0])
        self._trim(buf)

    def add_odometry(self, robot, stamp, pose: Pose):
        buf = self.odom[robot]
        buf.append((float(stamp), pose))
        self._trim(buf)

    def _trim(self, buf):
        newest = buf[-1][0]
        while buf and buf[0][0] < newest - self.seconds:
            buf.pop(0)

    def drop_track(self, track_id):
        self.tracks.pop(track_id, None)

    def drop_robot(self, robot):
        self.odom.pop(robot, None)

    def correspondences(self, robot, track_id):
        """(V positions, L detections) at detection stamps inside the robot's odometry span."""
        odom = self.odom.get(robot) or []
        dets = self.tracks.get(track_id) or []
        if len(odom) < 2 or not dets:
            return np.zeros((0, 3)), np.zeros((0, 3))
        st = np.array([s for s, _ in odom])
        pos = np.stack([p.t for _, p in odom])
        ds = np.array([s for s, _ in dets])
        inside = (ds >= st[0]) & (ds <= st[-1])
        ds = ds[inside]
        src = np.stack([np.interp(ds, st, pos[:, i]) for i in range(3)], axis=1)
        dst = np.stack([p for (s, p), ok in zip(dets, inside) if ok]) if inside.any() else np.zeros((0, 3))
        return src, dst


@dataclass
class InitResult:
    robot: str
    track_id: int
    alignment: AlignmentResult
    L_T_V: Pose
    rejected: Dict[int, str] = field(default_factory=dict)


def try_initialize(robot, buffers: InitBuffer, cfg: InitConfig, sigma_det: float,
                   exclude_tracks=()) -> Tuple[Optional[InitResult], Dict[int, str]]:
    """Best accepted alignment of ``robot`` against any unbound track.

    Returns the result (or None) and a map of track id -> rejection reason.
    """
    best = None
    reasons = {}
    thr = cfg.max_cost_per_point(sigma_det)
    for tid in sorted(buffers.tracks):
        if tid in exclude_tracks:
            continue
        src, dst = buffers.correspondences(robot, tid)
        if len(src) < cfg.min_correspondences:
            reasons[tid] = f"{len(src)} correspondences"
            continue
        try:
            res = align_yaw_translation(src, dst, cfg.min_spread, thr)
        except DegenerateSpread as exc:
            reasons[tid] = f"spread: {exc}"
            continue
        if not res.accepted:
            reasons[tid] = f"cost/point {res.cost_per_point:.4f} >= {thr:.4f}"
            continue
        if best is None or res.cost_per_point < best.alignment.cost_per_point:
            best = InitResult(robot, tid, res, res.transform)
    return best, reasons


def first_pose_in_world(L_T_X0: Pose, L_T_V: Pose, V_T_Y0: Pose) -> Pose:
    """World pose of the detected robot's first variable; world = detector's first pose."""
    return L_T_X0.inverse() @ L_T_V @ V_T_Y0
