"""Rank and nullspace analysis of the two-pose-per-robot cooperative graph.

The stacked Jacobian is assembled from the factor classes themselves, at
yaw-only poses with measurements consistent with them (zero residual) and
detections synchronized with the odometry variables (tau = 0 or 1).
Columns are ordered (X1, X2, Y1, Y2[, Z1, Z2]), six per pose, rotation first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import subspace_angles

from .errors import ConfigError
from .factors import (
    DetectionFactor,
    DetectionMeasurement,
    NoiseModel,
    RelativePoseFactor,
    Se3PriorFactor,
    TiltPriorFactor,
    VariableKey,
)
from .se3 import Pose

RANK_RTOL = 1e-12
MIN_SEPARATION = 0.1

# scenario -> (factor blocks, expected rank)
SCENARIOS = {
    "full": (("lio", "vio", "det1", "det2", "prior_x", "tilt"), 24),
    "no-prior": (("lio", "vio", "det1", "det2", "tilt"), 20),
    "no-tilt": (("lio", "vio", "det1", "det2", "prior_x"), 23),
    "no-move": (("lio", "vio", "det1", "det2", "prior_x", "tilt"), 23),
    "lio-deg": (("vio", "det1", "det2", "prior_x", "prior_y", "tilt"), 23),
    "lio-deg+Z": (("vio", "det1", "det2", "prior_x", "prior_y", "tilt",
                   "vio_z", "det3", "det4", "prior_z", "tilt_z"), 36),
    "vio-deg": (("lio", "det1", "det2", "prior_x", "prior_y", "tilt"), 23),
}
SCENARIO_ORDER = tuple(SCENARIOS)

_NAMES = ("X1", "X2", "Y1", "Y2", "Z1", "Z2")
_NOISE6 = NoiseModel(np.eye(6))
_NOISE3 = NoiseModel(np.eye(3))
_NOISE2 = NoiseModel(np.eye(2))


@dataclass
class ScenarioSpec:
    scenario: str
    poses: Dict[str, Pose]

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown observability scenario {self.scenario!r}")
        need = _NAMES[:6] if self.has_z else _NAMES[:4]
        missing = [n for n in need if n not in self.poses]
        if missing:
            raise ConfigError(f"scenario {self.scenario}: missing poses {missing}")
        if self.scenario == "no-move":
            y1 = self.poses["Y1"]
            self.poses = dict(self.poses, Y2=Pose(y1.R, y1.t))
        self.validate()

    @property
    def has_z(self):
        return self.scenario == "lio-deg+Z"

    @property
    def names(self):
        return _NAMES[:6] if self.has_z else _NAMES[:4]

    def validate(self):
        for n in self.names:
            R = self.poses[n].R
            if abs(R[2, 2] - 1.0) > 1e-12:
                raise ConfigError(f"pose {n} is not yaw-only")
        pairs = [(a, b) for a in ("X1", "X2") for b in self.names if b[0] != "X"]
        if self.scenario != "no-move":
            pairs.append(("Y1", "Y2"))
        if self.has_z:
            pairs.append(("Z1", "Z2"))
        for a, b in pairs:
            dist = np.linalg.norm(self.poses[a].t - self.poses[b].t)
            if dist < MIN_SEPARATION:
                raise ConfigError(f"poses {a} and {b} are {dist:.3g} m apart; need a generic configuration")


def _key(name):
    return VariableKey(name[0], int(name[1]))


def _det(x1, x2, y1, y2, tau, poses):
    Tx = poses[x1] if tau == 0.0 else poses[x2]
    Ty = poses[y1] if tau == 0.0 else poses[y2]
    d = Tx.R.T @ (Ty.t - Tx.t)
    f = DetectionFactor(tuple(_key(n) for n in (x1, x2, y1, y2)), _NOISE3,
                        measurement=DetectionMeasurement(d, 0.0, 0), tau_x=tau, tau_y=tau)
    return f, (x1, x2, y1, y2)


def _rel(a, b, poses, source):
    meas = poses[a].inverse() @ poses[b]
    return RelativePoseFactor((_key(a), _key(b)), _NOISE6, measured=meas, source=source), (a, b)


def _prior(a, poses):
    return Se3PriorFactor((_key(a),), _NOISE6, prior=poses[a]), (a,)


def _factors(block, poses):
    if block == "lio":
        return [_rel("X1", "X2", poses, "lio")]
    if block == "vio":
        return [_rel("Y1", "Y2", poses, "vio")]
    if block == "vio_z":
        return [_rel("Z1", "Z2", poses, "vio")]
    if block == "det1":
        return [_det("X1", "X2", "Y1", "Y2", 0.0, poses)]
    if block == "det2":
        return [_det("X1", "X2", "Y1", "Y2", 1.0, poses)]
    if block == "det3":
        return [_det("X1", "X2", "Z1", "Z2", 0.0, poses)]
    if block == "det4":
        return [_det("X1", "X2", "Z1", "Z2", 1.0, poses)]
    if block == "prior_x":
        return [_prior("X1", poses)]
    if block == "prior_y":
        return [_prior("Y1", poses)]
    if block == "prior_z":
        return [_prior("Z1", poses)]
    if block == "tilt":
        return [(TiltPriorFactor((_key(n),), _NOISE2), (n,)) for n in ("X1", "X2", "Y1", "Y2")]
    if block == "tilt_z":
        return [(TiltPriorFactor((_key(n),), _NOISE2), (n,)) for n in ("Z1", "Z2")]
    raise ValueError(block)


def build_stacked_jacobian(spec: ScenarioSpec) -> np.ndarray:
    col = {n: 6 * i for i, n in enumerate(spec.names)}
    rows = []
    for block in SCENARIOS[spec.scenario][0]:
        for factor, names in _factors(block, spec.poses):
            ev = factor.evaluate([spec.poses[n] for n in names])
            if np.max(np.abs(ev.error)) > 1e-9:
                raise AssertionError(f"{block}: measurement inconsistent with poses")
            block_rows = np.zeros((ev.error.size, 6 * len(spec.names)))
            for n, J in zip(names, ev.jacobians):
                block_rows[:, col[n]:col[n] + 6] += J
            rows.append(block_rows)
    return np.vstack(rows)


def analytic_nullspace(spec: ScenarioSpec) -> np.ndarray:
    """Columns spanning the expected unobservable directions (may be empty)."""
    p = spec.poses
    n = 6 * len(spec.names)
    z = np.array([0.0, 0.0, 1.0])
    if spec.scenario == "no-prior":
        vecs = []
        for a in np.eye(3):
            v = np.zeros(n)
            for i, name in enumerate(spec.names):
                v[6 * i + 3:6 * i + 6] = p[name].R.T @ a
            vecs.append(v)
        v = np.zeros(n)
        for i, name in enumerate(spec.names):
            R, t = p[name].R, p[name].t
            v[6 * i:6 * i + 3] = R.T @ z
            v[6 * i + 3:6 * i + 6] = -R.T @ np.cross(t, z)
        vecs.append(v)
        return np.stack(vecs, axis=1)
    v = np.zeros(n)
    if spec.scenario == "no-tilt":
        b = p["Y1"].t - p["Y2"].t
        v[12:15] = p["Y1"].R.T @ b
        v[18:21] = p["Y2"].R.T @ b
    elif spec.scenario == "no-move":
        v[14] = v[20] = 1.0
    elif spec.scenario == "lio-deg":
        w = p["X2"].R.T @ (p["Y2"].t - p["X2"].t)
        v[8] = 1.0
        v[9], v[10] = w[1], -w[0]
    elif spec.scenario == "vio-deg":
        v[20] = 1.0
    else:
        return np.zeros((n, 0))
    return v[:, None]


LABELS = {
    "full": "",
    "no-prior": "global translation + yaw",
    "no-tilt": "Y rotation about its baseline",
    "no-move": "common yaw of Y1/Y2",
    "lio-deg": "X2 yaw coupled with perpendicular translation",
    "lio-deg+Z": "",
    "vio-deg": "yaw of Y2",
}


@dataclass
class ObservabilityReport:
    scenario: str
    shape: tuple
    rank: int
    expected_rank: int
    singular_values: np.ndarray
    nullspace: np.ndarray
    analytic: np.ndarray
    max_angle: float
    label: str = ""

    @property
    def nullity(self):
        return self.shape[1] - self.rank

    @property
    def ok(self):
        return self.rank == self.expected_rank and self.max_angle <= 1e-6


def analyze(spec: ScenarioSpec) -> ObservabilityReport:
    J = build_stacked_jacobian(spec)
    _, s, Vt = np.linalg.svd(J)
    tol = max(J.shape) * s[0] * RANK_RTOL
    rank = int(np.sum(s > tol))
    null = Vt[rank:].T
    expected = analytic_nullspace(spec)
    if null.shape[1] == expected.shape[1] == 0:
        angle = 0.0
    elif null.shape[1] == expected.shape[1]:
        angle = float(np.max(subspace_angles(null, expected)))
    else:
        angle = float("inf")
    return ObservabilityReport(spec.scenario, J.shape, rank, SCENARIOS[spec.scenario][1], s, null,
                               expected, angle, LABELS[spec.scenario])


def random_poses(rng: np.random.Generator, extent=5.0) -> Dict[str, Pose]:
    """Generic yaw-only poses for all six names."""
    while True:
        poses = {n: Pose.from_yaw(rng.uniform(-np.pi, np.pi), rng.uniform(-extent, extent, 3)) for n in _NAMES}
        t = np.stack([q.t for q in poses.values()])
        gaps = np.linalg.norm(t[:, None] - t[None], axis=-1)[np.triu_indices(6, 1)]
        if gaps.min() > 5 * MIN_SEPARATION:
            return poses


def run_all(poses: Dict[str, Pose], scenarios: Sequence[str] = SCENARIO_ORDER) -> List[ObservabilityReport]:
    return [analyze(ScenarioSpec(name, poses)) for name in scenarios]


def poses_from_config(doc: dict) -> Dict[str, Pose]:
    """``{"X1": {"yaw": .., "t": [x, y, z]}, ...}`` -> poses."""
    out = {}
    for name, entry in doc.items():
        if name not in _NAMES:
            raise ConfigError(f"unknown pose name {name!r}")
        if not isinstance(entry, dict) or set(entry) - {"yaw", "t"}:
            raise ConfigError(f"pose {name}: expected keys 'yaw' and 't'")
        try:
            t = np.asarray(entry.get("t", [0, 0, 0]), dtype=float).reshape(3)
            out[name] = Pose.from_yaw(float(entry.get("yaw", 0.0)), t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"pose {name}: {exc}") from None
    return out
