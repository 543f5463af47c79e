"""Synthetic multi-robot scenarios: ground truth, odometry streams, detections.

Every random stream draws from its own generator seeded by
``(seed, crc32(name), stream code)``, so adding a robot to a scenario leaves
the streams of the other robots unchanged.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import se3
from .config import check_keys, check_schema, number
from .errors import ConfigError
from .evaluation import Trajectory
from .se3 import Pose

KINDS = ("circle", "figure-eight", "line", "static")
DEGRADATIONS = ("lio_degenerate", "vio_blackout", "vio_yaw_drift")

_STREAM_TIMES, _STREAM_NOISE, _STREAM_COV, _STREAM_DET, _STREAM_FP, _STREAM_FRAME = range(6)


def _rng(seed, name, code):
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), code])


# ------------------------------------------------------------------ trajectory

@dataclass(frozen=True)
class TrajectoryModel:
    kind: str
    center: tuple = (0.0, 0.0, 1.5)
    radius: float = 3.0
    period: float = 30.0
    z_amplitude: float = 0.0
    a: float = 3.0
    b: float = 2.0
    start: tuple = (0.0, 0.0, 1.5)
    end: tuple = (3.0, 0.0, 1.5)
    duration: float = 10.0
    t_begin: float = 0.0
    phase: float = 0.0
    yaw: str = "tangent"
    yaw0: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"trajectory kind must be one of {KINDS}")
        if self.yaw not in ("tangent", "fixed"):
            raise ConfigError("trajectory yaw must be 'tangent' or 'fixed'")
        if self.yaw == "tangent" and self.kind in ("line", "static"):
            raise ConfigError(f"tangent yaw is undefined for a {self.kind} trajectory; use 'fixed'")
        if self.period <= 0 or self.duration <= 0:
            raise ConfigError("trajectory period/duration must be > 0")

    def position(self, t):
        t = np.asarray(t, dtype=float)
        c = np.asarray(self.center, dtype=float)
        if self.kind == "circle":
            s = 2 * np.pi * t / self.period + self.phase
            return np.stack([c[0] + self.radius * np.cos(s), c[1] + self.radius * np.sin(s),
                             c[2] + self.z_amplitude * np.sin(2 * s)], axis=-1)
        if self.kind == "figure-eight":
            s = 2 * np.pi * t / self.period + self.phase
            return np.stack([c[0] + self.a * np.sin(s), c[1] + self.b * np.sin(s) * np.cos(s),
                             c[2] + self.z_amplitude * np.sin(s)], axis=-1)
        if self.kind == "line":
            u = np.clip((t - self.t_begin) / self.duration, 0.0, 1.0)
            w = 0.5 * (1 - np.cos(np.pi * u))
            p0, p1 = np.asarray(self.start, float), np.asarray(self.end, float)
            return p0 + w[..., None] * (p1 - p0)
        return np.broadcast_to(c, t.shape + (3,)).copy()

    def yaw_at(self, t):
        t = np.asarray(t, dtype=float)
        if self.yaw == "fixed":
            return self.yaw0 + self.yaw_rate * t
        h = 1e-4
        v = self.position(t + h) - self.position(t - h)
        return np.arctan2(v[..., 1], v[..., 0]) + self.yaw0

    def poses(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p = self.position(t)
        yaw = self.yaw_at(t)
        R = np.zeros(t.shape + (3, 3))
        c, s = np.cos(yaw), np.sin(yaw)
        R[..., 0, 0], R[..., 0, 1], R[..., 1, 0], R[..., 1, 1], R[..., 2, 2] = c, -s, s, c, 1.0
        return R, p


# -------------------------------------------------------------------- configs

@dataclass(frozen=True)
class Degradation:
    robot: str
    kind: str
    t_start: float
    t_end: float
    rate: float = 0.0

    def active(self, t):
        return self.t_start <= t <= self.t_end


@dataclass(frozen=True)
class SensorConfig:
    odom_rate: float = 2.0
    det_rate: float = 10.0
    gt_rate: float = 50.0
    jitter: float = 0.1
    lio_sigma_yaw: float = 0.002
    lio_sigma_pos: float = 0.01
    lio_min_eig_healthy: float = 1500.0
    lio_min_eig_degenerate: float = 150.0
    lio_degenerate_sigma_yaw: float = 0.02
    lio_degenerate_sigma_pos: float = 0.15
    lio_degenerate_drift: float = 0.3
    lio_degenerate_yaw_bias: float = 0.02
    vio_sigma_yaw: float = 0.003
    vio_sigma_pos: float = 0.01
    vio_cov_s0: float = 0.0025
    vio_cov_q: float = 7.5e-6
    vio_cov_reset_rate: float = 0.05
    vio_cov_reset_keep: float = 0.2
    vio_cov_blackout_factor: float = 100.0
    vio_cov_recovery_rate: float = 0.25
    vio_error_gain: float = 30.0
    vio_error_bias: float = 1.5
    det_sigma: float = 0.05
    det_max_range: float = 30.0
    fp_rate: float = 0.2
    fp_lifetime: float = 2.0
    fp_range: float = 8.0

    def __post_init__(self):
        for k in ("odom_rate", "det_rate", "gt_rate"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"sensors.{k} must be > 0")
        if not 0 <= self.jitter <= 0.1:
            raise ConfigError("sensors.jitter must lie in [0, 0.1]")
        if self.lio_min_eig_degenerate >= 430.0 or self.lio_min_eig_healthy < 430.0:
            raise ConfigError("sensors: degenerate min_eig must be < 430 and healthy >= 430")
        for f in self.__dataclass_fields__:
            if getattr(self, f) < 0:
                raise ConfigError(f"sensors.{f} must be >= 0")


@dataclass(frozen=True)
class RobotModel:
    id: str
    role: str
    odometry: str
    trajectory: TrajectoryModel
    mu: Optional[float] = None


@dataclass
class Scenario:
    name: str
    seed: int
    duration: float
    robots: List[RobotModel]
    sensors: SensorConfig = field(default_factory=SensorConfig)
    degradations: List[Degradation] = field(default_factory=list)

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigError("duration must be > 0")
        ids = [r.id for r in self.robots]
        if len(set(ids)) != len(ids):
            raise ConfigError("robot ids must be unique")
        if sum(r.role == "detector" for r in self.robots) != 1:
            raise ConfigError("exactly one robot must be the detector")
        seen = {}
        for d in self.degradations:
            if d.robot not in ids:
                raise ConfigError(f"degradation for unknown robot {d.robot!r}")
            if d.kind not in DEGRADATIONS:
                raise ConfigError(f"degradation kind must be one of {DEGRADATIONS}")
            if not d.t_end > d.t_start:
                raise ConfigError("degradation t_end must exceed t_start")
            for other in seen.get((d.robot, d.kind), []):
                if d.t_start <= other.t_end and other.t_start <= d.t_end:
                    raise ConfigError(f"overlapping {d.kind} windows for robot {d.robot}")
            seen.setdefault((d.robot, d.kind), []).append(d)

    @property
    def detector(self):
        return next(r for r in self.robots if r.role == "detector")

    def active(self, robot, kind, t):
        return [d for d in self.degradations if d.robot == robot and d.kind == kind and d.active(t)]

    def run_config_dict(self):
        """Matching run-configuration document for this scenario."""
        robots = []
        for r in self.robots:
            entry = {"id": r.id, "role": r.role, "odometry": r.odometry}
            if r.mu is not None:
                entry["mu"] = r.mu
            robots.append(entry)
        return {"schema_version": 1, "robots": robots}

    @classmethod
    def from_dict(cls, doc, ctx="scenario"):
        check_keys(doc, {"schema_version", "name", "seed", "duration", "robots", "sensors", "degradations"},
                   ctx, required=("schema_version", "name", "seed", "duration", "robots"))
        check_schema(doc, ctx)
        if isinstance(doc["seed"], bool) or not isinstance(doc["seed"], int) or doc["seed"] < 0:
            raise ConfigError(f"{ctx}.seed: expected a non-negative integer")
        robots = []
        for i, r in enumerate(doc["robots"] if isinstance(doc["robots"], list) else []):
            rc = f"{ctx}.robots[{i}]"
            check_keys(r, {"id", "role", "odometry", "trajectory", "mu"}, rc,
                       required=("id", "role", "odometry", "trajectory"))
            if r["role"] not in ("detector", "detected") or r["odometry"] not in ("lio", "vio"):
                raise ConfigError(f"{rc}: bad role or odometry kind")
            if not isinstance(r["id"], str) or not r["id"].isidentifier():
                raise ConfigError(f"{rc}.id: expected an identifier string")
            robots.append(RobotModel(r["id"], r["role"], r["odometry"], _trajectory(r["trajectory"], rc),
                                     number(r["mu"], f"{rc}.mu", positive=True) if "mu" in r else None))
        sensors = doc.get("sensors") or {}
        check_keys(sensors, SensorConfig.__dataclass_fields__, f"{ctx}.sensors")
        sensors = SensorConfig(**{k: number(v, f"{ctx}.sensors.{k}") for k, v in sensors.items()})
        degs = []
        for i, d in enumerate(doc.get("degradations") or []):
            dc = f"{ctx}.degradations[{i}]"
            check_keys(d, {"robot", "kind", "t_start", "t_end", "rate"}, dc, required=("robot", "kind", "t_start", "t_end"))
            degs.append(Degradation(d["robot"], d["kind"], number(d["t_start"], dc), number(d["t_end"], dc),
                                    number(d.get("rate", 0.0), dc)))
        return cls(str(doc["name"]), doc["seed"], number(doc["duration"], f"{ctx}.duration", positive=True),
                   robots, sensors, degs)


def _trajectory(doc, ctx):
    allowed = TrajectoryModel.__dataclass_fields__
    check_keys(doc, allowed, f"{ctx}.trajectory", required=("kind",))
    kw = {}
    for k, v in doc.items():
        if k in ("kind", "yaw"):
            kw[k] = v
        elif k in ("center", "start", "end"):
            if not isinstance(v, list) or len(v) != 3:
                raise ConfigError(f"{ctx}.trajectory.{k}: expected [x, y, z]")
            kw[k] = tuple(number(x, f"{ctx}.trajectory.{k}") for x in v)
        else:
            kw[k] = number(v, f"{ctx}.trajectory.{k}")
    return TrajectoryModel(**kw)


# -------------------------------------------------------------------- streams

@dataclass
class OdometryStream:
    robot: str
    kind: str
    stamps: np.ndarray
    R: np.ndarray
    t: np.ndarray
    cov: Optional[np.ndarray] = None
    min_eig: Optional[np.ndarray] = None

    def pose(self, i) -> Pose:
        return Pose(self.R[i], self.t[i], self.stamps[i])


@dataclass
class DetectionRecord:
    stamp: float
    track_id: int
    d: np.ndarray
    target: Optional[str] = None


@dataclass
class Streams:
    scenario: Scenario
    odometry: Dict[str, OdometryStream]
    detections: List[DetectionRecord]
    ground_truth: Dict[str, Trajectory]
    frames: Dict[str, Pose]


def _stamps(rng, rate, jitter, t_end):
    period = 1.0 / rate
    base = rng.uniform(0.0, period) + period * np.arange(int(np.floor(t_end * rate)) + 1)
    base = base + rng.uniform(-jitter, jitter, base.shape) * period
    return base[(base > 0) & (base < t_end)]


def _integrate(R0, t0, Rrel, trel):
    n = len(Rrel) + 1
    R = np.empty((n, 3, 3))
    t = np.empty((n, 3))
    R[0], t[0] = R0, t0
    for k in range(1, n):
        R[k] = R[k - 1] @ Rrel[k - 1]
        t[k] = t[k - 1] + R[k - 1] @ trel[k - 1]
    return R, t


def _relative(R, t):
    Ra, ta = se3.inverse_rt(R[:-1], t[:-1])
    return se3.compose_rt(Ra, ta, R[1:], t[1:])


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def _lio_stream(sc: Scenario, robot: RobotModel, zero_noise=False) -> OdometryStream:
    s = sc.sensors
    stamps = _stamps(_rng(sc.seed, robot.id, _STREAM_TIMES), s.odom_rate, s.jitter, sc.duration)
    Rg, tg = robot.trajectory.poses(stamps)
    Rrel, trel = _relative(Rg, tg)
    rng = _rng(sc.seed, robot.id, _STREAM_NOISE)
    n = len(Rrel)
    dt = np.diff(stamps)
    degen = np.array([bool(sc.active(robot.id, "lio_degenerate", x)) for x in stamps])
    xi = np.zeros((n, 6))
    z = rng.normal(0.0, 1.0, (n, 4))
    heading = rng.uniform(-np.pi, np.pi)
    if not zero_noise:
        xi[:, 2] = z[:, 0] * s.lio_sigma_yaw
        xi[:, 3:6] = z[:, 1:4] * s.lio_sigma_pos
        bad = degen[1:] | degen[:-1]
        zb = rng.normal(0.0, 1.0, (n, 3))
        xi[bad, 2] += zb[bad, 0] * s.lio_degenerate_sigma_yaw + s.lio_degenerate_yaw_bias * dt[bad]
        xi[bad, 3:5] += zb[bad, 1:3] * s.lio_degenerate_sigma_pos
        # drift along a fixed world direction, expressed in the body frame
        drift_w = s.lio_degenerate_drift * np.array([np.cos(heading), np.sin(heading), 0.0])
        body = np.einsum("nji,j->ni", Rg[:-1][bad], drift_w)
        xi[bad, 3:6] += body * dt[bad, None]
    Rn, tn = se3.exp_rt(xi)
    Rm, tm = se3.compose_rt(Rrel, trel, Rn, tn)
    R, t = _integrate(np.eye(3), np.zeros(3), Rm, tm)
    R = _orthonormalize(R)
    min_eig = np.where(degen, s.lio_min_eig_degenerate, s.lio_min_eig_healthy)
    jig = rng.uniform(0.9, 1.0, len(stamps))
    min_eig = np.where(degen, min_eig * jig, min_eig / jig)
    return OdometryStream(robot.id, "lio", stamps, R, t, None, min_eig)


def _vio_stream(sc: Scenario, robot: RobotModel, offset: Pose, zero_noise=False) -> OdometryStream:
    s = sc.sensors
    stamps = _stamps(_rng(sc.seed, robot.id, _STREAM_TIMES), s.odom_rate, s.jitter, sc.duration)
    Rg, tg = robot.trajectory.poses(stamps)
    Rrel, trel = _relative(Rg, tg)
    n = len(Rrel)
    dt = np.diff(stamps)
    crng = _rng(sc.seed, robot.id, _STREAM_COV)
    blackout = np.array([bool(sc.active(robot.id, "vio_blackout", x)) for x in stamps])
    # random walk with partial resets; inflated growth in blackout, then a
    # gradual relaxation back to s0 once features are reacquired
    var = np.empty(len(stamps))
    var[0] = s.vio_cov_s0
    recovering = False
    for k in range(1, len(stamps)):
        h = dt[k - 1]
        reset = crng.uniform() < 1.0 - np.exp(-s.vio_cov_reset_rate * h)
        if blackout[k]:
            v = var[k - 1] + s.vio_cov_q * s.vio_cov_blackout_factor * h
            recovering = True
        elif recovering:
            v = s.vio_cov_s0 + (var[k - 1] - s.vio_cov_s0) * np.exp(-s.vio_cov_recovery_rate * h)
            recovering = v - s.vio_cov_s0 > 0.01 * s.vio_cov_s0
        else:
            v = var[k - 1] + s.vio_cov_q * h
            if reset:
                v = s.vio_cov_s0 + s.vio_cov_reset_keep * (v - s.vio_cov_s0)
        var[k] = v
    cov = np.zeros((len(stamps), 6, 6))
    cov[:, 3, 3] = cov[:, 4, 4] = cov[:, 5, 5] = var
    rng = _rng(sc.seed, robot.id, _STREAM_NOISE)
    xi = np.zeros((n, 6))
    z = rng.normal(0.0, 1.0, (n, 7))
    if not zero_noise:
        w2 = np.sqrt(3.0) * np.abs(np.sqrt(var[1:]) - np.sqrt(var[:-1]))
        # error scale follows W2 of consecutive covariances, partly along a
        # fixed world direction so that it accumulates into drift
        heading = rng.uniform(-np.pi, np.pi)
        u = np.einsum("nji,j->ni", Rg[:-1], np.array([np.cos(heading), np.sin(heading), 0.0]))
        coupled = s.vio_error_gain * w2
        xi[:, 2] = z[:, 0] * s.vio_sigma_yaw * np.sqrt(dt)
        xi[:, 3:6] = z[:, 1:4] * (s.vio_sigma_pos * np.sqrt(dt))[:, None]
        xi[:, 3:6] += coupled[:, None] * (z[:, 4:7] + s.vio_error_bias * u)
        for d in sc.degradations:
            if d.robot == robot.id and d.kind == "vio_yaw_drift":
                m = np.array([d.active(x) for x in stamps[1:]])
                xi[m, 2] += d.rate * dt[m]
    Rn, tn = se3.exp_rt(xi)
    Rm, tm = se3.compose_rt(Rrel, trel, Rn, tn)
    R0, t0 = se3.compose_rt(offset.R, offset.t, Rg[0], tg[0])
    R, t = _integrate(R0, t0, Rm, tm)
    R = _orthonormalize(R)
    return OdometryStream(robot.id, "vio", stamps, R, t, cov, None)


def _detections(sc: Scenario, zero_noise=False) -> List[DetectionRecord]:
    s = sc.sensors
    det = sc.detector
    stamps = _stamps(_rng(sc.seed, det.id + ":det", _STREAM_TIMES), s.det_rate, s.jitter, sc.duration)
    Rx, tx = det.trajectory.poses(stamps)
    out = []
    targets = [r for r in sc.robots if r.role == "detected"]
    for i, robot in enumerate(targets):
        rng = _rng(sc.seed, det.id + ">" + robot.id, _STREAM_DET)
        _, ty = robot.trajectory.poses(stamps)
        d = np.einsum("nji,nj->ni", Rx, ty - tx)
        noise = rng.normal(0.0, 1.0, d.shape) * (0.0 if zero_noise else s.det_sigma)
        for k in range(len(stamps)):
            if np.linalg.norm(d[k]) <= s.det_max_range:
                out.append(DetectionRecord(float(stamps[k]), i + 1, d[k] + noise[k], robot.id))
    if s.fp_rate > 0 and not zero_noise:
        rng = _rng(sc.seed, det.id, _STREAM_FP)
        t = 0.0
        tid = 100
        while True:
            t += rng.exponential(1.0 / s.fp_rate)
            if t >= sc.duration:
                break
            life = rng.uniform(0.5, 1.5) * s.fp_lifetime
            m = (stamps >= t) & (stamps <= t + life)
            if m.any():
                k0 = np.argmax(m)
                ang = rng.uniform(-np.pi, np.pi)
                rad = rng.uniform(1.0, s.fp_range)
                p0 = tx[k0] + np.array([rad * np.cos(ang), rad * np.sin(ang), rng.uniform(-1.0, 1.0)])
                steps = rng.normal(0.0, 0.05, (int(m.sum()), 3))
                path = p0 + np.cumsum(steps, axis=0)
                for j, k in enumerate(np.flatnonzero(m)):
                    out.append(DetectionRecord(float(stamps[k]), tid, Rx[k].T @ (path[j] - tx[k]), None))
            tid += 1
    out.sort(key=lambda r: (r.stamp, r.track_id))
    return out


def _frame_offset(sc: Scenario, robot: RobotModel) -> Pose:
    rng = _rng(sc.seed, robot.id, _STREAM_FRAME)
    return Pose.from_yaw(rng.uniform(-np.pi, np.pi), np.append(rng.uniform(-5.0, 5.0, 2), 0.0))


def generate(sc: Scenario, zero_noise=False) -> Streams:
    """All streams of a scenario.

    ``frames[robot]`` is the hidden pose of the world frame in the robot's
    odometry frame: ``frames[r] @ gt(t)`` is the noise-free odometry pose.
    """
    s = sc.sensors
    odom, frames, gt = {}, {}, {}
    gstamps = np.arange(int(np.floor(sc.duration * s.gt_rate)) + 1) / s.gt_rate
    for robot in sc.robots:
        R, t = robot.trajectory.poses(gstamps)
        gt[robot.id] = Trajectory(gstamps, t, R)
        if robot.odometry == "lio":
            stream = _lio_stream(sc, robot, zero_noise)
            Rg, tg = robot.trajectory.poses(stream.stamps[:1])
            frames[robot.id] = Pose(Rg[0], tg[0]).inverse()
        else:
            frames[robot.id] = _frame_offset(sc, robot)
            stream = _vio_stream(sc, robot, frames[robot.id], zero_noise)
        odom[robot.id] = stream
    return Streams(sc, odom, _detections(sc, zero_noise), gt, frames)
