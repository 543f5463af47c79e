"""Streaming estimator: replays odometry and detections through the graph.

Every detection ends in exactly one of three places: a detection factor on
the associated robot, an initialization buffer, or the association log with a
rejection reason.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import se3
from .assoc import associate
from .config import RunConfig
from .errors import NoBracketingVariables
from .factors import DetectionMeasurement, NoiseModel
from .graph import FactorGraph
from .initialization import (
    ANCHOR_COV,
    FIRST_POSE_COV,
    InitBuffer,
    first_pose_in_world,
    try_initialize,
)
from .se3 import Pose
from .sim import DetectionRecord, OdometryStream
from .streams import DET, ODOM, merged_events
from .weighting import LioHealth, VioSample, detection_noise, lio_noise, vio_noise, wasserstein2

log = logging.getLogger(__name__)


@dataclass
class Sample:
    pose: Pose
    stamp: float
    pos_cov: Optional[np.ndarray] = None
    min_eig: Optional[float] = None


@dataclass
class RobotTrack:
    id: str
    odometry: str
    detector: bool
    initialized: bool = False
    prev: Optional[Sample] = None
    local_stamps: List[float] = field(default_factory=list)
    local_poses: List[Pose] = field(default_factory=list)
    bound_track: Optional[int] = None

    def local_pose_at(self, stamp) -> Optional[Pose]:
        st = self.local_stamps
        if not st or stamp < st[0] or stamp > st[-1]:
            return None
        i = int(np.searchsorted(st, stamp, side="right")) - 1
        if i >= len(st) - 1:
            return self.local_poses[-1]
        tau = (stamp - st[i]) / (st[i + 1] - st[i])
        return se3.interpolate(self.local_poses[i], self.local_poses[i + 1], float(np.clip(tau, 0.0, 1.0)))


@dataclass
class EngineOutputs:
    smoothed: Dict[str, list] = field(default_factory=dict)
    online: Dict[str, list] = field(default_factory=dict)
    noise: list = field(default_factory=list)
    associations: list = field(default_factory=list)
    init_events: list = field(default_factory=list)
    solves: list = field(default_factory=list)


class Engine:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        w = cfg.weighting
        self.graph = FactorGraph(cfg.window_length, (w.sigma_roll, w.sigma_pitch), cfg.solver)
        self.det_noise = NoiseModel.from_covariance(detection_noise(w))
        self.buffers = InitBuffer(cfg.init.buffer_seconds)
        self.robots = {r.id: RobotTrack(r.id, r.odometry, r.role == "detector") for r in cfg.robots}
        self.detector = cfg.detector.id
        self.L_T_X0: Optional[Pose] = None
        self.pending: List[DetectionRecord] = []
        self.now = -np.inf
        self.out = EngineOutputs()
        for r in self.robots:
            self.out.smoothed[r] = []
            self.out.online[r] = []

    # ------------------------------------------------------------------ replay

    def run(self, odometry: Dict[str, OdometryStream], detections: List[DetectionRecord]) -> EngineOutputs:
        for rid in self.robots:
            if rid not in odometry:
                raise KeyError(f"no odometry stream for robot {rid}")
        for stamp, kind, robot, i in merged_events(odometry, detections):
            self.now = max(self.now, stamp)
            if kind == ODOM:
                s = odometry[robot]
                self.on_odometry(robot, Sample(
                    s.pose(i), stamp,
                    s.cov[i][3:6, 3:6] if s.cov is not None else None,
                    float(s.min_eig[i]) if s.min_eig is not None else None))
            else:
                self.pending.append(detections[i])
                self.flush_pending()
        self.flush_pending(final=True)
        self.finish()
        return self.out

    def finish(self):
        for key in self.graph.keys():
            p = self.graph.values[key]
            self.out.smoothed[key.robot].append((p.stamp, p))
        for r in self.out.smoothed:
            self.out.smoothed[r].sort(key=lambda x: x[0])

    # ---------------------------------------------------------------- odometry

    def _noise(self, track: RobotTrack, cur: Sample):
        prev = track.prev
        dt = cur.stamp - prev.stamp
        w = self.cfg.weighting_for(track.id)
        extra = {}
        if track.odometry == "lio":
            h0 = not LioHealth.from_min_eig(prev.min_eig, w).degenerate
            h1 = not LioHealth.from_min_eig(cur.min_eig, w).degenerate
            cov = lio_noise(h0, h1, dt, w)
            extra["degenerate"] = int(not (h0 and h1))
        else:
            cov = vio_noise(VioSample(prev.pose, prev.pos_cov, prev.stamp), VioSample(cur.pose, cur.pos_cov, cur.stamp), w)
            extra["w2"] = wasserstein2(prev.pos_cov, cur.pos_cov)
        sig = np.sqrt(np.diag(cov))
        self.out.noise.append((cur.stamp, track.id, track.odometry, *sig, extra.get("w2", np.nan),
                               extra.get("degenerate", 0)))
        return cov

    def on_odometry(self, robot, sample: Sample):
        track = self.robots[robot]
        if track.detector or not track.initialized:
            track.local_stamps.append(sample.stamp)
            track.local_poses.append(sample.pose)
            self._trim_local(track)
        if track.detector:
            if self.L_T_X0 is None:
                self.L_T_X0 = sample.pose
                self.graph.add_first(robot, Pose.identity(), sample.stamp, ANCHOR_COV)
                track.initialized = True
                track.prev = sample
                return
            self._insert(track, sample)
            return
        if not track.initialized:
            self.buffers.add_odometry(robot, sample.stamp, sample.pose)
            track.prev = sample
            self._try_init(track, sample)
            return
        self._insert(track, sample)

    def _trim_local(self, track):
        horizon = self.cfg.window_length + self.cfg.init.buffer_seconds + self.cfg.pending_timeout
        while track.local_stamps and track.local_stamps[0] < track.local_stamps[-1] - horizon:
            track.local_stamps.pop(0)
            track.local_poses.pop(0)

    def _insert(self, track: RobotTrack, sample: Sample):
        cov = self._noise(track, sample)
        rel = (track.prev.pose.inverse() @ sample.pose).with_stamp(sample.stamp)
        key = self.graph.add_odometry(track.id, rel, cov, source=track.odometry)
        track.prev = sample
        self.flush_pending()
        rep = self.graph.optimize()
        self.out.solves.append((sample.stamp, track.id, *rep.as_row()))
        p = self.graph.values[key]
        self.out.online[track.id].append((sample.stamp, p))
        self.graph.slide_window(sample.stamp)
        for k, pose in self.graph.pop_dropped():
            self.out.smoothed[k.robot].append((pose.stamp, pose))
        for rid in self.graph.pop_deactivated():
            t = self.robots[rid]
            log.warning("robot %s deactivated; waiting for re-initialization", rid)
            t.initialized = False
            t.bound_track = None
            t.local_stamps.clear()
            t.local_poses.clear()
            self.buffers.drop_robot(rid)
            self.out.init_events.append((sample.stamp, rid, -1, "deactivated", *[np.nan] * 7))

    # ---------------------------------------------------------- initialization

    def _try_init(self, track: RobotTrack, sample: Sample):
        if self.L_T_X0 is None:
            return
        bound = {t.bound_track for t in self.robots.values() if t.bound_track is not None}
        res, _ = try_initialize(track.id, self.buffers, self.cfg.init, self.cfg.weighting.sigma_det, bound)
        if res is None:
            return
        W_T_Y0 = first_pose_in_world(self.L_T_X0, res.L_T_V, sample.pose)
        self.graph.add_first(track.id, W_T_Y0, sample.stamp, FIRST_POSE_COV)
        track.initialized = True
        track.bound_track = res.track_id
        track.local_stamps.clear()
        track.local_poses.clear()
        self.buffers.drop_track(res.track_id)
        self.buffers.drop_robot(track.id)
        a = res.alignment
        self.out.init_events.append((sample.stamp, track.id, res.track_id, "initialized", a.theta,
                                     *a.transform.t, a.cost, a.n, a.spread))
        log.info("initialized %s from track %d (theta=%.3f, cost/pt=%.4f)", track.id, res.track_id,
                 a.theta, a.cost_per_point)

    # -------------------------------------------------------------- detections

    def _ready(self, det: DetectionRecord):
        x = self.robots[self.detector]
        if not x.local_stamps or x.local_stamps[-1] < det.stamp:
            return False
        for t in self.robots.values():
            if t.detector:
                continue
            latest = self.graph.latest_stamp(t.id) if t.initialized else (t.prev.stamp if t.prev else None)
            if latest is None or latest < det.stamp:
                return False
        return True

    def flush_pending(self, final=False):
        keep = []
        for det in self.pending:
            if final or self._ready(det) or self.now - det.stamp > self.cfg.pending_timeout:
                self._handle(det)
            else:
                keep.append(det)
        self.pending = keep

    def _log_assoc(self, det, decision, robot="", distance=np.nan, reason=""):
        self.out.associations.append((det.stamp, det.track_id, decision, robot, distance, reason))

    def _handle(self, det: DetectionRecord):
        x = self.detector
        meas = DetectionMeasurement(det.d, det.stamp, det.track_id)
        candidates = [t.id for t in self.robots.values() if t.initialized and not t.detector]
        try:
            self.graph.bracket(x, det.stamp)
        except NoBracketingVariables:
            self._log_assoc(det, "rejected", reason="detector has no poses around stamp")
            return
        res = associate(meas, x, candidates, self.graph, self.cfg.association)
        if res.robot is not None:
            self.graph.add_detection(meas, x, res.robot, self.det_noise)
            self._log_assoc(det, "associated", res.robot, res.distance)
            return
        uninit = [t for t in self.robots.values() if not t.detector and not t.initialized]
        bound = {t.bound_track for t in self.robots.values() if t.bound_track is not None}
        T_LX = self.robots[x].local_pose_at(det.stamp)
        if uninit and det.track_id not in bound and T_LX is not None:
            self.buffers.add_detection(det.track_id, det.stamp, T_LX @ det.d)
            self._log_assoc(det, "buffered", "", res.distance, "no robot within gate")
            return
        if not res.distances:
            reason = "no initialized robot brackets stamp"
        else:
            reason = f"nearest {min(res.distances, key=res.distances.get)} beyond gate"
        self._log_assoc(det, "rejected", "", res.distance, reason)
