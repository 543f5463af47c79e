"""CSV stream formats and the stamp-ordered merge of input streams.

Floats are written with 17 significant digits so files round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
from pathlib import Path
from typing import Dict, Iterator, List

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DataError
from .evaluation import Trajectory
from .se3 import Pose
from .sim import DetectionRecord, OdometryStream

POSE_COLS = ["stamp_s", "qw", "qx", "qy", "qz", "tx", "ty", "tz"]
COV_COLS = [f"c{i}{j}" for i in range(6) for j in range(6)]
ODOM_COLS = POSE_COLS + COV_COLS + ["min_eig"]
DET_COLS = ["stamp_s", "track_id", "dx", "dy", "dz"]


def fmt(x) -> str:
    return format(float(x), ".17g")


def quat_rows(R) -> np.ndarray:
    """(qw, qx, qy, qz) rows with qw >= 0 for a stack of rotations."""
    return np.stack([Pose(r, np.zeros(3)).quaternion() for r in R]) if len(R) else np.zeros((0, 4))


def rotations(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1, 4)
    n = np.linalg.norm(q, axis=1)
    if np.any(np.abs(n - 1.0) > 1e-6):
        raise DataError("quaternion not unit length")
    return Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()


def _write(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _read(path, header):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != header:
        raise DataError(f"{path}: header must be {','.join(header)}")
    out = []
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{ln}: expected {len(header)} fields, got {len(row)}")
        out.append(row)
    return out


def _floats(row, path, ln, allow_empty=False):
    vals = []
    for x in row:
        if x == "" and allow_empty:
            vals.append(np.nan)
            continue
        try:
            v = float(x)
        except ValueError:
            raise DataError(f"{path}:{ln}: not a number: {x!r}") from None
        if not np.isfinite(v):
            raise DataError(f"{path}:{ln}: non-finite value")
        vals.append(v)
    return vals


# ----------------------------------------------------------------- trajectories

def write_trajectory(path, stamps, R, t):
    q = quat_rows(R)
    rows = [[fmt(s), *map(fmt, qq), *map(fmt, tt)] for s, qq, tt in zip(stamps, q, t)]
    _write(path, POSE_COLS, rows)


def read_trajectory(path) -> Trajectory:
    rows = _read(path, POSE_COLS)
    vals = np.array([_floats(r, path, i + 2) for i, r in enumerate(rows)]).reshape(-1, 8)
    vals = vals[np.argsort(vals[:, 0], kind="stable")]
    if np.any(np.diff(vals[:, 0]) <= 0):
        raise DataError(f"{path}: duplicate stamps")
    return Trajectory(vals[:, 0], vals[:, 5:8], rotations(vals[:, 1:5]))


# ---------------------------------------------------------------- odometry

def write_odometry(path, s: OdometryStream):
    q = quat_rows(s.R)
    rows = []
    for i in range(len(s.stamps)):
        cov = [fmt(c) for c in s.cov[i].reshape(-1)] if s.cov is not None else [""] * 36
        me = fmt(s.min_eig[i]) if s.min_eig is not None else ""
        rows.append([fmt(s.stamps[i]), *map(fmt, q[i]), *map(fmt, s.t[i]), *cov, me])
    _write(path, ODOM_COLS, rows)


def read_odometry(path, robot, kind) -> OdometryStream:
    rows = _read(path, ODOM_COLS)
    vals = np.array([_floats(r, path, i + 2, allow_empty=True) for i, r in enumerate(rows)]).reshape(-1, 45)
    vals = vals[np.argsort(vals[:, 0], kind="stable")]
    if np.any(np.isnan(vals[:, :8])):
        raise DataError(f"{path}: pose fields must not be empty")
    if np.any(np.diff(vals[:, 0]) <= 0):
        raise DataError(f"{path}: duplicate stamps")
    cov = min_eig = None
    if kind == "vio":
        cov = vals[:, 8:44].reshape(-1, 6, 6)
        if np.any(np.isnan(cov)):
            raise DataError(f"{path}: VIO rows need a covariance")
    else:
        min_eig = vals[:, 44]
        if np.any(np.isnan(min_eig)):
            raise DataError(f"{path}: LIO rows need min_eig")
    return OdometryStream(robot, kind, vals[:, 0], rotations(vals[:, 1:5]), vals[:, 5:8], cov, min_eig)


# --------------------------------------------------------------- detections

def write_detections(path, dets: List[DetectionRecord]):
    _write(path, DET_COLS, [[fmt(d.stamp), str(int(d.track_id)), *map(fmt, d.d)] for d in dets])


def read_detections(path) -> List[DetectionRecord]:
    rows = _read(path, DET_COLS)
    out = []
    for ln, r in enumerate(rows, start=2):
        v = _floats(r, path, ln)
        if v[1] != int(v[1]):
            raise DataError(f"{path}:{ln}: track_id must be an integer")
        out.append(DetectionRecord(v[0], int(v[1]), np.array(v[2:5])))
    out.sort(key=lambda d: (d.stamp, d.track_id, tuple(d.d)))
    return out


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -------------------------------------------------------------- merge queue

ODOM, DET = 0, 1


def merged_events(odometry: Dict[str, OdometryStream], detections: List[DetectionRecord]) -> Iterator[tuple]:
    """Events ``(stamp, kind, robot_or_none, index)`` in stamp order.

    Ties: odometry before detections, then by robot id, then by index.
    """
    def odom_iter(robot, s):
        for i, st in enumerate(s.stamps):
            yield (float(st), ODOM, robot, i)

    def det_iter():
        for i, d in enumerate(detections):
            yield (float(d.stamp), DET, "", i)

    iters = [odom_iter(r, odometry[r]) for r in sorted(odometry)] + [det_iter()]
    yield from heapq.merge(*iters)
