import numpy as np

from coopfuse import se3
from coopfuse.factors import DetectionMeasurement, NoiseModel
from coopfuse.graph import FactorGraph
from coopfuse.se3 import Pose


def random_graph(rng, n_x=3, n_y=3, noise=0.05, dt=0.5, window=1000.0):
    """Two robots with odometry chains and detections; returns (graph, gt dict)."""
    g = FactorGraph(window_length=window)
    gt = {}
    for robot, n, base in (("X", n_x, Pose.identity()), ("Y", n_y, Pose.from_yaw(0.8, [3.0, 1.0, 0.5]))):
        poses = [base]
        for _ in range(n - 1):
            step = np.r_[0, 0, rng.normal() * 0.3, rng.normal(size=3) * 0.8]
            poses.append(poses[-1] @ se3.exp(step))
        gt[robot] = poses
    cov6 = np.diag([1e-4, 1e-4, 1e-3, 1e-2, 1e-2, 1e-2])
    for robot in ("X", "Y"):
        poses = gt[robot]
        start = poses[0] @ se3.exp(rng.normal(size=6) * noise)
        g.add_first(robot, start, 0.0 if robot == "X" else 0.1, np.diag([1e-2] * 6) if robot == "Y" else np.eye(6) * 1e-4)
        for k in range(1, len(poses)):
            rel = poses[k - 1].inverse() @ poses[k] @ se3.exp(rng.normal(size=6) * noise)
            stamp = (0.0 if robot == "X" else 0.1) + k * dt
            g.add_odometry(robot, rel.with_stamp(stamp), cov6)
    t_lo, t_hi = 0.1, min(g.latest_stamp("X"), g.latest_stamp("Y"))
    for stamp in rng.uniform(t_lo, t_hi, size=4):
        xk, xk1, tx = g.bracket("X", stamp)
        yl, yl1, ty = g.bracket("Y", stamp)
        Tx = se3.interpolate(gt["X"][xk.index], gt["X"][xk1.index], tx)
        Ty = se3.interpolate(gt["Y"][yl.index], gt["Y"][yl1.index], ty)
        d = (Tx.inverse() @ Ty).t + rng.normal(size=3) * noise
        g.add_detection(DetectionMeasurement(d, stamp, 1), "X", "Y", np.eye(3) * 0.0169)
    return g, gt


def dense_gauss_newton(graph, iters=200):
    """Reference solver: per-factor evaluation, dense normal equations, no damping."""
    keys = graph.keys()
    idx = {k: i for i, k in enumerate(keys)}
    poses = [graph.values[k] for k in keys]
    for _ in range(iters):
        rows, res = [], []
        for f in graph.factors.values():
            ev = f.evaluate([poses[idx[k]] for k in f.keys])
            S = f.noise.sqrt_info
            block = np.zeros((S.shape[0], 6 * len(keys)))
            for k, Jk in zip(f.keys, ev.jacobians):
                block[:, 6 * idx[k]:6 * idx[k] + 6] += S @ Jk
            rows.append(block)
            res.append(S @ ev.error)
        J, r = np.vstack(rows), np.concatenate(res)
        step = np.linalg.solve(J.T @ J, -J.T @ r)
        poses = [P @ se3.exp(step[6 * i:6 * i + 6]) for i, P in enumerate(poses)]
        if np.max(np.abs(step)) < 1e-14:
            break
    return dict(zip(keys, poses))
