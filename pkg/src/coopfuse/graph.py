"""Sliding-window factor graph solved by damped Gauss-Newton on SE(3).

Variables are robot poses in the common world frame, keyed by
``VariableKey(robot, index)``. The whole window is re-linearized and solved
in batch; variables that fall out of the window are marginalized into a
Gaussian factor on their surviving neighbours.
"""

from __future__ import annotations

import bisect
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from . import se3
from .errors import NoBracketingVariables, OutOfOrderStamp, SingularSystem
from .factors import (
    DetectionFactor,
    DetectionMeasurement,
    Factor,
    MarginalFactor,
    NoiseModel,
    RelativePoseFactor,
    Se3PriorFactor,
    TiltPriorFactor,
    VariableKey,
)
from .se3 import Pose

log = logging.getLogger(__name__)


@dataclass
class SolverSettings:
    max_iters: int = 20
    lambda0: float = 1e-6
    lambda_up: float = 10.0
    lambda_down: float = 3.0
    lambda_max: float = 1e12
    step_tol: float = 1e-8
    rel_cost_tol: float = 1e-9

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.lambda0 > 0 and self.lambda_up > 1 and self.lambda_down > 1):
            raise ValueError("damping needs lambda0 > 0 and up/down factors > 1")
        if not self.lambda_max > self.lambda0:
            raise ValueError("lambda_max must exceed lambda0")
        if self.step_tol < 0 or self.rel_cost_tol < 0:
            raise ValueError("tolerances must be non-negative")


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    damping: float
    n_variables: int
    n_factors: int
    pivot_ratio: float = float("nan")

    def as_row(self):
        return [self.iterations, self.initial_cost, self.final_cost, int(self.converged),
                self.damping, self.n_variables, self.n_factors, self.pivot_ratio]


@dataclass
class Linearization:
    keys: List[VariableKey]
    J: sp.csr_matrix
    r: np.ndarray

    @property
    def cost(self):
        return float(self.r @ self.r)


class FactorGraph:
    """Variables, factors, and the sliding-window solver."""

    def __init__(self, window_length=30.0, tilt_sigma=(1e-3, 1e-3), solver: Optional[SolverSettings] = None):
        if not window_length > 0:
            raise ValueError("window_length must be positive")
        self.window_length = float(window_length)
        self.tilt_noise = NoiseModel.from_sigmas(tilt_sigma)
        self.solver = solver or SolverSettings()
        self.values: Dict[VariableKey, Pose] = {}
        self.factors: Dict[int, Factor] = {}
        self._timeline: Dict[str, List[VariableKey]] = {}
        self._stamps: Dict[str, List[float]] = {}
        self._next_index: Dict[str, int] = defaultdict(int)
        self._next_fid = 0
        self._adjacent: Dict[VariableKey, set] = defaultdict(set)
        self.dropped: List[Tuple[VariableKey, Pose]] = []
        self.deactivated: List[str] = []

    # ------------------------------------------------------------ bookkeeping

    def robots(self):
        return list(self._timeline)

    def keys(self, robot=None):
        if robot is not None:
            return list(self._timeline.get(robot, []))
        return sorted(self.values, key=lambda k: (self.values[k].stamp, k.robot, k.index))

    def has_robot(self, robot):
        return bool(self._timeline.get(robot))

    def latest_key(self, robot):
        tl = self._timeline.get(robot)
        return tl[-1] if tl else None

    def latest_stamp(self, robot):
        st = self._stamps.get(robot)
        return st[-1] if st else None

    def oldest_stamp(self, robot):
        st = self._stamps.get(robot)
        return st[0] if st else None

    def estimate(self, key) -> Pose:
        return self.values[key]

    def add_variable(self, robot, pose: Pose, stamp) -> VariableKey:
        stamp = float(stamp)
        last = self.latest_stamp(robot)
        if last is not None and not stamp > last:
            raise OutOfOrderStamp(f"{robot}: stamp {stamp} not after {last}")
        key = VariableKey(robot, self._next_index[robot])
        self._next_index[robot] += 1
        self.values[key] = pose.with_stamp(stamp)
        self._timeline.setdefault(robot, []).append(key)
        self._stamps.setdefault(robot, []).append(stamp)
        return key

    def add_factor(self, factor: Factor) -> int:
        for k in factor.keys:
            if k not in self.values:
                raise KeyError(f"factor references unknown variable {k}")
        fid = self._next_fid
        self._next_fid += 1
        self.factors[fid] = factor
        for k in factor.keys:
            self._adjacent[k].add(fid)
        return fid

    def remove_factor(self, fid):
        f = self.factors.pop(fid)
        for k in f.keys:
            self._adjacent[k].discard(fid)

    def add_prior(self, key, pose: Pose, cov) -> int:
        noise = cov if isinstance(cov, NoiseModel) else NoiseModel.from_covariance(cov)
        return self.add_factor(Se3PriorFactor((key,), noise, prior=Pose(pose.R, pose.t)))

    def add_tilt_prior(self, key) -> int:
        return self.add_factor(TiltPriorFactor((key,), self.tilt_noise))

    def add_first(self, robot, pose: Pose, stamp, prior_cov) -> VariableKey:
        """First variable of a robot, held by an SE(3) prior at ``pose``."""
        key = self.add_variable(robot, pose, stamp)
        self.add_prior(key, pose, prior_cov)
        self.add_tilt_prior(key)
        return key

    def add_odometry(self, robot, rel: Pose, noise, source="odom") -> VariableKey:
        """Append a variable at ``rel.stamp`` chained by a relative-pose factor."""
        prev = self.latest_key(robot)
        if prev is None:
            raise KeyError(f"robot {robot!r} has no variables yet")
        if rel.stamp is None:
            raise ValueError("relative pose sample needs a stamp")
        guess = self.values[prev] @ rel
        key = self.add_variable(robot, guess, rel.stamp)
        noise = noise if isinstance(noise, NoiseModel) else NoiseModel.from_covariance(noise)
        self.add_factor(RelativePoseFactor((prev, key), noise, measured=Pose(rel.R, rel.t), source=source))
        self.add_tilt_prior(key)
        return key

    def bracket(self, robot, stamp) -> Tuple[VariableKey, VariableKey, float]:
        st = self._stamps.get(robot) or []
        if len(st) < 2 or stamp < st[0] or stamp > st[-1]:
            raise NoBracketingVariables(f"{robot}: no variables around t={stamp}")
        i = bisect.bisect_right(st, stamp) - 1
        i = min(i, len(st) - 2)
        tau = (stamp - st[i]) / (st[i + 1] - st[i])
        tau = min(max(tau, 0.0), 1.0)
        tl = self._timeline[robot]
        return tl[i], tl[i + 1], tau

    def add_detection(self, det: DetectionMeasurement, detector, target, noise) -> int:
        xk, xk1, tx = self.bracket(detector, det.stamp)
        yl, yl1, ty = self.bracket(target, det.stamp)
        noise = noise if isinstance(noise, NoiseModel) else NoiseModel.from_covariance(noise)
        return self.add_factor(DetectionFactor((xk, xk1, yl, yl1), noise, measurement=det,
                                               tau_x=tx, tau_y=ty, target=target))

    # ------------------------------------------------------------ linearization

    def _arrays(self, keys):
        R = np.stack([self.values[k].R for k in keys])
        t = np.stack([self.values[k].t for k in keys])
        return R, t

    def _problem(self, factor_ids=None, keys=None):
        keys = self.keys() if keys is None else keys
        ids = self.factors if factor_ids is None else factor_ids
        return _Problem(keys, [self.factors[i] for i in ids])

    def linearize(self, factor_ids=None, keys=None) -> Linearization:
        prob = self._problem(factor_ids, keys)
        R, t = self._arrays(prob.keys)
        J, r = prob.evaluate(R, t)
        return Linearization(prob.keys, J, r)

    def cost(self):
        prob = self._problem()
        _, r = prob.evaluate(*self._arrays(prob.keys), jac=False)
        return float(r @ r)

    def information_matrix(self):
        lin = self.linearize()
        return (lin.J.T @ lin.J).toarray(), lin.keys

    # ------------------------------------------------------------------ solve

    @staticmethod
    def _unanchored_components(prob):
        n = len(prob.keys)
        heads, tails, anchored = [], [], np.zeros(n, bool)
        for ftype, prep in prob.groups:
            ii = prep["ii"]
            heads.append(np.repeat(ii[:, 0], ii.shape[1]))
            tails.append(ii.reshape(-1))
            if ftype in (Se3PriorFactor, MarginalFactor):
                anchored[ii.reshape(-1)] = True
        h, tl = np.concatenate(heads), np.concatenate(tails)
        adj = sp.coo_matrix((np.ones(h.size), (h, tl)), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        return set(labels.tolist()) - set(labels[anchored].tolist())

    def optimize(self, max_iters=None) -> SolveReport:
        cfg = self.solver
        max_iters = cfg.max_iters if max_iters is None else max_iters
        keys = self.keys()
        if not keys:
            return SolveReport(0, 0.0, 0.0, True, cfg.lambda0, 0, 0)
        prob = _Problem(keys, list(self.factors.values()))
        if self._unanchored_components(prob):
            raise SingularSystem("graph has a component without an SE(3) prior (gauge freedom)",
                                 label="no-prior")
        R, t = self._arrays(keys)
        J, r = prob.evaluate(R, t)
        cost0 = cost = float(r @ r)
        lam = cfg.lambda0
        converged = False
        pivot_ratio = float("nan")
        it = 0
        while it < max_iters:
            it += 1
            H = (J.T @ J).tocsc()
            g = J.T @ r
            diag = H.diagonal()
            damp = lam * np.maximum(diag, 1e-12 * max(diag.max(), 1.0))
            try:
                lu = spla.splu(H + sp.diags(damp, format="csc"), permc_spec="COLAMD")
            except RuntimeError as exc:
                raise SingularSystem(f"normal equations singular: {exc}") from None
            u = np.abs(lu.U.diagonal())
            pivot_ratio = float(u.max() / u.min()) if u.min() > 0 else float("inf")
            delta = -lu.solve(g)
            if not np.all(np.isfinite(delta)):
                raise SingularSystem("non-finite Gauss-Newton step")
            dR, dt = se3.exp_rt(delta.reshape(-1, 6))
            Rn, tn = se3.compose_rt(R, t, dR, dt)
            _, rn = prob.evaluate(Rn, tn, jac=False)
            new_cost = float(rn @ rn)
            step = float(np.max(np.abs(delta)))
            if new_cost <= cost:
                decrease = (cost - new_cost) / max(cost, 1e-300)
                R, t, cost = Rn, tn, new_cost
                lam = max(lam / cfg.lambda_down, 1e-15)
                if step < cfg.step_tol or decrease < cfg.rel_cost_tol or cost < 1e-24:
                    converged = True
                    break
                J, r = prob.evaluate(R, t)
            else:
                if step < cfg.step_tol:
                    converged = True
                    break
                lam *= cfg.lambda_up
                if lam > cfg.lambda_max:
                    break
        for i, k in enumerate(keys):
            self.values[k] = Pose(R[i], t[i], self.values[k].stamp)
        return SolveReport(it, cost0, cost, converged, lam, len(keys), len(self.factors), pivot_ratio)

    # ---------------------------------------------------------- marginalization

    def slide_window(self, now) -> int:
        """Marginalize every variable older than ``now - window_length``."""
        cutoff = float(now) - self.window_length
        drop = [k for k in self.keys() if self.values[k].stamp < cutoff]
        if not drop:
            return 0
        self.marginalize(drop)
        return len(drop)

    def marginalize(self, drop):
        D = set(drop)
        touching = sorted({fid for k in drop for fid in self._adjacent.get(k, ())})
        N = sorted({k for fid in touching for k in self.factors[fid].keys} - D,
                   key=lambda k: (self.values[k].stamp, k.robot, k.index))
        order = list(drop) + N
        new_factor = None
        if N and touching:
            lin = self.linearize(touching, order)
            H = (lin.J.T @ lin.J).toarray()
            b = lin.J.T @ lin.r
            nd = 6 * len(drop)
            Hdd, Hdn, Hnn = H[:nd, :nd], H[:nd, nd:], H[nd:, nd:]
            try:
                X = np.linalg.solve(Hdd, np.column_stack([Hdn, b[:nd]]))
            except np.linalg.LinAlgError:
                X = np.linalg.lstsq(Hdd, np.column_stack([Hdn, b[:nd]]), rcond=None)[0]
            info = Hnn - Hdn.T @ X[:, :-1]
            grad = b[nd:] - Hdn.T @ X[:, -1]
            info = 0.5 * (info + info.T)
            delta_bar = -np.linalg.pinv(info, rcond=1e-12, hermitian=True) @ grad
            noise = NoiseModel.from_information(info)
            if len(N) == 1:
                mean = self.values[N[0]] @ se3.exp(delta_bar)
                new_factor = Se3PriorFactor((N[0],), noise, prior=mean)
            else:
                linpoints = tuple(Pose(self.values[k].R, self.values[k].t) for k in N)
                new_factor = MarginalFactor(tuple(N), noise, linpoints=linpoints, delta_bar=delta_bar)
        for fid in touching:
            self.remove_factor(fid)
        for k in drop:
            self.dropped.append((k, self.values.pop(k)))
            self._adjacent.pop(k, None)
            tl = self._timeline[k.robot]
            i = tl.index(k)
            del tl[i]
            del self._stamps[k.robot][i]
        for robot in [r for r, tl in self._timeline.items() if not tl]:
            del self._timeline[robot]
            del self._stamps[robot]
            self.deactivated.append(robot)
            log.info("robot %s left the window entirely; deactivated", robot)
        if new_factor is not None:
            self.add_factor(new_factor)

    def pop_dropped(self):
        out, self.dropped = self.dropped, []
        return out

    def pop_deactivated(self):
        out, self.deactivated = self.deactivated, []
        return out


class _Problem:
    """Factors of one solve, grouped by type with constant data stacked once."""

    def __init__(self, keys, factors):
        self.keys = keys
        idx = {k: i for i, k in enumerate(keys)}
        by_type = defaultdict(list)
        for f in factors:
            by_type[type(f)].append(f)
        self.groups = []
        for ftype in sorted(by_type, key=lambda c: c.__name__):
            fs = by_type[ftype]
            if ftype is MarginalFactor:
                self.groups.extend((ftype, ftype.prepare([f], idx)) for f in fs)
            else:
                self.groups.append((ftype, ftype.prepare(fs, idx)))
        self._pattern = None

    def evaluate(self, R, t, jac=True):
        out = [ftype.run(prep, R, t, jac) for ftype, prep in self.groups]
        r = np.concatenate([e.reshape(-1) for e, _, _ in out]) if out else np.zeros(0)
        if not jac:
            return None, r
        n = 6 * len(self.keys)
        if self._pattern is None:
            rows, cols, base = [], [], 0
            for e, J, ii in out:
                M, k, d, _ = J.shape
                rr = base + np.arange(M)[:, None, None, None] * d + np.arange(d)[None, None, :, None]
                cc = 6 * ii[:, :, None, None] + np.arange(6)[None, None, None, :]
                rows.append(np.broadcast_to(rr, J.shape).reshape(-1))
                cols.append(np.broadcast_to(cc, J.shape).reshape(-1))
                base += M * d
            self._pattern = (np.concatenate(rows), np.concatenate(cols)) if rows else (np.zeros(0, int),) * 2
        data = np.concatenate([J.reshape(-1) for _, J, _ in out]) if out else np.zeros(0)
        J = sp.csr_matrix((data, self._pattern), shape=(r.size, n))
        return J, r
