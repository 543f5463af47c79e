"""Anonymous detection-to-robot association by residual distance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from .errors import ConfigError, NoBracketingVariables
from .factors import DetectionMeasurement, detection_error


@dataclass(frozen=True)
class AssociationConfig:
    max_distance: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.max_distance) and self.max_distance > 0):
            raise ConfigError(f"association.max_distance must be > 0, got {self.max_distance!r}")


@dataclass
class Association:
    robot: Optional[str]
    distance: float
    distances: Dict[str, float] = field(default_factory=dict)


def residual_distance(graph, det: DetectionMeasurement, detector, target) -> float:
    """Norm of the detection residual against the current estimates."""
    xk, xk1, tx = graph.bracket(detector, det.stamp)
    yl, yl1, ty = graph.bracket(target, det.stamp)
    v = graph.values
    e = detection_error(v[xk], v[xk1], v[yl], v[yl1], det.d, tx, ty)
    return float(np.linalg.norm(e))


def associate(det: DetectionMeasurement, detector, candidates: Iterable[str], graph,
              cfg: AssociationConfig) -> Association:
    """Closest candidate robot if it is within the gate, else ``robot=None``.

    Candidates that do not bracket the detection stamp are skipped. Equal
    distances resolve to the lexicographically smallest robot id.
    """
    distances = {}
    for robot in sorted(set(candidates)):
        if robot == detector:
            continue
        try:
            distances[robot] = residual_distance(graph, det, detector, robot)
        except NoBracketingVariables:
            continue
    if not distances:
        return Association(None, float("inf"), distances)
    best = min(distances, key=lambda r: (distances[r], r))
    dist = distances[best]
    return Association(best if dist < cfg.max_distance else None, dist, distances)
