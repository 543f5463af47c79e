"""Strict JSON configuration documents for runs and simulated scenarios."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

from .assoc import AssociationConfig
from .errors import ConfigError
from .graph import SolverSettings
from .initialization import InitConfig
from .weighting import WeightingParams

SCHEMA_VERSION = 1
ROLES = ("detector", "detected")
ODOMETRY = ("lio", "vio")


def load_json(path) -> Tuple[dict, str]:
    """Parse a JSON document; returns (object, sha256 of the raw bytes)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc, hashlib.sha256(raw).hexdigest()


def check_keys(doc, allowed, ctx, required=()):
    if not isinstance(doc, dict):
        raise ConfigError(f"{ctx}: expected an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{ctx}: unknown key(s) {unknown}")
    missing = [k for k in required if k not in doc]
    if missing:
        raise ConfigError(f"{ctx}: missing key(s) {missing}")


def check_schema(doc, ctx):
    v = doc.get("schema_version")
    if v != SCHEMA_VERSION:
        raise ConfigError(f"{ctx}: schema_version must be {SCHEMA_VERSION}, got {v!r}")


def number(value, ctx, positive=False, nonneg=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{ctx}: expected a number, got {value!r}")
    value = float(value)
    if value != value or value in (float("inf"), float("-inf")):
        raise ConfigError(f"{ctx}: must be finite")
    if positive and not value > 0:
        raise ConfigError(f"{ctx}: must be > 0, got {value}")
    if nonneg and value < 0:
        raise ConfigError(f"{ctx}: must be >= 0, got {value}")
    return value


def dataclass_from(cls, doc, ctx):
    """Build a flat dataclass from a partial dict of overrides."""
    doc = doc or {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    check_keys(doc, names, ctx)
    kwargs = {}
    for k, v in doc.items():
        default = names[k].default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{ctx}.{k}: expected true/false")
            kwargs[k] = v
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{ctx}.{k}: expected an integer")
            kwargs[k] = v
        else:
            kwargs[k] = number(v, f"{ctx}.{k}")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{ctx}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{ctx}: {exc}") from None


@dataclass(frozen=True)
class RobotSpec:
    id: str
    role: str
    odometry: str
    mu: Optional[float] = None


@dataclass
class RunConfig:
    robots: List[RobotSpec]
    weighting: WeightingParams = field(default_factory=WeightingParams)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    init: InitConfig = field(default_factory=InitConfig)
    solver: SolverSettings = field(default_factory=SolverSettings)
    window_length: float = 30.0
    pending_timeout: float = 2.0

    def __post_init__(self):
        ids = [r.id for r in self.robots]
        if len(set(ids)) != len(ids):
            raise ConfigError("robot ids must be unique")
        if sum(r.role == "detector" for r in self.robots) != 1:
            raise ConfigError("exactly one robot must have role 'detector'")
        if not self.robots or len(self.robots) < 2:
            raise ConfigError("need a detector and at least one detected robot")
        if not self.window_length > 0:
            raise ConfigError("window_length must be > 0")

    @property
    def detector(self) -> RobotSpec:
        return next(r for r in self.robots if r.role == "detector")

    @property
    def detected(self) -> List[RobotSpec]:
        return [r for r in self.robots if r.role == "detected"]

    def weighting_for(self, robot_id) -> WeightingParams:
        spec = next(r for r in self.robots if r.id == robot_id)
        return self.weighting if spec.mu is None else self.weighting.with_mu(spec.mu)

    @classmethod
    def from_dict(cls, doc, ctx="run config"):
        check_keys(doc, {"schema_version", "robots", "weighting", "association", "init", "solver",
                         "window_length", "pending_timeout"}, ctx, required=("schema_version", "robots"))
        check_schema(doc, ctx)
        robots = []
        if not isinstance(doc["robots"], list):
            raise ConfigError(f"{ctx}.robots: expected a list")
        for i, r in enumerate(doc["robots"]):
            rc = f"{ctx}.robots[{i}]"
            check_keys(r, {"id", "role", "odometry", "mu"}, rc, required=("id", "role", "odometry"))
            if not isinstance(r["id"], str) or not r["id"].isidentifier():
                raise ConfigError(f"{rc}.id: expected an identifier string")
            if r["role"] not in ROLES:
                raise ConfigError(f"{rc}.role: one of {ROLES}")
            if r["odometry"] not in ODOMETRY:
                raise ConfigError(f"{rc}.odometry: one of {ODOMETRY}")
            mu = number(r["mu"], f"{rc}.mu", positive=True) if "mu" in r else None
            robots.append(RobotSpec(r["id"], r["role"], r["odometry"], mu))
        return cls(
            robots=robots,
            weighting=dataclass_from(WeightingParams, doc.get("weighting"), f"{ctx}.weighting"),
            association=dataclass_from(AssociationConfig, doc.get("association"), f"{ctx}.association"),
            init=dataclass_from(InitConfig, doc.get("init"), f"{ctx}.init"),
            solver=dataclass_from(SolverSettings, doc.get("solver"), f"{ctx}.solver"),
            window_length=number(doc.get("window_length", 30.0), f"{ctx}.window_length", positive=True),
            pending_timeout=number(doc.get("pending_timeout", 2.0), f"{ctx}.pending_timeout", positive=True),
        )

    @classmethod
    def load(cls, path):
        doc, _ = load_json(path)
        return cls.from_dict(doc, str(path))
