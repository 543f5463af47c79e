import numpy as np
import pytest

from coopfuse.errors import ConfigError
from coopfuse.factors import eval_detection, eval_relative_pose
from coopfuse.observability import (
    SCENARIO_ORDER,
    SCENARIOS,
    ScenarioSpec,
    analyze,
    build_stacked_jacobian,
    poses_from_config,
    random_poses,
    run_all,
)
from coopfuse.se3 import Pose

EXPECTED = {"full": 24, "no-prior": 20, "no-tilt": 23, "no-move": 23, "lio-deg": 23, "lio-deg+Z": 36, "vio-deg": 23}


def test_expected_rank_table():
    assert {k: v[1] for k, v in SCENARIOS.items()} == EXPECTED
    assert SCENARIO_ORDER == tuple(EXPECTED)


def test_random_configs_reproduce_table():
    rng = np.random.default_rng(0)
    for _ in range(20):
        for rep in run_all(random_poses(rng)):
            assert rep.rank == EXPECTED[rep.scenario], rep.scenario
            assert rep.max_angle <= 1e-6, rep.scenario
            assert rep.rank + rep.nullity == rep.shape[1]


def test_specific_nullspaces():
    poses = random_poses(np.random.default_rng(1))
    rep = analyze(ScenarioSpec("vio-deg", poses))
    v = rep.nullspace[:, 0]
    assert np.isclose(abs(v[20]), 1.0) and np.allclose(np.delete(v, 20), 0, atol=1e-9)
    rep = analyze(ScenarioSpec("no-move", poses))
    v = rep.nullspace[:, 0] / rep.nullspace[14, 0]
    assert np.isclose(v[20], 1.0) and np.allclose(np.delete(v, [14, 20]), 0, atol=1e-9)
    rep = analyze(ScenarioSpec("lio-deg+Z", poses))
    assert rep.nullity == 0 and rep.ok


def test_no_move_forces_equal_y_poses():
    poses = random_poses(np.random.default_rng(2))
    spec = ScenarioSpec("no-move", poses)
    assert np.array_equal(spec.poses["Y1"].t, spec.poses["Y2"].t)
    assert not np.array_equal(poses["Y1"].t, poses["Y2"].t)


def test_rows_come_from_factor_jacobians():
    poses = random_poses(np.random.default_rng(3))
    J = build_stacked_jacobian(ScenarioSpec("vio-deg", poses))
    X1, X2, Y1, Y2 = (poses[n] for n in ("X1", "X2", "Y1", "Y2"))
    lio = eval_relative_pose(X1, X2, X1.inverse() @ X2)
    assert np.allclose(J[0:6, 0:6], lio.jacobians[0]) and np.allclose(J[0:6, 6:12], lio.jacobians[1])
    det0 = eval_detection(X1, X2, Y1, Y2, X1.R.T @ (Y1.t - X1.t), 0.0, 0.0)
    det1 = eval_detection(X1, X2, Y1, Y2, X2.R.T @ (Y2.t - X2.t), 1.0, 1.0)
    assert np.allclose(J[6:9], np.hstack(det0.jacobians))
    assert np.allclose(J[9:12], np.hstack(det1.jacobians))


def test_fixed_poses_deterministic():
    doc = {"X1": {"yaw": 0.1, "t": [0, 0, 0]}, "X2": {"yaw": 0.5, "t": [2, 0, 0]},
           "Y1": {"yaw": -1.0, "t": [1, 3, 1]}, "Y2": {"yaw": 2.0, "t": [3, 4, 1]},
           "Z1": {"yaw": 0.0, "t": [-2, -3, 0]}, "Z2": {"yaw": 1.0, "t": [-4, -1, 0]}}
    a = run_all(poses_from_config(doc))
    b = run_all(poses_from_config(doc))
    for ra, rb in zip(a, b):
        assert ra.rank == rb.rank and ra.max_angle == rb.max_angle
        assert np.array_equal(ra.singular_values, rb.singular_values)
        assert ra.ok


def test_degenerate_configs_rejected():
    poses = random_poses(np.random.default_rng(4))
    coincident = dict(poses, Y1=Pose(poses["Y1"].R, poses["X1"].t))
    with pytest.raises(ConfigError):
        ScenarioSpec("full", coincident)
    tilted = dict(poses, X1=Pose.from_quaternion([np.cos(0.1), np.sin(0.1), 0, 0], [0, 0, 0]))
    with pytest.raises(ConfigError):
        ScenarioSpec("full", tilted)
    with pytest.raises(ConfigError):
        ScenarioSpec("bogus", poses)
    with pytest.raises(ConfigError):
        poses_from_config({"Q1": {"yaw": 0.0}})
