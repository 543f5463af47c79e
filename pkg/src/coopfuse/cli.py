"""``coop-fuse`` command line: simulate, run, eval, observability."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import evaluation, observability, sim, streams
from .config import RunConfig, load_json
from .engine import Engine
from .errors import ConfigError, CoopFuseError, InsufficientOverlap, ZeroVariance

log = logging.getLogger("coopfuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MISMATCH = 0, 2, 3, 4


# ----------------------------------------------------------------- helpers

def bundled_scenarios():
    return sorted(p.name[:-5] for p in resources.files("coopfuse.scenarios").iterdir() if p.name.endswith(".json"))


def load_scenario_doc(config=None, scenario=None):
    if scenario is not None:
        if scenario not in bundled_scenarios():
            raise ConfigError(f"unknown bundled scenario {scenario!r}; choose from {bundled_scenarios()}")
        path = resources.files("coopfuse.scenarios") / f"{scenario}.json"
        with resources.as_file(path) as p:
            return load_json(p)[0]
    if config is None:
        raise ConfigError("need --config or --scenario")
    return load_json(config)[0]


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([streams.fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])
    Path(path).write_text(buf.getvalue())


def _canonical(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


# ---------------------------------------------------------------- commands

def cmd_simulate(doc, out_dir, seed=None, zero_noise=False):
    """Generate streams for a scenario document; returns the manifest dict."""
    doc = dict(doc)
    if seed is not None:
        doc["seed"] = int(seed)
    sc = sim.Scenario.from_dict(doc)
    st = sim.generate(sc, zero_noise=zero_noise)
    out = Path(out_dir)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    files = {}
    robots = []
    for r in sc.robots:
        name = f"{r.id}_odom.csv"
        streams.write_odometry(out / name, st.odometry[r.id])
        files[name] = streams.sha256(out / name)
        robots.append({"id": r.id, "role": r.role, "odometry": r.odometry, "file": name})
        g = st.ground_truth[r.id]
        streams.write_trajectory(out / "gt" / f"{r.id}.csv", g.stamps, g.rotations, g.positions)
        files[f"gt/{r.id}.csv"] = streams.sha256(out / "gt" / f"{r.id}.csv")
    streams.write_detections(out / "detections.csv", st.detections)
    files["detections.csv"] = streams.sha256(out / "detections.csv")
    manifest = {
        "scenario": sc.name,
        "seed": sc.seed,
        "config_sha256": hashlib.sha256(_canonical(doc)).hexdigest(),
        "duration": sc.duration,
        "robots": robots,
        "detections": "detections.csv",
        "run_config": sc.run_config_dict(),
        "files": dict(sorted(files.items())),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_streams(streams_dir, cfg: RunConfig):
    d = Path(streams_dir)
    odom = {r.id: streams.read_odometry(d / f"{r.id}_odom.csv", r.id, r.odometry) for r in cfg.robots}
    dets = streams.read_detections(d / "detections.csv")
    return odom, dets


def load_run_config(streams_dir, config=None) -> RunConfig:
    if config is not None:
        return RunConfig.load(config)
    mpath = Path(streams_dir) / "manifest.json"
    if not mpath.exists():
        raise ConfigError("no --config given and streams directory has no manifest.json")
    doc, _ = load_json(mpath)
    if "run_config" not in doc:
        raise ConfigError(f"{mpath}: no run_config section")
    return RunConfig.from_dict(doc["run_config"], f"{mpath}:run_config")


def cmd_run(streams_dir, out_dir, config=None):
    cfg = load_run_config(streams_dir, config)
    odom, dets = read_streams(streams_dir, cfg)
    out = Engine(cfg).run(odom, dets)
    o = Path(out_dir)
    o.mkdir(parents=True, exist_ok=True)
    for rid in sorted(odom):
        for name, series in ((f"coop_{rid}.csv", out.smoothed[rid]), (f"coop_online_{rid}.csv", out.online[rid])):
            stamps = [s for s, _ in series]
            streams.write_trajectory(o / name, stamps, [p.R for _, p in series], [p.t for _, p in series])
        streams.write_odometry(o / f"odom_{rid}.csv", odom[rid])
    _write_csv(o / "noise_sigmas.csv", ["stamp_s", "robot", "source", "sigma_roll", "sigma_pitch", "sigma_yaw",
                                        "sigma_x", "sigma_y", "sigma_z", "w2", "degenerate"], out.noise)
    _write_csv(o / "associations.csv", ["stamp_s", "track_id", "decision", "robot", "distance", "reason"],
               out.associations)
    _write_csv(o / "init_events.csv", ["stamp_s", "robot", "track_id", "event", "theta", "tx", "ty", "tz",
                                       "cost", "n", "spread"], out.init_events)
    _write_csv(o / "solve_reports.csv", ["stamp_s", "trigger", "iterations", "initial_cost", "final_cost",
                                         "converged", "damping", "n_variables", "n_factors", "pivot_ratio"],
               out.solves)
    return out


def _odom_trajectory(s):
    return evaluation.Trajectory(s.stamps, s.t, s.R)


def cmd_eval(estimates_dir, gt_dir, out_dir=None):
    """Metrics rows ``(robot, method, n, ate_2d, ate_3d, ate_yaw, error)`` and correlation rows."""
    est_dir, gt_dir = Path(estimates_dir), Path(gt_dir)
    out_dir = Path(out_dir) if out_dir else est_dir
    robots = sorted(p.stem[len("odom_"):] for p in est_dir.glob("odom_*.csv"))
    rows, corr = [], []
    for rid in robots:
        gpath = gt_dir / f"{rid}.csv"
        if not gpath.exists():
            rows.append((rid, "-", 0, np.nan, np.nan, np.nan, "no ground truth"))
            continue
        gt = streams.read_trajectory(gpath)
        ocsv = est_dir / f"odom_{rid}.csv"
        header = ocsv.read_text().split("\n", 2)[1].split(",")
        kind = "vio" if header[8] != "" else "lio"
        od = streams.read_odometry(ocsv, rid, kind)
        methods = [(kind.upper(), _odom_trajectory(od))]
        for method, name in (("COOP", f"coop_{rid}.csv"), ("COOP-online", f"coop_online_{rid}.csv")):
            if (est_dir / name).exists():
                methods.append((method, streams.read_trajectory(est_dir / name)))
        for method, traj in methods:
            try:
                vals = [evaluation.ate(traj, gt, m) for m in ("2d", "3d", "yaw")]
                rows.append((rid, method, len(traj), *vals, ""))
            except InsufficientOverlap as exc:
                rows.append((rid, method, len(traj), np.nan, np.nan, np.nan, f"insufficient overlap: {exc}"))
        if kind == "vio":
            try:
                r, w2, _ = evaluation.wasserstein_error_correlation(od.stamps, od.R, od.t, od.cov[:, 3:6, 3:6], gt)
                corr.append((rid, len(w2), r, ""))
            except (InsufficientOverlap, ZeroVariance) as exc:
                corr.append((rid, 0, np.nan, str(exc)))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "metrics.csv", ["robot", "method", "n", "ate_2d", "ate_3d", "ate_yaw", "error"], rows)
    _write_csv(out_dir / "correlation.csv", ["robot", "pairs", "pearson_r", "error"], corr)
    return rows, corr


def cmd_observability(poses_doc=None, trials=100, seed=0):
    """Reports for every scenario over ``trials`` random configurations (or the given poses)."""
    reports = []
    if poses_doc is not None:
        poses = observability.poses_from_config(poses_doc)
        reports.append((0, observability.run_all(poses)))
    else:
        rng = np.random.default_rng(seed)
        for i in range(trials):
            reports.append((i, observability.run_all(observability.random_poses(rng))))
    return reports


def _observability_table(reports):
    rows = []
    names = observability.SCENARIO_ORDER
    for name in names:
        reps = [r for _, rs in reports for r in rs if r.scenario == name]
        ranks = sorted({r.rank for r in reps})
        mism = sum(not r.ok for r in reps)
        rows.append((name, reps[0].shape[1], "|".join(map(str, ranks)), reps[0].expected_rank,
                     reps[0].shape[1] - reps[0].expected_rank, max(r.max_angle for r in reps),
                     reps[0].label, len(reps), mism))
    return rows


# -------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="coop-fuse", description="Cooperative multi-robot localization on a sliding-window factor graph.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic streams for a scenario")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--config", help="scenario JSON")
    g.add_argument("--scenario", help=f"bundled scenario name")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--zero-noise", action="store_true", help="disable every noise source")

    r = sub.add_parser("run", help="replay streams through the estimator")
    r.add_argument("streams", help="directory written by 'simulate' (or compatible)")
    r.add_argument("--config", help="run config JSON (default: manifest run_config)")
    r.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="ATE and Wasserstein-error correlation")
    e.add_argument("estimates", help="output directory of 'run'")
    e.add_argument("gt", help="directory with <robot>.csv ground truth")
    e.add_argument("--out", help="metrics directory (default: estimates directory)")

    o = sub.add_parser("observability", help="rank/nullspace table of the simplified graph")
    o.add_argument("--config", help="JSON with fixed yaw-only poses X1..Z2")
    o.add_argument("--trials", type=int, default=100)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", help="also write the table to this CSV file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            doc = load_scenario_doc(args.config, args.scenario)
            m = cmd_simulate(doc, args.out, args.seed, args.zero_noise)
            print(f"wrote {len(m['files']) + 1} files for scenario {m['scenario']} (seed {m['seed']}) to {args.out}")
        elif args.command == "run":
            cmd_run(args.streams, args.out, args.config)
            print(f"estimates written to {args.out}")
        elif args.command == "eval":
            rows, corr = cmd_eval(args.estimates, args.gt, args.out)
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(["robot", "method", "n", "ate_2d", "ate_3d", "ate_yaw", "error"])
            for row in rows:
                w.writerow([f"{x:.4f}" if isinstance(x, float) else x for x in row])
            for row in corr:
                print(f"# W2/error correlation {row[0]}: r={row[2]:.3f} over {row[1]} pairs {row[3]}")
        elif args.command == "observability":
            doc = load_json(args.config)[0] if args.config else None
            if args.trials < 1:
                raise ConfigError("--trials must be >= 1")
            rows = _observability_table(cmd_observability(doc, args.trials, args.seed))
            header = ["scenario", "columns", "rank", "expected_rank", "nullity", "max_angle_rad",
                      "unobservable", "configs", "mismatches"]
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([f"{x:.3e}" if isinstance(x, float) else x for x in row])
            sys.stdout.write(buf.getvalue())
            if args.out:
                Path(args.out).write_text(buf.getvalue())
            if any(row[-1] for row in rows):
                return EXIT_MISMATCH
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CoopFuseError, KeyError, ValueError) as exc:
        label = getattr(exc, "label", None)
        extra = f" [{label}]" if label else ""
        print(f"data error: {exc}{extra}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
