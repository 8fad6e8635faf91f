"""Command-line entry point.

``tvapf run`` executes the closed-loop simulation and writes plot-ready
artifacts (runlog.csv, instances.json, summary.json); ``tvapf plan`` solves a
single planner instance at a chosen scene time and dumps the trajectory, the
sampled obstacle field, and the terminal set.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import scenario as scenario_mod
from .geometry import cartesian_to_frenet
from .planner import (EgoModelState, EmptyTerminalSet, Infeasible,
                      decision_label, safe_stop_trajectory, solve_ltp,
                      terminal_set)
from .prediction import ObstacleState, propagate_obstacle, tvapf_value
from .scenario import Scenario, ScenarioError
from .simulation import run, summarize
from .tracker import VehicleState

# Event kinds that mean the run ended (or degraded) through the safe-stop
# fallback rather than nominal tracking.
_SAFESTOP_EVENTS = {"planner_fallback", "horizon_exhausted", "collision"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvapf",
        description="Potential-field motion planner and closed-loop simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the closed-loop simulation")
    p_run.add_argument("scenario", help="scenario file (JSON or YAML)")
    p_run.add_argument("--out", default="out",
                       help="output directory (default: ./out)")
    p_run.add_argument("--seed", type=int, default=None,
                       help="reserved; runs are deterministic")
    p_run.add_argument("--strict", action="store_true",
                       help="exit 3 when the run degrades to safe-stop")
    p_run.add_argument("--dry-run", action="store_true",
                       help="validate and print the resolved config only")
    p_run.add_argument("--instance-period", type=float, default=None,
                       help="override the planner instance period [s]")
    p_run.add_argument("--horizon", type=int, default=None,
                       help="override the planner horizon length N_L")
    p_run.add_argument("--parallel-planner", action="store_true",
                       help="run the planner in a background thread")
    p_run.set_defaults(func=cmd_run)

    p_plan = sub.add_parser(
        "plan", help="solve one planner instance and dump plot data")
    p_plan.add_argument("scenario", help="scenario file (JSON or YAML)")
    p_plan.add_argument("--at", type=float, default=0.0,
                        help="scene time of the instance [s] (default: 0)")
    p_plan.add_argument("--out", default="plan.json",
                        help="output JSON file (default: ./plan.json)")
    p_plan.add_argument("--field-step", type=int, default=5,
                        help="dump the field every this many horizon steps")
    p_plan.set_defaults(func=cmd_plan)
    return parser


def _load_scenario(file) -> Scenario | None:
    try:
        return scenario_mod.load(file)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return None


def _apply_overrides(scn: Scenario, args) -> Scenario:
    planner = dict(scn.planner)
    if getattr(args, "instance_period", None) is not None:
        planner["instance_period"] = args.instance_period
    if getattr(args, "horizon", None) is not None:
        planner["N_L"] = args.horizon
    return replace(scn, planner=planner)


def cmd_run(args) -> int:
    scn = _load_scenario(args.scenario)
    if scn is None:
        return 2
    scn = _apply_overrides(scn, args)
    try:
        resolved = {
            "scenario": scn.to_dict(),
            "planner_config": vars(scn.planner_config()).copy(),
            "tracker_config": vars(scn.tracker_config()).copy(),
        }
    except (ScenarioError, ValueError, TypeError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    for cfg in (resolved["planner_config"], resolved["tracker_config"]):
        for key, value in list(cfg.items()):
            if not isinstance(value, (int, float, str, tuple, list,
                                      type(None))):
                cfg[key] = repr(value)
            elif isinstance(value, tuple):
                cfg[key] = list(value)
    if args.dry_run:
        json.dump(resolved, sys.stdout, indent=2)
        print()
        return 0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = run(scn, parallel_planner=args.parallel_planner)
    log.to_csv(out / "runlog.csv")
    with open(out / "instances.json", "w") as fh:
        json.dump(log.to_json_dict(), fh, indent=2)
    summary = summarize(log, scn)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)

    timeline = " ".join(f"{e['decision']}@{e['t0']:g}s"
                        for e in summary["decision_timeline"])
    print(f"wrote {out / 'runlog.csv'}  ({len(log.steps)} steps, "
          f"{len(log.instances)} instances)")
    print(f"decisions: {timeline}")
    print(f"min/max speed {summary['min_speed']:.2f}/"
          f"{summary['max_speed']:.2f} m/s, "
          f"solve mean/max {summary['solve_time_mean']:.3f}/"
          f"{summary['solve_time_max']:.3f} s, events: "
          f"{summary['events'] or 'none'}")
    if args.strict and any(e in _SAFESTOP_EVENTS for e in summary["events"]):
        print("strict mode: run degraded to safe-stop", file=sys.stderr)
        return 3
    return 0


def _scene_at(scn: Scenario, t: float):
    """Ego and actor states at scene time t (closed loop replayed when t>0)."""
    path = scn.build_path()
    if t <= 0.0:
        ego = scn.ego
        x0 = float(ego.get("x0", 0.0))
        y0 = float(ego.get("y0", path.rightmost_lane_center))
        q0 = cartesian_to_frenet(path, (x0, y0))
        theta0 = float(ego.get("theta0", path.heading(q0.s)))
        chi = VehicleState(x=x0, y=y0, theta=theta0,
                           v=float(ego.get("v0", 0.0)), delta=0.0)
        actors = [(a, a.s0, a.d0, a.v0) for a in scn.actors]
        return path, chi, actors
    sim = dict(scn.sim)
    sim["duration"] = t
    log = run(replace(scn, sim=sim))
    row = log.steps[-1]
    chi = VehicleState(x=row["ego_x"], y=row["ego_y"], theta=row["ego_theta"],
                       v=row["ego_v"], delta=row["ego_delta"])
    actors = [(a, row[f"{a.id}_s"], row[f"{a.id}_d"], row[f"{a.id}_v"])
              for a in scn.actors]
    return path, chi, actors


def cmd_plan(args) -> int:
    scn = _load_scenario(args.scenario)
    if scn is None:
        return 2
    try:
        pcfg = scn.planner_config()
        potentials_cfg = scn.potential_config()
        tvapf = scn.tvapf_params()
    except (ScenarioError, ValueError, TypeError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    path, chi, actors = _scene_at(scn, args.at)
    sensor_range = float(scn.sim.get("sensor_range", 300.0))

    q = cartesian_to_frenet(path, (chi.x, chi.y))
    psi = (chi.theta - float(path.heading(q.s)) + math.pi) \
        % (2.0 * math.pi) - math.pi
    xi0 = EgoModelState(
        s=q.s,
        d=float(np.clip(q.d, path.right_edge_offset + pcfg.d_margin,
                        path.left_edge_offset - pcfg.d_margin)),
        psi=float(np.clip(psi, -pcfg.psi_max, pcfg.psi_max)),
        nu=float(np.clip(chi.v, pcfg.v_min, pcfg.v_max)))

    forecasts = []
    sensed = []
    for spec, s, d, v in actors:
        if abs(s - xi0.s) > sensor_range:
            continue
        v_lo, v_hi = spec.v_bounds
        obs = ObstacleState(s_o=s, d_o=d, v_o=float(np.clip(v, v_lo, v_hi)),
                            v_bounds=spec.v_bounds, a_bounds=spec.a_bounds,
                            direction=spec.direction)
        forecasts.append(propagate_obstacle(obs, pcfg.T_sL, pcfg.N_L))
        sensed.append(spec.id)

    try:
        traj = solve_ltp(xi0, forecasts, path, pcfg,
                         potentials_cfg=potentials_cfg, tvapf=tvapf,
                         t0=args.at)
    except (Infeasible, EmptyTerminalSet) as exc:
        print(f"planner fallback: {exc}", file=sys.stderr)
        traj = safe_stop_trajectory(xi0, pcfg, t0=args.at)
    label = decision_label(traj, path, forecasts, v_des=potentials_cfg.v_des)

    try:
        box = terminal_set(forecasts, pcfg, path, xi0)
        box_dump = {"s_max": box.s_max, "d_center": box.d_center,
                    "eps_d": box.eps_d, "eps_psi": box.eps_psi,
                    "nu_max": box.nu_max}
    except EmptyTerminalSet:
        box_dump = None

    # obstacle-field samples on an (s, d, j) grid around the planned motion
    s_lo = xi0.s - 50.0
    s_hi = min(path.length, xi0.s + pcfg.v_max * pcfg.N_L * pcfg.T_sL + 50.0)
    s_grid = np.linspace(s_lo, s_hi, 141)
    d_grid = np.linspace(path.right_edge_offset, path.left_edge_offset, 33)
    j_grid = list(range(0, pcfg.N_L + 1, max(1, args.field_step)))
    field = []
    for j in j_grid:
        # overlay of the per-obstacle fields (each normalized to [0, 1])
        W = np.array([[max((tvapf_value(s, d, fc, j, tvapf)
                            for fc in forecasts), default=0.0)
                       for d in d_grid] for s in s_grid])
        field.append(W.tolist())

    dump = {
        "t0": args.at,
        "decision": label.value,
        "sensed": sensed,
        "stats": traj.solve_stats,
        "states": [[x.s, x.d, x.psi, x.nu] for x in traj.states],
        "inputs": [[u.alpha, u.omega] for u in traj.inputs],
        "terminal_set": box_dump,
        "field": {"s": s_grid.tolist(), "d": d_grid.tolist(), "j": j_grid,
                  "W": field},
    }
    with open(args.out, "w") as fh:
        json.dump(dump, fh)
    w_max = max(max(max(row) for row in sl) for sl in field) if field else 0.0
    print(f"wrote {args.out}  decision={label.value} "
          f"terminal_s_max={box_dump['s_max'] if box_dump else 'n/a'} "
          f"max W={w_max:.3f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
