"""Deterministic closed-loop simulation harness.

Fixed-step event loop over plant steps: scripted actors advance, the planner
publishes a trajectory every instance period, the tracker runs on its own
tick against the latest published trajectory, and a kinematic single-track
plant integrates the applied inputs.  Single-threaded scheduling is the
canonical mode and is bit-reproducible; an optional concurrent mode runs the
planner in a background thread with atomic publication.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .geometry import FrenetPoint, cartesian_to_frenet, frenet_to_cartesian
from .planner import (Decision, EgoModelState, EmptyTerminalSet, Infeasible,
                      decision_label, safe_stop_trajectory, solve_ltp)
from .potentials import verify_lane_centering
from .prediction import ObstacleState, propagate_obstacle
from .resampler import HorizonExhausted, resample
from .scenario import Scenario
from .tracker import (Infeasible as TrackerInfeasible, VehicleState,
                      bicycle_step, check_hierarchy, max_braking_input,
                      solve_nmpc)


@dataclass
class ActorRuntime:
    """Mutable state of one scripted actor."""

    spec: object
    s: float
    d: float
    v: float

    @property
    def direction(self) -> int:
        return self.spec.direction


def step_actor(actor: ActorRuntime, t: float, T: float) -> None:
    """Advance one actor by T seconds: position first, then relax the speed
    toward the scripted target under the actor's acceleration bounds."""
    actor.s += T * actor.direction * actor.v
    target = actor.v
    for t_entry, target_v in actor.spec.script:
        if t >= t_entry:
            target = target_v
    a_lo, a_hi = actor.spec.a_bounds
    dv = float(np.clip(target - actor.v, a_lo * T, a_hi * T))
    v_lo, v_hi = actor.spec.v_bounds
    actor.v = float(np.clip(actor.v + dv, v_lo, v_hi))


@dataclass
class RunLog:
    steps: list = field(default_factory=list)
    instances: list = field(default_factory=list)
    events: list = field(default_factory=list)
    actor_ids: list = field(default_factory=list)

    def to_csv(self, file) -> None:
        cols = ["time", "ego_x", "ego_y", "ego_theta", "ego_v", "ego_delta",
                "u_a", "u_w", "traj_id", "sigma",
                "err_x", "err_y", "err_theta", "err_v", "min_gap"]
        for aid in self.actor_ids:
            cols.extend([f"{aid}_s", f"{aid}_d", f"{aid}_v"])
        lines = [",".join(cols)]
        for row in self.steps:
            lines.append(",".join(
                repr(v) if isinstance(v, float) else str(v)
                for v in (row[c] for c in cols)))
        with open(file, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def to_json_dict(self) -> dict:
        return {"instances": self.instances, "events": self.events}


def _plan_instance(t, ego_chi, actors, path, pcfg, potentials_cfg, tvapf,
                   sensor_range, warm, log, a_applied=None):
    """Build forecasts from sensed actors and solve one planner instance."""
    q = cartesian_to_frenet(path, (ego_chi.x, ego_chi.y))
    psi = (ego_chi.theta - float(path.heading(q.s)) + math.pi) \
        % (2.0 * math.pi) - math.pi
    xi0 = EgoModelState(
        s=q.s,
        d=float(np.clip(q.d, path.right_edge_offset + pcfg.d_margin,
                        path.left_edge_offset - pcfg.d_margin)),
        psi=float(np.clip(psi, -pcfg.psi_max, pcfg.psi_max)),
        nu=float(np.clip(ego_chi.v, pcfg.v_min, pcfg.v_max)))

    forecasts = []
    sensed = []
    for actor in actors:
        if abs(actor.s - xi0.s) > sensor_range:
            continue
        spec = actor.spec
        v_lo, v_hi = spec.v_bounds
        obs = ObstacleState(s_o=actor.s, d_o=actor.d,
                            v_o=float(np.clip(actor.v, v_lo, v_hi)),
                            v_bounds=spec.v_bounds, a_bounds=spec.a_bounds,
                            direction=spec.direction)
        forecasts.append(propagate_obstacle(obs, pcfg.T_sL, pcfg.N_L))
        sensed.append(spec.id)

    # Anchor the first planned input to the acceleration the tracker is
    # actually applying, so the published reference never carries a jerk
    # discontinuity the tracker cannot follow within its error contract.
    alpha_prev = None
    if a_applied is not None:
        alpha_prev = float(a_applied)
    elif warm is not None and not warm.fallback:
        idx = min(pcfg.shift_steps, warm.horizon - 1)
        alpha_prev = warm.inputs[idx].alpha

    try:
        traj = solve_ltp(xi0, forecasts, path, pcfg,
                         potentials_cfg=potentials_cfg, tvapf=tvapf,
                         warm_start=warm, t0=t, alpha_prev=alpha_prev)
    except (Infeasible, EmptyTerminalSet) as exc:
        log.events.append({"t": t, "kind": "planner_fallback",
                           "message": str(exc)})
        traj = safe_stop_trajectory(xi0, pcfg, t0=t,
                                    alpha_prev=alpha_prev or 0.0)
    label = decision_label(traj, path, forecasts,
                           v_des=potentials_cfg.v_des)
    record = {
        "t0": t,
        "decision": label.value,
        "sensed": sensed,
        "stats": traj.solve_stats,
        "states": [[x.s, x.d, x.psi, x.nu] for x in traj.states],
        "inputs": [[u.alpha, u.omega] for u in traj.inputs],
        "forecasts": [
            {"id": sensed[i], "d_o": fc.d_o, "direction": fc.direction,
             "s_min": fc.s_min.tolist(), "s_max": fc.s_max.tolist()}
            for i, fc in enumerate(forecasts)
        ],
    }
    log.instances.append(record)
    return traj, label


def run(scenario: Scenario, parallel_planner: bool = False) -> RunLog:
    """Execute the closed loop and return the full run log."""
    path = scenario.build_path()
    pcfg = scenario.planner_config()
    tcfg = scenario.tracker_config()
    potentials_cfg = scenario.potential_config()
    tvapf = scenario.tvapf_params()
    check_hierarchy(tcfg, pcfg)
    verify_lane_centering(path, potentials_cfg)

    sim = scenario.sim
    duration = float(sim.get("duration", 60.0))
    h = float(sim.get("plant_step", 0.02))
    sensor_range = float(sim.get("sensor_range", 300.0))
    margin = float(sim.get("collision_margin", 2.0))
    steps_per_tick = int(round(tcfg.T_sMPC / h))
    steps_per_instance = int(round(pcfg.instance_period / h))
    n_steps = int(round(duration / h))

    ego = scenario.ego
    x0 = float(ego.get("x0", 0.0))
    y0 = float(ego.get("y0", path.rightmost_lane_center))
    q0 = cartesian_to_frenet(path, (x0, y0))
    theta0 = float(ego.get("theta0", path.heading(q0.s)))
    chi = VehicleState(x=x0, y=y0, theta=theta0,
                       v=float(ego.get("v0", 0.0)), delta=0.0)

    actors = [ActorRuntime(spec=a, s=a.s0, d=a.d0, v=a.v0)
              for a in scenario.actors]
    log = RunLog(actor_ids=[a.spec.id for a in actors])

    traj = None
    traj_id = -1
    u_applied = np.zeros(2)
    u_prev = None
    u_guess = None
    sigma = 0.0
    err = np.zeros(4)
    collided = set()
    planner_thread = None
    pending = {}

    def do_plan(t, chi_snapshot, actor_snapshot, warm, a_applied):
        return _plan_instance(t, chi_snapshot, actor_snapshot, path, pcfg,
                              potentials_cfg, tvapf, sensor_range, warm, log,
                              a_applied=a_applied)

    for n in range(n_steps):
        t = n * h

        # planner instance
        if n % steps_per_instance == 0:
            if parallel_planner:
                if planner_thread is not None:
                    planner_thread.join()
                snapshot = [ActorRuntime(a.spec, a.s, a.d, a.v)
                            for a in actors]

                a_now = None if u_prev is None else float(u_prev[0])

                def worker(t=t, chi=chi, snapshot=snapshot, warm=traj,
                           a_now=a_now):
                    pending["traj"], pending["label"] = do_plan(
                        t, chi, snapshot, warm, a_now)

                planner_thread = threading.Thread(target=worker)
                planner_thread.start()
            else:
                a_now = None if u_prev is None else float(u_prev[0])
                traj, _ = do_plan(t, chi, actors, traj, a_now)
                traj_id += 1

        if parallel_planner and planner_thread is not None \
                and not planner_thread.is_alive():
            planner_thread.join()
            planner_thread = None
            traj = pending.pop("traj")
            pending.pop("label", None)
            traj_id += 1

        # tracker tick
        if n % steps_per_tick == 0 and traj is not None:
            try:
                refs = resample(traj, path, t, tcfg.N_P, tcfg.T_sMPC,
                                wheelbase=tcfg.wheelbase)
                ref0 = refs[0].as_array()
                try:
                    sol = solve_nmpc(chi, [r.as_array() for r in refs], tcfg,
                                     u_prev=u_prev, u_guess=u_guess)
                    u_applied = sol.u0
                    sigma = sol.sigma
                    u_guess = np.vstack([sol.inputs[1:], sol.inputs[-1:]])
                except TrackerInfeasible as exc:
                    log.events.append({"t": t, "kind": "tracker_infeasible",
                                       "message": str(exc)})
                    e0 = chi.as_array() - ref0
                    inside = (abs(e0[0]) <= tcfg.e_pos
                              and abs(e0[1]) <= tcfg.e_pos
                              and abs(e0[3]) <= tcfg.e_v)
                    if inside and u_guess is not None:
                        # error still inside the contract box: hold the
                        # shifted plan from the previous tick instead of
                        # braking, which would only widen the error
                        u_applied = u_guess[0].copy()
                        if u_prev is not None:
                            lo = u_prev[0] - tcfg.delta_a_max
                            hi = u_prev[0] + tcfg.delta_a_max
                            u_applied[0] = min(max(u_applied[0], lo), hi)
                        u_guess = np.vstack([u_guess[1:], u_guess[-1:]])
                    else:
                        u_applied = max_braking_input(u_prev, tcfg)
                        u_guess = None
                    sigma = math.nan
            except HorizonExhausted as exc:
                log.events.append({"t": t, "kind": "horizon_exhausted",
                                   "message": str(exc)})
                u_applied = max_braking_input(u_prev, tcfg)
                sigma = math.nan
                ref0 = chi.as_array()
                u_guess = None
            u_prev = u_applied
            e = chi.as_array() - ref0
            e[2] = (e[2] + math.pi) % (2.0 * math.pi) - math.pi
            err = e[:4]

        # log the state at time t with the input applied over [t, t+h)
        gaps = []
        for actor in actors:
            p = frenet_to_cartesian(path, FrenetPoint(
                s=float(np.clip(actor.s, 0.0, path.length)), d=actor.d))
            gaps.append(math.hypot(chi.x - p.x, chi.y - p.y))
        min_gap = min(gaps) if gaps else math.inf
        for i, gap in enumerate(gaps):
            aid = actors[i].spec.id
            if gap < margin and aid not in collided:
                collided.add(aid)
                log.events.append({"t": t, "kind": "collision_margin",
                                   "message": f"gap to {aid} is {gap:.2f} m"})
        row = {
            "time": t, "ego_x": chi.x, "ego_y": chi.y, "ego_theta": chi.theta,
            "ego_v": chi.v, "ego_delta": chi.delta,
            "u_a": float(u_applied[0]), "u_w": float(u_applied[1]),
            "traj_id": traj_id, "sigma": sigma,
            "err_x": float(err[0]), "err_y": float(err[1]),
            "err_theta": float(err[2]), "err_v": float(err[3]),
            "min_gap": min_gap,
        }
        for actor in actors:
            row[f"{actor.spec.id}_s"] = actor.s
            row[f"{actor.spec.id}_d"] = actor.d
            row[f"{actor.spec.id}_v"] = actor.v
        log.steps.append(row)

        # advance plant and actors to t + h; the plant does not reverse
        chi = bicycle_step(chi, u_applied, h, tcfg.wheelbase)
        if chi.v < 0.0:
            chi = VehicleState(chi.x, chi.y, chi.theta, 0.0, chi.delta)
        for actor in actors:
            step_actor(actor, t, h)

    if planner_thread is not None:
        planner_thread.join()
    return log


def summarize(log: RunLog, scenario: Scenario) -> dict:
    """Scalar regression summary recomputable from the run log."""
    tcfg = scenario.tracker_config()
    L = tcfg.wheelbase
    times = [r["time"] for r in log.steps]
    v = np.array([r["ego_v"] for r in log.steps])
    delta = np.array([r["ego_delta"] for r in log.steps])
    u_a = np.array([r["u_a"] for r in log.steps])
    yaw_rate = v * np.tan(delta) / L

    # jerk between consecutive controller ticks
    steps_per_tick = int(round(tcfg.T_sMPC / (times[1] - times[0])))
    tick_a = u_a[::steps_per_tick]
    jerk = np.abs(np.diff(tick_a)) / tcfg.T_sMPC if len(tick_a) > 1 else \
        np.zeros(1)

    timeline = [{"t0": inst["t0"], "decision": inst["decision"],
                 "overtake_feasible": inst["stats"].get("overtake_feasible")}
                for inst in log.instances]
    solve_times = []
    for inst in log.instances:
        cands = inst["stats"].get("candidates")
        if cands:
            solve_times.extend(c.get("wall_time", 0.0) for c in cands)
        else:
            solve_times.append(inst["stats"].get("wall_time", 0.0))
    sigmas = np.array([r["sigma"] for r in log.steps[::steps_per_tick]])
    err_pos = np.array([[r["err_x"], r["err_y"]]
                        for r in log.steps[::steps_per_tick]])
    return {
        "duration": times[-1] + (times[1] - times[0]),
        "min_speed": float(np.min(v)),
        "max_speed": float(np.max(v)),
        "max_abs_a_lon": float(np.max(np.abs(u_a))),
        "max_jerk": float(np.max(jerk)),
        "max_yaw_rate": float(np.max(np.abs(yaw_rate))),
        "max_abs_a_lat": float(np.max(np.abs(v * yaw_rate))),
        "max_abs_delta": float(np.max(np.abs(delta))),
        "min_gap": float(min(r["min_gap"] for r in log.steps)),
        "decision_timeline": timeline,
        "solve_time_mean": float(np.mean(solve_times)) if solve_times else 0.0,
        "solve_time_max": float(np.max(solve_times)) if solve_times else 0.0,
        "sigma_zero_fraction": float(np.mean(
            np.nan_to_num(sigmas, nan=1.0) <= 1e-3)),
        "max_tracking_error": float(np.max(np.abs(err_pos)))
        if len(err_pos) else 0.0,
        "events": [e["kind"] for e in log.events],
    }
