"""Motion controller: single-track dynamics, the configuration hierarchy
against the planner, and the per-tick NMPC solve."""

import dataclasses
import math

import numpy as np
import pytest

from tvapf.planner import PlannerConfig
from tvapf.potentials import ConfigError
from tvapf.tracker import (Infeasible, TrackerConfig, VehicleState,
                           bicycle_step, check_hierarchy, max_braking_input,
                           solve_nmpc)


@pytest.fixture(scope="module")
def cfg():
    return TrackerConfig()


def _straight_ref(cfg, v=8.0, a=0.0):
    """Constant-acceleration straight-line reference from the origin."""
    t = cfg.T_sMPC * np.arange(cfg.N_P + 1)
    vr = v + a * t
    x = v * t + 0.5 * a * t ** 2
    zeros = np.zeros(cfg.N_P + 1)
    return np.stack([x, zeros, zeros, vr, zeros], axis=1)


# -- dynamics ----------------------------------------------------------------


def test_bicycle_step_straight():
    out = bicycle_step(VehicleState(0, 0, 0, 10.0, 0.0), (0.0, 0.0), 0.2)
    assert out == VehicleState(x=2.0, y=0.0, theta=0.0, v=10.0, delta=0.0)


def test_bicycle_step_constant_steering_arc():
    chi = VehicleState(0, 0, 0, 5.0, 0.2)
    out = bicycle_step(chi, (0.0, 0.0), 0.2)
    # constant steering at constant speed turns at v tan(delta) / L
    assert out.theta == pytest.approx(5.0 * math.tan(0.2) / 2.7 * 0.2,
                                      rel=1e-9)
    assert out.v == 5.0 and out.delta == 0.2


def test_bicycle_step_standstill():
    chi = VehicleState(1.0, 2.0, 0.3, 0.0, 0.1)
    out = bicycle_step(chi, (0.0, 0.0), 0.2)
    assert out == chi  # nothing moves at zero speed and zero input


def test_bicycle_step_validation():
    with pytest.raises(ValueError):
        bicycle_step(VehicleState(0, 0, 0, 1, 0), (0, 0), 0.0)


# -- configuration -----------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        TrackerConfig(T_sMPC=0.0)
    with pytest.raises(ConfigError):
        TrackerConfig(Q=(1, 1, 1, -1, 1))
    with pytest.raises(ConfigError):
        TrackerConfig(rho=0.0)
    with pytest.raises(ConfigError):
        TrackerConfig(a_min=0.1)
    with pytest.raises(ConfigError):
        TrackerConfig(e_pos=0.0)


def test_hierarchy_default_configs_compatible(cfg):
    check_hierarchy(cfg, PlannerConfig())  # must not raise


@pytest.mark.parametrize("override", [
    {"a_min": -0.95},          # tracker decel exceeds planner authority
    {"a_max": 0.95},           # tracker accel exceeds planner authority
    {"yaw_rate_max": 0.09},    # yaw-rate limit above planner heading rate
    {"a_max": 0.7},            # cannot cover the planner's margin-reduced box
    {"delta_a_max": 0.05},     # cannot follow planner acceleration ramps
])
def test_hierarchy_violations(cfg, override):
    with pytest.raises(ConfigError):
        check_hierarchy(dataclasses.replace(cfg, **override), PlannerConfig())


def test_max_braking_input(cfg):
    assert np.allclose(max_braking_input(None, cfg), [-0.17, 0.0])
    assert np.allclose(max_braking_input([-0.5, 0.1], cfg), [-0.67, 0.0])
    # already near full braking: clipped at the input bound
    assert np.allclose(max_braking_input([-0.8, 0.0], cfg), [-0.85, 0.0])


# -- NMPC solve --------------------------------------------------------------


def test_perfect_reference_needs_no_input(cfg):
    chi0 = VehicleState(0.0, 0.0, 0.0, 8.0, 0.0)
    sol = solve_nmpc(chi0, _straight_ref(cfg), cfg)
    assert sol.stats["status"] == "optimal"
    assert np.abs(sol.inputs).max() == pytest.approx(0.0, abs=1e-10)
    assert sol.sigma == pytest.approx(0.0, abs=1e-10)
    assert sol.predicted[0] == chi0


def test_lateral_offset_decays(cfg):
    chi0 = VehicleState(0.0, 0.3, 0.0, 8.0, 0.0)
    sol = solve_nmpc(chi0, _straight_ref(cfg), cfg, u_prev=np.zeros(2))
    assert sol.stats["status"] == "optimal"
    ys = [x.y for x in sol.predicted]
    # steers back toward the reference over the first half of the horizon
    assert ys[5] < 0.6 * ys[0]
    assert abs(ys[-1]) < 0.05
    # steering limits are honored along the prediction
    assert all(abs(x.delta) <= cfg.delta_max + 1e-9 for x in sol.predicted)


def test_accelerating_reference_saturates_input(cfg):
    # a 1 m/s^2 speed ramp exceeds the 0.85 m/s^2 authority
    chi0 = VehicleState(0.0, 0.0, 0.0, 8.0, 0.0)
    sol = solve_nmpc(chi0, _straight_ref(cfg, a=1.0), cfg)
    assert sol.u0[0] == pytest.approx(cfg.a_max, abs=1e-9)
    assert sol.sigma > 0.0  # terminal error absorbed by the slack


def test_infeasible_from_standstill_input(cfg):
    # with the previous input pinned at zero, the rate limit caps the first
    # tick at 0.17 m/s^2; the 1 m/s^2 ramp then breaks the error contract
    chi0 = VehicleState(0.0, 0.0, 0.0, 8.0, 0.0)
    with pytest.raises(Infeasible):
        solve_nmpc(chi0, _straight_ref(cfg, a=1.0), cfg, u_prev=np.zeros(2))


def test_rate_limit_respected_on_mild_ramp(cfg):
    chi0 = VehicleState(0.0, 0.0, 0.0, 8.0, 0.0)
    sol = solve_nmpc(chi0, _straight_ref(cfg, a=0.5), cfg,
                     u_prev=np.zeros(2))
    assert sol.stats["status"] == "optimal"
    # first input exactly at the per-tick rate bound from u_prev = 0
    assert sol.u0[0] == pytest.approx(cfg.delta_a_max, abs=1e-9)
    seq = np.vstack([[0.0, 0.0], sol.inputs])
    rates = np.abs(np.diff(seq[:, 0]))
    assert rates.max() <= cfg.delta_a_max + 1e-9
    assert sol.sigma < 1e-3


def test_reference_shape_validated(cfg):
    with pytest.raises(ValueError):
        solve_nmpc(VehicleState(0, 0, 0, 8, 0), np.zeros((5, 5)), cfg)


def test_solution_determinism(cfg):
    chi0 = VehicleState(0.0, 0.25, 0.02, 8.0, 0.0)
    a = solve_nmpc(chi0, _straight_ref(cfg), cfg, u_prev=np.zeros(2))
    b = solve_nmpc(chi0, _straight_ref(cfg), cfg, u_prev=np.zeros(2))
    assert np.array_equal(a.inputs, b.inputs)
    assert a.sigma == b.sigma
