"""Reachable-set propagation and the time-varying obstacle field."""

import math

import numpy as np
import pytest

from tvapf.prediction import (InvalidBounds, NoSolution, ObstacleState,
                              TvapfParams, UncertainForecast, calibrate_alphas,
                              propagate_obstacle, total_obstacle_field,
                              tvapf_grad, tvapf_scales, tvapf_value)

TABLE_BOUNDS = {"v_bounds": (0.0, 12.5), "a_bounds": (-0.9, 0.9)}


def test_state_validation():
    with pytest.raises(InvalidBounds):
        ObstacleState(0, 0, 3, v_bounds=(5, 2), a_bounds=(-1, 1))
    with pytest.raises(InvalidBounds):
        ObstacleState(0, 0, 3, v_bounds=(-1, 5), a_bounds=(-1, 1))
    with pytest.raises(InvalidBounds):
        ObstacleState(0, 0, 3, v_bounds=(0, 5), a_bounds=(1, -1))
    with pytest.raises(InvalidBounds):
        ObstacleState(0, 0, 9, v_bounds=(0, 5), a_bounds=(-1, 1))
    with pytest.raises(InvalidBounds):
        ObstacleState(0, 0, 3, v_bounds=(0, 5), a_bounds=(-1, 1), direction=2)


def test_params_validation():
    with pytest.raises(ValueError):
        TvapfParams(c=3)
    with pytest.raises(ValueError):
        TvapfParams(c=0)
    with pytest.raises(ValueError):
        TvapfParams(sigma_s=-1.0)
    with pytest.raises(ValueError):
        TvapfParams(epsilon_o=0.0)
    with pytest.raises(ValueError):
        TvapfParams(alpha_s=-2.0)


# -- propagation -------------------------------------------------------------


def test_two_step_spread():
    o = ObstacleState(s_o=100.0, d_o=-2.0, v_o=3.0, **TABLE_BOUNDS)
    fc = propagate_obstacle(o, 0.5, 10)
    # position updates before velocity diverges: no spread after one step
    assert fc.delta_s[0] == 0.0
    assert fc.delta_s[1] == 0.0
    # after two steps the spread is T^2 * (a_max - a_min)
    assert fc.delta_s[2] == pytest.approx(0.5 ** 2 * 1.8, abs=1e-12)
    assert fc.s_center[1] == pytest.approx(100.0 + 0.5 * 3.0)


def test_degenerate_acceleration_bounds():
    o = ObstacleState(s_o=50.0, d_o=2.0, v_o=4.0, v_bounds=(0, 12.5),
                      a_bounds=(0.0, 0.0))
    fc = propagate_obstacle(o, 0.5, 20)
    assert np.all(fc.delta_s == 0.0)
    assert np.allclose(fc.s_center, 50.0 + 0.5 * 4.0 * np.arange(21))


def test_velocity_saturation():
    o = ObstacleState(s_o=0.0, d_o=0.0, v_o=12.5, **TABLE_BOUNDS)
    fc = propagate_obstacle(o, 0.5, 20)
    # the upper rollout is clamped at v_max, so s_max grows linearly
    assert np.allclose(np.diff(fc.s_max), 0.5 * 12.5)


def test_oncoming_direction():
    o = ObstacleState(s_o=500.0, d_o=2.0, v_o=6.0, direction=-1,
                      **TABLE_BOUNDS)
    fc = propagate_obstacle(o, 0.5, 20)
    assert fc.s_center[-1] < 500.0
    assert np.all(fc.s_min <= fc.s_center + 1e-12)
    assert np.all(fc.s_center <= fc.s_max + 1e-12)


def test_spread_monotone_and_bounded():
    o = ObstacleState(s_o=0.0, d_o=0.0, v_o=5.0, v_bounds=(2.0, 8.0),
                      a_bounds=(-0.5, 0.5))
    fc = propagate_obstacle(o, 0.5, 70)
    assert np.all(np.diff(fc.delta_s) >= -1e-12)
    assert fc.delta_s[-1] <= 70 * 0.5 * (8.0 - 2.0) + 1e-9
    # center/spread are consistent with the bounds
    assert np.allclose(fc.s_center, 0.5 * (fc.s_min + fc.s_max))
    assert np.allclose(fc.delta_s, fc.s_max - fc.s_min)


def test_propagate_validation():
    o = ObstacleState(s_o=0.0, d_o=0.0, v_o=3.0, **TABLE_BOUNDS)
    with pytest.raises(ValueError):
        propagate_obstacle(o, 0.5, 0)
    with pytest.raises(ValueError):
        propagate_obstacle(o, 0.0, 10)


# -- field shape -------------------------------------------------------------


def _flat_forecast(s_o=200.0, d_o=-2.0, steps=10):
    n = steps + 1
    z = np.zeros(n)
    return UncertainForecast(s_min=np.full(n, s_o), s_max=np.full(n, s_o),
                             s_center=np.full(n, s_o), delta_s=z, d_o=d_o)


def test_scales_with_explicit_alphas():
    p = TvapfParams(sigma_s=10.0, sigma_d=1.0, l_W=4.0, alpha_s=2.0,
                    alpha_d=1.0)
    gamma_s, gamma_d = tvapf_scales(_flat_forecast(), 0, p)
    assert float(gamma_s) == pytest.approx(5.0)
    assert float(gamma_d) == pytest.approx(5.0)


def test_calibrated_edge_condition():
    # after calibration the field equals edge_value at the safety-zone edge
    for edge in (0.1, math.exp(-1.0)):
        for delta_s in (0.0, 25.0):
            p = calibrate_alphas(TvapfParams(edge_value=edge), delta_s=delta_s)
            n = 3
            fc = UncertainForecast(
                s_min=np.full(n, 100.0 - delta_s / 2),
                s_max=np.full(n, 100.0 + delta_s / 2),
                s_center=np.full(n, 100.0),
                delta_s=np.full(n, delta_s), d_o=-2.0)
            w_lon = tvapf_value(100.0 + delta_s / 2 + p.sigma_s, -2.0, fc, 0, p)
            assert float(w_lon) == pytest.approx(edge, rel=1e-12)
            w_lat = tvapf_value(100.0, -2.0 + p.l_W / 2 + p.sigma_d, fc, 0, p)
            assert float(w_lat) == pytest.approx(edge, rel=1e-12)


def test_calibrate_alphas_no_solution():
    with pytest.raises(NoSolution):
        calibrate_alphas(TvapfParams(edge_value=1.0))


def test_auto_calibration_default_edge():
    # without explicit alphas the scales are derived from edge_value directly
    p = TvapfParams()  # edge_value = e^-1 -> unit root for c = 4
    fc = _flat_forecast()
    gamma_s, gamma_d = tvapf_scales(fc, 0, p)
    assert float(gamma_s) == pytest.approx(p.sigma_s)
    assert float(gamma_d) == pytest.approx(0.5 * p.l_W + p.sigma_d)
    w = tvapf_value(200.0 + p.sigma_s, -2.0, fc, 0, p)
    assert float(w) == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_field_peak_and_decay():
    p = TvapfParams()
    fc = _flat_forecast()
    assert float(tvapf_value(200.0, -2.0, fc, 0, p)) == pytest.approx(1.0)
    gamma_s, _ = tvapf_scales(fc, 0, p)
    assert float(tvapf_value(200.0 + float(gamma_s), -2.0, fc, 0, p)) == \
        pytest.approx(math.exp(-1.0))
    assert float(tvapf_value(200.0 + 1e4, -2.0, fc, 0, p)) == 0.0
    # even symmetry in both axes
    for ds, dd in ((7.0, 0.0), (0.0, 1.3), (4.0, 2.0)):
        assert float(tvapf_value(200 + ds, -2 + dd, fc, 0, p)) == \
            pytest.approx(float(tvapf_value(200 - ds, -2 - dd, fc, 0, p)))
    # values stay in (0, 1]
    s = np.linspace(100, 300, 50)
    w = tvapf_value(s, -1.0, fc, 0, p)
    assert np.all((w >= 0.0) & (w <= 1.0))


def test_superlevel_sets_compact():
    p = TvapfParams()
    o = ObstacleState(s_o=300.0, d_o=-2.0, v_o=4.0, v_bounds=(1.0, 8.0),
                      a_bounds=(-0.5, 0.5))
    fc = propagate_obstacle(o, 0.5, 30)
    rng = np.random.default_rng(17)
    for j in (0, 10, 30):
        gamma_s, gamma_d = tvapf_scales(fc, j, p)
        for eps in (0.05, 0.3, 0.8):
            half_s = float(gamma_s) * (-math.log(eps)) ** (1.0 / p.c)
            half_d = float(gamma_d) * (-math.log(eps)) ** (1.0 / p.c)
            s = rng.uniform(fc.s_center[j] - 300, fc.s_center[j] + 300, 400)
            d = rng.uniform(-10, 10, 400)
            w = tvapf_value(s, d, fc, j, p)
            inside = w >= eps
            assert np.all(np.abs(s[inside] - fc.s_center[j])
                          <= half_s + 1e-9)
            assert np.all(np.abs(d[inside] - fc.d_o) <= half_d + 1e-9)


def test_total_field_superposition():
    p = TvapfParams()
    fc = _flat_forecast()
    assert float(total_obstacle_field(123.0, 0.0, [], 0, p)) == 0.0
    assert float(total_obstacle_field(200.0, -2.0, [fc], 0, p)) == \
        pytest.approx(1.0)
    assert float(total_obstacle_field(200.0, -2.0, [fc, fc], 0, p)) == \
        pytest.approx(2.0)


def test_field_gradient_matches_finite_differences():
    p = TvapfParams()
    o = ObstacleState(s_o=150.0, d_o=-2.0, v_o=5.0, v_bounds=(2, 8),
                      a_bounds=(-0.4, 0.4))
    fc = propagate_obstacle(o, 0.5, 20)
    rng = np.random.default_rng(23)
    h = 1e-6
    for _ in range(60):
        j = int(rng.integers(0, 21))
        gamma_s, gamma_d = tvapf_scales(fc, j, p)
        # sample inside the curved region, away from the flat tails
        s = fc.s_center[j] + rng.uniform(-1.3, 1.3) * float(gamma_s)
        d = fc.d_o + rng.uniform(-1.3, 1.3) * float(gamma_d)
        gs, gd = tvapf_grad(s, d, fc, j, p)
        fs = (tvapf_value(s + h, d, fc, j, p)
              - tvapf_value(s - h, d, fc, j, p)) / (2 * h)
        fd = (tvapf_value(s, d + h, fc, j, p)
              - tvapf_value(s, d - h, fc, j, p)) / (2 * h)
        assert float(gs) == pytest.approx(float(fs), rel=1e-5, abs=1e-9)
        assert float(gd) == pytest.approx(float(fd), rel=1e-5, abs=1e-9)
