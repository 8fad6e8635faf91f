"""Static objective terms of the local planner cost.

Speed tracking, road-boundary repulsion, lane preference and comfort are all
smooth scalar fields; their analytic derivatives are provided alongside so the
optimizer can assemble exact gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ReferencePath


class ConfigError(Exception):
    """A configuration value violates an invariant or a startup check."""


@dataclass(frozen=True)
class PotentialConfig:
    """Shape parameters and weights of the static cost terms."""

    eta: float = 1.2
    a_l_max: float = 2.0
    v_des: float = 12.0
    K_v: float = 1.0
    K_b: float = 50.0
    K_l: float = 5.0
    K_c: float = 2.0

    def __post_init__(self):
        if not self.eta > 1.0:
            raise ConfigError("eta must be > 1")
        if not self.a_l_max > 0:
            raise ConfigError("a_l_max must be positive")
        for name in ("K_v", "K_b", "K_l", "K_c"):
            w = getattr(self, name)
            if not (np.isfinite(w) and w >= 0):
                raise ConfigError(f"{name} must be finite and non-negative")


def effective_speed(v_des, v_max, kappa_eff, a_l_max=2.0):
    """Most restrictive of desired speed, legal limit and the comfort speed
    sqrt(a_l_max / |kappa|); the comfort term is +inf on straight segments."""
    kappa = np.abs(np.asarray(kappa_eff, dtype=float))
    with np.errstate(divide="ignore"):
        v_comfort = np.sqrt(np.where(kappa > 0.0, a_l_max / np.where(kappa > 0.0, kappa, 1.0), np.inf))
    return np.minimum(np.minimum(v_des, v_max), v_comfort)


def speed_cost(v, v_bar):
    return (np.asarray(v, dtype=float) - v_bar) ** 2


def boundary_potential(h_l, h_r, eta):
    """Superposed left/right Gaussian-profile edge repulsion."""
    return np.exp(-((eta * np.asarray(h_l)) ** 4)) + np.exp(-((eta * np.asarray(h_r)) ** 4))


def boundary_potential_grad(h_l, h_r, eta):
    """(dW/dh_l, dW/dh_r)."""
    h_l = np.asarray(h_l, dtype=float)
    h_r = np.asarray(h_r, dtype=float)
    gl = -4.0 * eta * (eta * h_l) ** 3 * np.exp(-((eta * h_l) ** 4))
    gr = -4.0 * eta * (eta * h_r) ** 3 * np.exp(-((eta * h_r) ** 4))
    return gl, gr


def lane_potential(h_c):
    """Sigmoid pull toward the rightmost free lane; low for h_c >> 0."""
    return 1.0 / (1.0 + np.exp(np.asarray(h_c, dtype=float)))


def lane_potential_grad(h_c):
    w = lane_potential(h_c)
    return -w * (1.0 - w)


def comfort_cost(nu, omega):
    """Squared lateral acceleration of the point-mass model."""
    return (np.asarray(nu, dtype=float) * omega) ** 2


def comfort_cost_grad(nu, omega):
    """(dW/dnu, dW/domega)."""
    nu = np.asarray(nu, dtype=float)
    omega = np.asarray(omega, dtype=float)
    return 2.0 * nu * omega ** 2, 2.0 * nu ** 2 * omega


def lateral_cost_profile(d, path: ReferencePath, cfg: PotentialConfig):
    """Combined weighted lateral cost K_b*W_b + K_l*W_l as a function of d."""
    d = np.asarray(d, dtype=float)
    h_l = path.left_edge_offset - d
    h_r = d - path.right_edge_offset
    h_c = (path.right_edge_offset + path.lane_width) - d
    return cfg.K_b * boundary_potential(h_l, h_r, cfg.eta) + cfg.K_l * lane_potential(h_c)


def verify_lane_centering(path: ReferencePath, cfg: PotentialConfig,
                          tol: float = 0.45):
    """Startup check of the implicit lane-centering construction.

    The superposed boundary and lane potentials must have their minimum
    inside the rightmost lane, within ``tol`` lane-widths of its center.
    With eta > 1 the boundary field is essentially flat away from the edges,
    so the achievable minimum sits slightly right of the exact lane center;
    the check bounds that offset instead of demanding exact centering.

    Returns the minimizing lateral offset; raises ConfigError on failure.
    """
    lane_lo = path.right_edge_offset
    lane_hi = path.right_edge_offset + path.lane_width
    grid = np.linspace(lane_lo + 0.05, lane_hi - 0.05, 2001)
    cost = lateral_cost_profile(grid, path, cfg)
    d_min = float(grid[np.argmin(cost)])
    center = path.rightmost_lane_center
    if abs(d_min - center) > tol * path.lane_width:
        raise ConfigError(
            f"lateral cost minimum at d={d_min:.2f} is {abs(d_min - center):.2f} m "
            f"from the rightmost lane center {center:.2f}; retune eta/K_b/K_l")
    return d_min
