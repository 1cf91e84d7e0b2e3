"""Controllable region of a single dam when inflow can exceed discharge capacity.

Two independent routes to the same object:

* an explicit formula for the maximal controllable level: capacity minus the
  surplus water that must be absorbed over the remaining overflow window,
  computed by adaptive quadrature;
* the zero level of an auxiliary cost-to-violate function, solved as a
  first-order semi-Lagrangian recursion of the integrated distance to the
  capacity box.

Their agreement (boundary within one grid cell) is the cross-validation used
throughout the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from . import kernels
from .grids import Axis, GridSpec, ValueField
from .system import HydroSystem, capacity_distance

__all__ = [
    "ViabilityStructureError",
    "ViabilityResult",
    "overflow_window",
    "controllable_level",
    "solve_violation_cost",
    "controllable_boundary",
    "zero_level_tolerance",
    "compute_viability",
]


class ViabilityStructureError(ValueError):
    """Inflow shape outside the supported single-peak structure."""


def _require_single_dam(system: HydroSystem):
    if system.n_dams != 1:
        raise ValueError("viability analysis is defined for single-dam systems")


def overflow_window(system: HydroSystem, n_scan: int = 10_000):
    """Interval [t*, T*] where the inflow reaches or exceeds discharge capacity.

    Returns None when the inflow stays strictly below capacity (every level
    in the capacity box is then controllable at all times).  Several
    disjoint overflow intervals are rejected: the controllable-level formula
    assumes a single-peaked inflow.
    """
    _require_single_dam(system)
    beta = system.inflows[0]
    u_max = system.u1_max
    ts = np.linspace(0.0, system.horizon, n_scan)
    excess = np.asarray(beta(ts), dtype=float) - u_max
    above = excess >= -1e-12
    if not above.any():
        return None
    blocks = 1 + np.count_nonzero(np.diff(np.flatnonzero(above)) > 1)
    if blocks > 1:
        raise ViabilityStructureError(
            "inflow exceeds capacity on several disjoint intervals; the "
            "single-peak controllable-level formula does not apply"
        )
    first, last = np.flatnonzero(above)[[0, -1]]
    t_star = ts[first]
    if first > 0:
        t_star = optimize.brentq(lambda t: float(beta(t)) - u_max,
                                 ts[first - 1], ts[first], xtol=1e-12)
    big_t = ts[last]
    if last < n_scan - 1:
        big_t = optimize.brentq(lambda t: float(beta(t)) - u_max,
                                ts[last], ts[last + 1], xtol=1e-12)
    return float(t_star), float(big_t)


def controllable_level(system: HydroSystem, t: float) -> float:
    """Largest level from which the capacity constraint can still be met.

    Capacity minus the positive part of the surplus inflow integrated over
    what remains of the overflow window; clamped to the capacity box.
    """
    _require_single_dam(system)
    if not 0.0 <= t <= system.horizon + 1e-12:
        raise ValueError("time outside the planning horizon")
    window = overflow_window(system)
    y_cap = system.y_max[0]
    if window is None:
        return y_cap
    _, t_end = window
    upper = max(t_end, t)
    if upper <= t:
        return y_cap
    beta = system.inflows[0]
    surplus, _ = integrate.quad(lambda s: float(beta(s)) - system.u1_max,
                                t, upper, epsabs=1e-8, limit=200)
    return float(min(max(y_cap - max(surplus, 0.0), 0.0), y_cap))


def solve_violation_cost(system: HydroSystem, grid: GridSpec,
                         n_controls: int = 41) -> ValueField:
    """Minimal integrated distance to the capacity box, per (t, level) node.

    Zero exactly on the controllable region.  The level axis must extend
    beyond the capacity box on both sides so the positive exterior values
    are representable.
    """
    _require_single_dam(system)
    names = [ax.name for ax in grid.axes]
    if names != ["y"]:
        raise ValueError("violation-cost grid needs a single level axis 'y'")
    ax = grid.axes[0]
    y_cap = system.y_max[0]
    if not (ax.lo < 0.0 and ax.hi > y_cap):
        raise ValueError(
            "level axis must extend beyond [0, capacity] on both sides so "
            "exterior positivity is visible"
        )
    y = ax.coords()
    dt = grid.dt
    run_cost = capacity_distance(system, y[:, None]) * dt
    controls = np.linspace(0.0, system.u1_max, n_controls)
    times = grid.times()

    theta = np.zeros((grid.n_steps + 1, ax.n))
    j_idx = np.arange(ax.n)
    for n in range(grid.n_steps - 1, -1, -1):
        beta = float(system.inflows[0](times[n]))
        nxt = theta[n + 1]
        best = np.full(ax.n, np.inf)
        for u in controls:
            s = (beta - u) * dt / ax.step
            m, w, _, _ = kernels.shift_cells(float(s), ax.n)
            ja = np.clip(j_idx + m, 0, ax.n - 1)
            jb = np.clip(j_idx + m + 1, 0, ax.n - 1)
            np.minimum(best, (1.0 - w) * nxt[ja] + w * nxt[jb], out=best)
        theta[n] = best + run_cost
    return ValueField(
        grid=grid, times=times, data=theta,
        metadata={"solver": "violation_cost", "n_controls": n_controls,
                  "y_cap": y_cap},
    )


def zero_level_tolerance(grid: GridSpec, factor: float = 10.0) -> float:
    """Threshold below which the violation cost counts as zero.

    Scaled with the scheme's local truncation, ``factor * dt * dy``.
    """
    return factor * grid.dt * grid.axes[0].step


def controllable_boundary(theta_field: ValueField, system: HydroSystem,
                          tolerance: float | None = None) -> np.ndarray:
    """Largest level inside the capacity box with near-zero violation cost.

    One entry per stored time slice; NaN marks a slice with an empty zero
    level (no controllable state at that time).
    """
    if tolerance is None:
        tolerance = zero_level_tolerance(theta_field.grid)
    y = theta_field.grid.coords("y")
    y_cap = system.y_max[0]
    inside = y <= y_cap + 1e-12
    sub = theta_field.data[:, inside]
    y_in = y[inside]
    ok = sub <= tolerance
    any_ok = ok.any(axis=1)
    last = ok.shape[1] - 1 - ok[:, ::-1].argmax(axis=1)
    bound = np.where(any_ok, y_in[np.clip(last, 0, len(y_in) - 1)], np.nan)
    return bound


@dataclass
class ViabilityResult:
    t_star: float | None
    t_end: float | None
    theta_field: ValueField
    tolerance: float
    boundary_levelset: np.ndarray       # per stored time slice
    boundary_analytic: np.ndarray


def compute_viability(system: HydroSystem, grid: GridSpec,
                      n_controls: int = 41,
                      tolerance: float | None = None) -> ViabilityResult:
    """Run both routes and package them side by side."""
    window = overflow_window(system)
    theta = solve_violation_cost(system, grid, n_controls)
    tol = tolerance if tolerance is not None else zero_level_tolerance(grid)
    bound_ls = controllable_boundary(theta, system, tol)
    bound_an = np.array([controllable_level(system, t) for t in theta.times])
    return ViabilityResult(
        t_star=None if window is None else window[0],
        t_end=None if window is None else window[1],
        theta_field=theta,
        tolerance=tol,
        boundary_levelset=bound_ls,
        boundary_analytic=bound_an,
    )
