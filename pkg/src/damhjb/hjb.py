"""Monotone semi-Lagrangian solver for the state-constrained dispatch problem.

Backward value iteration from a zero terminal condition.  Each step moves
the price along its drift plus/minus one standard deviation (two-point
quadrature of the degenerate second-order term) and the reservoir levels
along their controlled drift, interpolates the next slice at those feet,
adds the running revenue, and maximises over a discretised control box.
Controls whose reservoir characteristic would leave the capacity box within
the step are excluded at that node, which is how the state constraint enters
the scheme; under the controllability margin every node keeps at least one
admissible control.
"""

from __future__ import annotations

import time as _time
import warnings

import numpy as np

from . import kernels, prices, system as hydro
from .grids import FeedbackPolicy, GridSpec, ValueField

__all__ = [
    "ControllabilityError",
    "sl_step_constrained",
    "solve_constrained_hjb",
    "max_rate_envelope",
]


class ControllabilityError(RuntimeError):
    """The inflow exceeds control capacity, so the direct constrained solve
    is not well posed; use the level-set route instead."""


def _validate_grid(system: hydro.HydroSystem, grid: GridSpec):
    names = [ax.name for ax in grid.axes]
    expected = ["x", "y"] if system.n_dams == 1 else ["x", "y1", "y2"]
    if names != expected:
        raise ValueError(f"grid axes {names} do not match system axes {expected}")
    for ax, cap in zip(grid.axes[1:], system.y_max):
        if ax.lo != 0.0 or abs(ax.hi - cap) > 1e-12:
            raise ValueError(
                f"axis {ax.name!r} must cover exactly [0, {cap}] for the "
                "constrained solve"
            )
    if abs(grid.horizon - system.horizon) > 1e-12:
        raise ValueError("grid horizon does not match system horizon")


def _control_shifts(system: hydro.HydroSystem, controls: np.ndarray, t: float,
                    grid: GridSpec):
    """Per-control reservoir shifts in cells plus admissible node ranges."""
    dt = grid.dt
    out = []
    for dam, ax in enumerate(grid.axes[1:]):
        beta = float(system.inflows[dam](t))
        if dam == 0:
            speed = beta - controls[:, 0]
        else:
            speed = beta + controls[:, 0] - controls[:, 1]
        cells = speed * dt / ax.step
        m = np.empty(len(controls), dtype=np.int64)
        w = np.empty(len(controls))
        lo = np.empty(len(controls), dtype=np.int64)
        hi = np.empty(len(controls), dtype=np.int64)
        for c, s in enumerate(cells):
            m[c], w[c], lo[c], hi[c] = kernels.shift_cells(float(s), ax.n)
        out.append((m, w, lo, hi))
    return out


def sl_step_constrained(v_next: np.ndarray, t: float, model: prices.PriceModel,
                        system: hydro.HydroSystem, grid: GridSpec,
                        controls: np.ndarray):
    """One backward step of the constrained scheme.

    Returns the value slice at ``t`` and the argmax control index per node.
    Raises if some node has no admissible control, which cannot happen when
    the controllability margin is positive.
    """
    x = grid.coords("x")
    dt = grid.dt
    idx_p, w_p, idx_m, w_m = kernels.price_feet(
        x, prices.drift(model, t, x), prices.diffusion(model, t, x), dt)
    ap = kernels.gather_price_axis(v_next, idx_p, w_p)
    am = kernels.gather_price_axis(v_next, idx_m, w_m)

    kappa_vals = hydro.power_output_table(system, controls)
    payoff = dt * x[:, None] * kappa_vals[None, :]

    shifts = _control_shifts(system, controls, t, grid)
    if system.n_dams == 1:
        (m, w, lo, hi), = shifts
        best, arg = kernels.constrained_step_2d(ap, am, m, w, lo, hi, payoff)
    else:
        (m1, w1, lo1, hi1), (m2, w2, lo2, hi2) = shifts
        best, arg = kernels.constrained_step_3d(
            ap, am, m1, w1, lo1, hi1, m2, w2, lo2, hi2, payoff)

    if np.any(arg < 0):
        node = np.argwhere(arg < 0)[0]
        coords = [float(grid.axes[d].coords()[node[d]]) for d in range(len(node))]
        raise ControllabilityError(
            f"no admissible control at t={t:.6g}, node {tuple(coords)}; "
            "the state constraint cannot be met from there"
        )
    return best, arg


def solve_constrained_hjb(model: prices.PriceModel, system: hydro.HydroSystem,
                          grid: GridSpec, n_controls: int = 21,
                          export_times=None, enforce_controllability: bool = True):
    """Backward recursion of the constrained scheme from a zero terminal value.

    Returns the value field (slices at ``export_times``, default all time
    nodes for a single dam and ``{0, T}`` for two dams) and the feedback
    policy at every time step.
    """
    _validate_grid(system, grid)
    report = hydro.check_controllability(system)
    if enforce_controllability and not report.holds:
        raise ControllabilityError(
            "inflow exceeds control capacity (margin 0); the constrained HJB "
            "is only solved under a positive controllability margin"
        )

    controls = hydro.control_table(system, n_controls)
    times = grid.times()
    dt = grid.dt

    max_speed = max(
        float(np.max(np.abs(system.inflows[d](np.linspace(0, system.horizon, 501)))))
        + system.u1_max + (system.u2_max if system.n_dams == 2 else 0.0)
        for d in range(system.n_dams)
    )
    finest = min(ax.step for ax in grid.axes[1:])
    if max_speed * dt > 0.1 * (grid.axes[1].hi - grid.axes[1].lo):
        warnings.warn("time step moves reservoir characteristics across more "
                      "than 10% of the domain per step; results may be coarse")

    if export_times is None:
        export_times = list(times) if system.n_dams == 1 else [0.0, grid.horizon]
    export_times = sorted(set(float(t) for t in export_times))

    shape = grid.shape
    v = np.zeros(shape)
    stored = {}
    if np.isclose(times[-1], export_times[-1]):
        stored[len(times) - 1] = v.copy()
    policy_idx = np.zeros((grid.n_steps, *shape), dtype=np.int16)

    tic = _time.perf_counter()
    export_set = {int(round(t / dt)) for t in export_times}
    for n in range(grid.n_steps - 1, -1, -1):
        v, arg = sl_step_constrained(v, times[n], model, system, grid, controls)
        policy_idx[n] = arg
        if n in export_set:
            stored[n] = v.copy()
    wall = _time.perf_counter() - tic

    keys = sorted(stored)
    field = ValueField(
        grid=grid,
        times=times[keys],
        data=np.stack([stored[k] for k in keys]),
        metadata={
            "solver": "constrained_hjb",
            "model": vars(model).copy(),
            "n_controls": n_controls,
            "rate_cap": hydro.max_power_output(system),
            "controllability_margin": report.margin,
            "wall_time_s": wall,
            "backend": kernels.BACKEND,
            "finest_cell": finest,
        },
    )
    policy = FeedbackPolicy(
        grid=grid,
        times=times[:-1],
        controls=controls,
        indices=policy_idx,
        metadata={"source": "hjb", "n_controls": n_controls},
    )
    return field, policy


def max_rate_envelope(model: prices.PriceModel, rate_cap: float, grid: GridSpec):
    """Exact value of the discrete scheme when always paid at the cap rate.

    The scheme preserves affine functions of the price, so this reduces to
    a two-coefficient recursion; it bounds every solver value from above and
    is the discrete counterpart of the accumulated expected price.
    Returns ``(times, intercept, slope)``.
    """
    dt = grid.dt
    n = grid.n_steps
    p = np.zeros(n + 1)
    q = np.zeros(n + 1)
    for k in range(n - 1, -1, -1):
        if model.kind == "gbm":
            p[k] = p[k + 1]
            q[k] = q[k + 1] * (1.0 + model.b * dt) + rate_cap * dt
        else:
            p[k] = p[k + 1] + q[k + 1] * model.a * dt
            q[k] = q[k + 1] * (1.0 - model.b * dt) + rate_cap * dt
    return grid.times(), p, q
