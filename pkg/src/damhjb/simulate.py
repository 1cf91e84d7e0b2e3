"""Monte Carlo replay of extracted feedback policies.

Prices are stepped with the truncated Euler scheme, reservoir levels with
explicit Euler, and the payoff is accumulated with the left-endpoint rule to
match the piecewise-constant-in-time policy.  Controls come from the nearest
policy node (interpolating across a bang-bang switching surface would
produce controls no node ever chose).  For level-set policies the budget
coordinate rides along the same Brownian increments with the stored
auxiliary control, so lookups stay on the optimal level set.

Paths use independent random substreams, making reports reproducible and
the loop embarrassingly parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import prices
from . import system as hydro
from .grids import FeedbackPolicy

__all__ = ["SimConfig", "SimReport", "Verdict", "simulate_policy",
           "compare_values"]


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 20_000
    dt_sim: float = 1e-3
    seed: int = 0
    policy_source: str = "hjb"          # "hjb" or "levelset"
    violation_tolerance: float | None = None
    keep_samples: bool = False

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("need at least one path")
        if self.dt_sim <= 0:
            raise ValueError("dt_sim must be positive")
        if self.policy_source not in ("hjb", "levelset"):
            raise ValueError("policy_source must be 'hjb' or 'levelset'")


@dataclass
class SimReport:
    value_mean: float
    value_stderr: float
    max_violation: float
    violation_frequency: float
    n_paths: int
    n_steps: int
    infeasible_lookup_frequency: float
    payoffs: np.ndarray | None = None

    def __post_init__(self):
        if self.value_stderr < 0 or self.max_violation < 0:
            raise ValueError("report statistics must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "value_mean": self.value_mean,
            "value_stderr": self.value_stderr,
            "max_violation": self.max_violation,
            "violation_frequency": self.violation_frequency,
            "infeasible_lookup_frequency": self.infeasible_lookup_frequency,
            "n_paths": self.n_paths,
            "n_steps": self.n_steps,
        }


def _default_violation_tolerance(system: hydro.HydroSystem, dt_sim: float) -> float:
    ts = np.linspace(0.0, system.horizon, 501)
    beta_max = max(float(np.max(system.inflows[d](ts)))
                   for d in range(system.n_dams))
    speed = system.u1_max + (system.u2_max if system.n_dams == 2 else 0.0)
    return (speed + beta_max) * dt_sim


def _nearest_indices(policy: FeedbackPolicy, values, axis_pos: int) -> np.ndarray:
    ax = policy.grid.axes[axis_pos]
    idx = np.rint((values - ax.lo) / ax.step).astype(np.int64)
    return np.clip(idx, 0, ax.n - 1)


def simulate_policy(model: prices.PriceModel, system: hydro.HydroSystem,
                    policy: FeedbackPolicy, start, config: SimConfig) -> SimReport:
    """Replay a feedback policy from ``start = (t0, x0, y0[, y20])``.

    A lookup that lands on an infeasible node counts as a violation event
    and the path continues with the safety rule ``u = clamp(beta(t), U)``,
    exposing the defect instead of crashing.
    """
    start = tuple(float(s) for s in start)
    t0, x0 = start[0], start[1]
    y0 = np.array(start[2:], dtype=float)
    if len(y0) != system.n_dams:
        raise ValueError(f"start point needs {system.n_dams} level component(s)")
    if x0 < 0:
        raise ValueError("start price must be nonnegative")
    if float(hydro.capacity_distance(system, y0)) > 0:
        raise ValueError("start level outside the capacity box")

    levelset_mode = config.policy_source == "levelset"
    extras = policy.extras
    if levelset_mode and ("alpha" not in extras or "feasible" not in extras):
        raise ValueError("policy carries no level-set companion data")

    dt = config.dt_sim
    n_steps = int(round((system.horizon - t0) / dt))
    if n_steps < 1:
        raise ValueError("start time too close to the horizon")
    times = t0 + dt * np.arange(n_steps)
    grid_dt = policy.times[1] - policy.times[0] if len(policy.times) > 1 else \
        system.horizon
    if dt > grid_dt + 1e-12:
        raise ValueError("dt_sim must not exceed the policy time step")
    tol = config.violation_tolerance
    if tol is None:
        tol = _default_violation_tolerance(system, dt)

    n_paths = config.n_paths
    noise = prices.path_noise(config.seed, n_paths, n_steps)
    x = np.full(n_paths, x0)
    y = np.tile(y0, (n_paths, 1))
    payoff = np.zeros(n_paths)
    max_violation = 0.0
    violation_steps = 0
    infeasible_steps = 0
    sqdt = math.sqrt(dt)

    n_y_axes = system.n_dams
    if levelset_mode:
        k0 = policy.nearest_time_index(t0)
        node0 = policy.nearest_node((x0, *y0))
        if not extras["feasible"][(k0, *node0)]:
            raise ValueError("start point is not controllable for this policy")
        z = np.full(n_paths, float(extras["zstar"][(k0, *node0)]))
    rate_cap = hydro.max_power_output(system)

    for k in range(n_steps):
        t = times[k]
        kt = policy.nearest_time_index(t)
        ix = _nearest_indices(policy, x, 0)
        iy = [
            _nearest_indices(policy, y[:, d], 1 + d) for d in range(n_y_axes)
        ]
        node = (kt, ix, *iy)
        uidx = policy.indices[node]
        u = policy.controls[uidx]                      # (n_paths, n_dams)

        beta = np.array([float(system.inflows[d](t)) for d in range(n_y_axes)])
        if levelset_mode:
            bad = ~extras["feasible"][node]
            if bad.any():
                infeasible_steps += int(bad.sum())
                safe = np.empty((int(bad.sum()), n_y_axes))
                lo_hi = system.control_bounds()
                for d in range(n_y_axes):
                    safe[:, d] = np.clip(beta[d], lo_hi[d][0], lo_hi[d][1])
                u = u.copy()
                u[bad] = safe
            alpha = np.where(bad, 0.0, extras["alpha"][node])

        if system.n_dams == 1:
            kappa = u[:, 0]
            dy = (beta[0] - u[:, 0])[:, None]
        else:
            c1 = np.where(u[:, 0] >= 0, u[:, 0], system.gamma * u[:, 0])
            kappa = u[:, 1] + c1
            dy = np.column_stack([beta[0] - u[:, 0],
                                  beta[1] + u[:, 0] - u[:, 1]])

        payoff += x * kappa * dt
        if levelset_mode:
            z += -x * (kappa - rate_cap) * dt + alpha * sqdt * noise[:, k]
        x = prices.simulate_step(model, t, x, dt, noise[:, k])
        y = y + dy * dt

        d_k = hydro.capacity_distance(system, y)
        step_max = float(d_k.max())
        if step_max > max_violation:
            max_violation = step_max
        violating = d_k > tol
        if levelset_mode:
            violating = violating | bad
        violation_steps += int(np.count_nonzero(violating))

    mean = float(payoff.mean())
    stderr = float(payoff.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    total_steps = n_paths * n_steps
    return SimReport(
        value_mean=mean,
        value_stderr=stderr,
        max_violation=max_violation,
        violation_frequency=violation_steps / total_steps,
        infeasible_lookup_frequency=infeasible_steps / total_steps,
        n_paths=n_paths,
        n_steps=n_steps,
        payoffs=payoff if config.keep_samples else None,
    )


@dataclass
class Verdict:
    passed: bool
    within_tolerance: bool
    dominance_ok: bool
    mc_mean: float
    mc_stderr: float
    pde_value: float
    detail: str

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("passed", "within_tolerance", "dominance_ok", "mc_mean",
                 "mc_stderr", "pde_value", "detail")}


def compare_values(report: SimReport, pde_value: float, rel_tol: float = 0.05,
                   upper_rel_tol: float = 0.01) -> Verdict:
    """Check a replay mean against the PDE value at the same start point.

    Two-sided: the mean must lie within three standard errors plus a
    relative tolerance of the PDE value.  One-sided: a simulated suboptimal
    feedback cannot beat the value function, so the mean must not exceed it
    beyond three standard errors plus a small discretisation allowance.
    """
    gap = abs(report.value_mean - pde_value)
    band = 3.0 * report.value_stderr + rel_tol * abs(pde_value)
    within = gap <= band
    upper = report.value_mean - pde_value
    upper_band = 3.0 * report.value_stderr + upper_rel_tol * abs(pde_value)
    dominance = upper <= upper_band
    detail = (f"|{report.value_mean:.6g} - {pde_value:.6g}| = {gap:.3g} "
              f"vs band {band:.3g}; upper excess {upper:.3g} vs "
              f"{upper_band:.3g}")
    return Verdict(passed=within and dominance, within_tolerance=within,
                   dominance_ok=dominance, mc_mean=report.value_mean,
                   mc_stderr=report.value_stderr, pde_value=pde_value,
                   detail=detail)
