"""Reservoir topology, inflows, controls, production function and constraints.

A system is either a single dam (control = discharge rate in ``[0, u1_max]``,
production equal to the discharge) or two linked dams where dam 1 can also
pump water back up (``u1 < 0``) at an efficiency loss ``gamma > 1`` and dam 2
discharges at ``u2 in [0, u2_max]``.  Reservoir levels must stay inside the
capacity box ``K = prod_i [0, y_max_i]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Inflow",
    "HydroSystem",
    "ControlPoint",
    "ControllabilityReport",
    "inflow",
    "power_output",
    "max_power_output",
    "reservoir_drift",
    "capacity_distance",
    "check_controllability",
    "control_table",
]


@dataclass(frozen=True)
class Inflow:
    """Inflow rate as a function of time.

    ``sine_offset`` evaluates ``amplitude * sin(pi*t) + offset``; ``table``
    interpolates linearly between ``(times, values)`` samples.
    """

    kind: str = "sine_offset"
    amplitude: float = 0.0
    offset: float = 0.0
    times: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("sine_offset", "table"):
            raise ValueError(f"unknown inflow form {self.kind!r}")
        if self.kind == "table":
            if len(self.times) != len(self.values) or len(self.times) < 2:
                raise ValueError("tabulated inflow needs >= 2 (t, value) samples")
            if any(b < a for a, b in zip(self.times, self.times[1:])):
                raise ValueError("tabulated inflow times must be sorted")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "sine_offset":
            return self.amplitude * np.sin(np.pi * t) + self.offset
        return np.interp(t, self.times, self.values)


@dataclass(frozen=True)
class ControlPoint:
    """A single admissible control; ``u2`` is None for single-dam systems."""

    u1: float
    u2: float | None = None

    def as_tuple(self):
        return (self.u1,) if self.u2 is None else (self.u1, self.u2)


@dataclass(frozen=True)
class HydroSystem:
    n_dams: int
    inflows: tuple
    y_max: tuple
    u1_max: float
    u1_min: float = 0.0          # pump bound; u1 ranges over [-u1_min, u1_max]
    u2_max: float = 0.0
    gamma: float = 1.0
    horizon: float = 1.0
    beta_scan_points: int = field(default=10_000, compare=False)

    def __post_init__(self):
        if self.n_dams not in (1, 2):
            raise ValueError("n_dams must be 1 or 2")
        if len(self.inflows) != self.n_dams or len(self.y_max) != self.n_dams:
            raise ValueError("need one inflow and one capacity per dam")
        if any(y <= 0 for y in self.y_max):
            raise ValueError("reservoir capacities must be positive")
        if self.u1_max <= 0:
            raise ValueError("u1_max must be positive")
        if self.u1_min < 0:
            raise ValueError("u1_min (pump bound) must be nonnegative")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_dams == 1:
            if self.u1_min != 0:
                raise ValueError("single-dam systems have no pumping: u1_min must be 0")
        else:
            if self.gamma <= 1:
                raise ValueError("pumping loss factor gamma must be > 1")
            if self.u2_max <= 0:
                raise ValueError("two-dam systems need u2_max > 0")
        # inflows must stay nonnegative over the horizon
        ts = np.linspace(0.0, self.horizon, 2001)
        for d, beta in enumerate(self.inflows):
            if np.any(beta(ts) < 0):
                raise ValueError(f"inflow of dam {d + 1} is negative inside [0, T]")

    @classmethod
    def single_dam(cls, inflow: Inflow, y_max: float, u_max: float,
                   horizon: float) -> "HydroSystem":
        return cls(n_dams=1, inflows=(inflow,), y_max=(y_max,), u1_max=u_max,
                   horizon=horizon)

    @classmethod
    def two_dam(cls, inflows, y_max, u1_min: float, u1_max: float,
                u2_max: float, gamma: float, horizon: float) -> "HydroSystem":
        return cls(n_dams=2, inflows=tuple(inflows), y_max=tuple(y_max),
                   u1_max=u1_max, u1_min=u1_min, u2_max=u2_max, gamma=gamma,
                   horizon=horizon)

    def control_bounds(self):
        """Per-component (lo, hi) of the admissible control box U."""
        if self.n_dams == 1:
            return ((0.0, self.u1_max),)
        return ((-self.u1_min, self.u1_max), (0.0, self.u2_max))


def inflow(system: HydroSystem, dam: int, t) -> np.ndarray:
    """Inflow rate of dam ``dam`` (0-based) at time ``t`` in ``[0, T]``."""
    if dam < 0 or dam >= system.n_dams:
        raise ValueError(f"dam index {dam} out of range")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > system.horizon):
        raise ValueError("time outside the planning horizon")
    return system.inflows[dam](t)


def _check_control(system: HydroSystem, u: ControlPoint, tol: float = 1e-9):
    bounds = system.control_bounds()
    parts = u.as_tuple()
    if len(parts) != len(bounds):
        raise ValueError(f"control has {len(parts)} components, expected {len(bounds)}")
    for val, (lo, hi) in zip(parts, bounds):
        if val < lo - tol or val > hi + tol:
            raise ValueError(f"control {parts} outside admissible box {bounds}")


def _as_control(u) -> ControlPoint:
    if isinstance(u, ControlPoint):
        return u
    if np.isscalar(u):
        return ControlPoint(float(u))
    parts = tuple(float(v) for v in u)
    return ControlPoint(parts[0], parts[1] if len(parts) > 1 else None)


def power_output(system: HydroSystem, u) -> float:
    """Net electricity produced (consumed if negative) by control ``u``.

    Single dam: the discharge itself.  Two dams: ``u2 + c(u1)`` with
    ``c(u) = u`` for discharging and ``c(u) = gamma*u`` for pumping, so a
    pumped unit of water costs more energy than it later produces.
    """
    u = _as_control(u)
    _check_control(system, u)
    if system.n_dams == 1:
        return u.u1
    c1 = u.u1 if u.u1 >= 0 else system.gamma * u.u1
    return u.u2 + c1


def max_power_output(system: HydroSystem) -> float:
    """Maximum of the production function over the control box."""
    if system.n_dams == 1:
        return system.u1_max
    return system.u1_max + system.u2_max


def reservoir_drift(system: HydroSystem, t: float, u) -> np.ndarray:
    """Rate of change of each reservoir level under control ``u``.

    Dam 1 drains at ``u1``; whatever dam 1 releases (or pumps back) shows up
    with opposite sign in dam 2, so no water is created or destroyed.
    """
    u = _as_control(u)
    _check_control(system, u)
    beta1 = float(system.inflows[0](t))
    if system.n_dams == 1:
        return np.array([beta1 - u.u1])
    beta2 = float(system.inflows[1](t))
    return np.array([beta1 - u.u1, beta2 + u.u1 - u.u2])


def capacity_distance(system: HydroSystem, y) -> np.ndarray:
    """Euclidean distance from ``y`` to the capacity box, zero inside it.

    Accepts a single point or an array whose last axis indexes dams; the
    distance is computed by clamping each coordinate to ``[0, y_max_i]``.
    """
    y = np.asarray(y, dtype=float)
    caps = np.asarray(system.y_max)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape[-1] != system.n_dams:
        raise ValueError(f"expected {system.n_dams} level components, got {y.shape[-1]}")
    clamped = np.clip(y, 0.0, caps)
    return np.sqrt(np.sum((y - clamped) ** 2, axis=-1))


@dataclass(frozen=True)
class ControllabilityReport:
    holds: bool
    margin: float          # largest eta >= 0 satisfying all inequalities
    detail: str = ""


def check_controllability(system: HydroSystem,
                          n_scan: int | None = None) -> ControllabilityReport:
    """Largest margin ``eta`` by which inflows stay inside control capacity.

    Single dam: ``eta <= beta(t) <= u_max - eta`` for all ``t``.  Two dams:
    the analogous three double inequalities coupling both inflows and the
    pump/discharge bounds.  ``holds`` is True when the margin is positive,
    which guarantees every state in the capacity box admits an admissible
    control up to the horizon.
    """
    n_scan = n_scan or system.beta_scan_points
    ts = np.linspace(0.0, system.horizon, n_scan)
    b1 = np.asarray(system.inflows[0](ts), dtype=float)
    if system.n_dams == 1:
        margin = min(b1.min(), system.u1_max - b1.max())
    else:
        b2 = np.asarray(system.inflows[1](ts), dtype=float)
        tot = b1 + b2
        margin = min(
            b1.min() + system.u1_min,
            system.u1_max - b1.max(),
            b2.min() + min(system.u1_max, system.u1_min),
            system.u2_max + system.u1_min - b2.max(),
            tot.min(),
            system.u2_max - tot.max(),
        )
    margin = max(float(margin), 0.0)
    holds = margin > 0.0
    detail = "controllable" if holds else "inflow exceeds control capacity somewhere"
    return ControllabilityReport(holds=holds, margin=float(margin), detail=detail)


def control_table(system: HydroSystem, n_per_dim: int = 21) -> np.ndarray:
    """Uniform discretisation of the control box, endpoints included.

    Returns an array of shape ``(n_controls, n_dams)``; for two dams the
    rows enumerate ``u1`` (slow) by ``u2`` (fast), both ascending, which
    fixes the deterministic tie-break order of the solvers.
    """
    if n_per_dim < 2:
        raise ValueError("need at least 2 control points per dimension")
    axes = [np.linspace(lo, hi, n_per_dim) for lo, hi in system.control_bounds()]
    if len(axes) == 1:
        return axes[0][:, None]
    g1, g2 = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()])


def power_output_table(system: HydroSystem, controls: np.ndarray) -> np.ndarray:
    """Vectorised production function over a control table."""
    u1 = controls[:, 0]
    if system.n_dams == 1:
        return u1.copy()
    c1 = np.where(u1 >= 0, u1, system.gamma * u1)
    return controls[:, 1] + c1
