"""Augmented unconstrained solver and reconstruction of the constrained value.

The capacity constraint is removed by tracking an extra budget coordinate
``z``: a running account that pays out the shortfall of the chosen production
below the cap and can be hedged with an auxiliary control ``alpha`` driven by
the same Brownian motion as the price.  The augmented value ``W`` (an
expectation of the positive terminal budget plus the integrated distance to
the capacity box) is nonnegative, nondecreasing and 1-Lipschitz in ``z``, and
vanishes exactly where the original problem is feasible with value at least
``z`` plus the accumulated expected price.  The constrained value is then

    V(t, x, y) = sup{ z <= 0 : W(t, x, y, z) = 0 } + G(t, x)

with ``G`` the closed-form accumulated expected price at the cap rate.
Nodes where no ``z <= 0`` reaches the zero level are not controllable and
are reported as infeasible rather than given a value.

The scheme moves price and budget with the same noise sign (they share the
Brownian), which is what realises the cross second-order term; the budget
axis continues with slope one above its top node and constant below the
bottom.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import kernels, prices
from . import system as hydro
from .grids import Axis, FeedbackPolicy, GridSpec, ValueField

__all__ = [
    "AugmentedGrid",
    "shifted_payoff_rate",
    "sl_step_augmented",
    "solve_levelset_value",
    "default_eps_w",
    "reconstruct_slice",
    "reconstruct_value",
    "reconstruct_feedback",
    "ReconstructionResult",
    "LevelsetSolution",
    "solve_levelset",
]


@dataclass(frozen=True)
class AugmentedGrid:
    """Grid over (price, levels..., budget) plus the auxiliary control axis."""

    x_axis: Axis
    y_axes: tuple
    z_axis: Axis
    alpha_axis: Axis
    n_steps: int
    horizon: float
    # the auxiliary control tracks a martingale whose size is proportional
    # to the price, so by default its grid scales per price row (the stated
    # alpha bound applies at the top of the price axis); a single global
    # grid would waste most of its resolution at low prices
    alpha_price_scaled: bool = True

    def __post_init__(self):
        if self.x_axis.lo != 0.0:
            raise ValueError("price axis must start at 0")
        # the reconstruction scans z <= 0, so 0 must be a grid node
        pos = -self.z_axis.lo / self.z_axis.step
        if abs(pos - round(pos)) > 1e-9 or not (self.z_axis.lo < 0.0 <= self.z_axis.hi):
            raise ValueError("budget axis must contain 0 as a grid node")
        if round(pos) > self.z_axis.n - 2:
            raise ValueError("budget axis needs at least one node above 0")
        if self.alpha_axis.n < 3:
            raise ValueError("auxiliary control grid needs at least 3 points")
        if abs(self.alpha_axis.lo + self.alpha_axis.hi) > 1e-12 or self.alpha_axis.n % 2 == 0:
            raise ValueError("auxiliary control grid must be symmetric about 0 "
                             "and contain 0 (odd point count)")

    @property
    def z0_index(self) -> int:
        return int(round(-self.z_axis.lo / self.z_axis.step))

    @property
    def spatial_axes(self) -> tuple:
        return (self.x_axis, *self.y_axes)

    @property
    def shape(self) -> tuple:
        return tuple(ax.n for ax in (self.x_axis, *self.y_axes, self.z_axis))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def field_grid(self) -> GridSpec:
        return GridSpec(axes=(self.x_axis, *self.y_axes, self.z_axis),
                        n_steps=self.n_steps, horizon=self.horizon)

    def base_grid(self) -> GridSpec:
        return GridSpec(axes=self.spatial_axes, n_steps=self.n_steps,
                        horizon=self.horizon)

    @classmethod
    def create(cls, model: prices.PriceModel, system: hydro.HydroSystem,
               n_x: int = 101, x_max: float = 20.0, n_y: int = 101,
               n_z: int = 81, n_alpha: int = 41, n_steps: int = 200,
               y_pad_frac: float = 0.25, z_pad_frac: float = 0.1,
               alpha_max: float | None = None,
               alpha_max_factor: float = 2.0,
               alpha_price_scaled: bool = True) -> "AugmentedGrid":
        """Build the default augmented grid for a system and price model.

        The budget range is [-G(0, x_max), ~z_pad_frac * G(0, x_max)], since
        the reconstructed optimum lives in [-G, 0]; the small positive pad
        anchors the affine-in-z behaviour at the top.  Level axes extend a
        fraction beyond the capacity box so exterior positivity is visible.
        The auxiliary control is truncated at ``alpha_max_factor`` times the
        scale of the price noise times the cap rate.
        """
        rate_cap = hydro.max_power_output(system)
        g0 = float(prices.accumulated_price(model, rate_cap, 0.0, x_max,
                                            system.horizon))
        if g0 <= 0:
            raise ValueError("degenerate accumulated price; enlarge x_max")
        n_neg = max(1, min(n_z - 2, round((n_z - 1) * g0 / (g0 * (1 + z_pad_frac)))))
        dz = g0 / n_neg
        z_axis = Axis("z", -g0, (n_z - 1 - n_neg) * dz, n_z)
        if alpha_max is None:
            alpha_max = alpha_max_factor * model.sigma * x_max * rate_cap
        if alpha_max <= 0:
            alpha_max = 1e-6  # degenerate noiseless model; 0 stays on the grid
        if n_alpha % 2 == 0:
            n_alpha += 1
        alpha_axis = Axis("alpha", -alpha_max, alpha_max, n_alpha)
        y_axes = []
        names = ["y"] if system.n_dams == 1 else ["y1", "y2"]
        for name, cap in zip(names, system.y_max):
            dy = cap / (n_y - 1)
            pad_cells = max(1, round(y_pad_frac * (n_y - 1)))
            y_axes.append(Axis(name, -pad_cells * dy, cap + pad_cells * dy,
                               n_y + 2 * pad_cells))
        return cls(x_axis=Axis("x", 0.0, x_max, n_x), y_axes=tuple(y_axes),
                   z_axis=z_axis, alpha_axis=alpha_axis, n_steps=n_steps,
                   horizon=system.horizon,
                   alpha_price_scaled=alpha_price_scaled)


def shifted_payoff_rate(model: prices.PriceModel, system: hydro.HydroSystem,
                        x, u) -> np.ndarray:
    """Running payoff shifted by the cap: ``x * (output(u) - max output) <= 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("price must be nonnegative")
    return x * (hydro.power_output(system, u) - hydro.max_power_output(system))


def _terminal_slab(aug: AugmentedGrid) -> np.ndarray:
    z = aug.z_axis.coords()
    shape = aug.shape
    slab = np.broadcast_to(np.maximum(z, 0.0), shape).copy()
    return slab


def _run_cost(system: hydro.HydroSystem, aug: AugmentedGrid, dt: float):
    if system.n_dams == 1:
        y = aug.y_axes[0].coords()
        return hydro.capacity_distance(system, y[:, None]) * dt
    y1 = aug.y_axes[0].coords()
    y2 = aug.y_axes[1].coords()
    pts = np.stack(np.meshgrid(y1, y2, indexing="ij"), axis=-1)
    return hydro.capacity_distance(system, pts) * dt


def _step_inputs(model, system, aug, controls, t):
    """Feet, shifts and cost arrays consumed by the augmented kernels."""
    dt = aug.dt
    x = aug.x_axis.coords()
    idx_p, w_p, idx_m, w_m = kernels.price_feet(
        x, prices.drift(model, t, x), prices.diffusion(model, t, x), dt)
    kappa_vals = hydro.power_output_table(system, controls)
    rate_cap = hydro.max_power_output(system)
    dz = aug.z_axis.step
    zeta = np.ascontiguousarray(
        x[:, None] * (rate_cap - kappa_vals)[None, :] * dt / dz)
    acells = aug.alpha_axis.coords() * math.sqrt(dt) / dz
    if aug.alpha_price_scaled:
        rowscale = x / aug.x_axis.hi
    else:
        rowscale = np.ones_like(x)
    shifts = []
    for dam, ax in enumerate(aug.y_axes):
        beta = float(system.inflows[dam](t))
        if dam == 0:
            speed = beta - controls[:, 0]
        else:
            speed = beta + controls[:, 0] - controls[:, 1]
        cells = speed * dt / ax.step
        m = np.empty(len(controls), dtype=np.int64)
        w = np.empty(len(controls))
        for c, s in enumerate(cells):
            m[c], w[c], _, _ = kernels.shift_cells(float(s), ax.n)
        shifts.append((m, w))
    return (idx_p, w_p, idx_m, w_m), zeta, acells, rowscale, shifts, dz


def sl_step_augmented(w_next: np.ndarray, t: float, model: prices.PriceModel,
                      system: hydro.HydroSystem, aug: AugmentedGrid,
                      controls: np.ndarray) -> np.ndarray:
    """One backward step of the augmented scheme (minimum over controls).

    The slice is finished with a running-maximum pass along the budget axis:
    the exact solution is nondecreasing in the budget, and the projection
    restores that property where the price-axis linear extrapolation (whose
    upper weight exceeds one) may have nicked it.
    """
    gather, zeta, acells, rowscale, shifts, dz = _step_inputs(
        model, system, aug, controls, t)
    idx_p, w_p, idx_m, w_m = gather
    ap = kernels.gather_price_axis(w_next, idx_p, w_p)
    am = kernels.gather_price_axis(w_next, idx_m, w_m)
    run_cost = _run_cost(system, aug, aug.dt)
    if system.n_dams == 1:
        (m, w), = shifts
        out = kernels.augmented_step_1dam(ap, am, m, w, zeta, acells,
                                          rowscale, run_cost, dz)
    else:
        (m1, w1), (m2, w2) = shifts
        out = kernels.augmented_step_2dam(ap, am, m1, w1, m2, w2, zeta,
                                          acells, rowscale, run_cost, dz)
    np.maximum.accumulate(out, axis=-1, out=out)
    return out


def solve_levelset_value(model: prices.PriceModel, system: hydro.HydroSystem,
                         aug: AugmentedGrid, n_controls: int = 21,
                         export_times="all",
                         memory_budget_bytes: int = 2 * 1024 ** 3) -> ValueField:
    """Backward recursion of the augmented scheme from ``max(z, 0)``.

    Stores slabs at ``export_times`` ("all" keeps every time node, subject
    to the memory budget; the solve itself only ever holds two slabs).
    """
    times = np.linspace(0.0, aug.horizon, aug.n_steps + 1)
    if export_times == "all":
        export = list(times)
    else:
        export = sorted(set(float(t) for t in export_times))
    slab_bytes = int(np.prod(aug.shape)) * 8
    estimate = slab_bytes * (len(export) + 2)
    if estimate > memory_budget_bytes:
        raise MemoryError(
            f"retaining {len(export)} slabs of {slab_bytes / 1e6:.1f} MB "
            f"needs ~{estimate / 1e9:.2f} GB > budget "
            f"{memory_budget_bytes / 1e9:.2f} GB; export fewer times or "
            "raise memory_budget_bytes"
        )
    controls = hydro.control_table(system, n_controls)
    dt = aug.dt
    export_set = {int(round(t / dt)) for t in export}

    w = _terminal_slab(aug)
    stored = {}
    if aug.n_steps in export_set:
        stored[aug.n_steps] = w.copy()
    tic = _time.perf_counter()
    for n in range(aug.n_steps - 1, -1, -1):
        w = sl_step_augmented(w, times[n], model, system, aug, controls)
        if n in export_set:
            stored[n] = w.copy()
    wall = _time.perf_counter() - tic

    keys = sorted(stored)
    return ValueField(
        grid=aug.field_grid(),
        times=times[keys],
        data=np.stack([stored[k] for k in keys]),
        metadata={
            "solver": "levelset_value",
            "model": vars(model).copy(),
            "n_controls": n_controls,
            "n_alpha": aug.alpha_axis.n,
            "alpha_max": aug.alpha_axis.hi,
            "rate_cap": hydro.max_power_output(system),
            "wall_time_s": wall,
            "backend": kernels.BACKEND,
        },
    )


def default_eps_w(model: prices.PriceModel, system: hydro.HydroSystem,
                  aug: AugmentedGrid, scale: float = 1e-5) -> float:
    """Zero-detection threshold, proportional to the accumulated-price scale.

    Above the zero level the augmented value grows only quadratically in the
    budget surplus (a small capacity violation absorbs a lot of budget at
    integrated-distance cost ~ surplus^2 / (2 * cap * price^2)), so the
    threshold must sit far below the value scale: detecting the boundary
    within an error d at price x needs roughly eps <= d^2 / (5 x^2).
    """
    rate_cap = hydro.max_power_output(system)
    return scale * float(prices.accumulated_price(
        model, rate_cap, 0.0, aug.x_axis.hi, aug.horizon))


def reconstruct_slice(w_slab: np.ndarray, z_axis: Axis, eps_w: float):
    """Largest budget level ``z <= 0`` at which the augmented value vanishes.

    Scans the nonpositive budget nodes for compliance with the threshold,
    then refines inside the bracketing cell by inverse linear interpolation
    to the threshold crossing.  Returns ``(zstar, feasible)``; ``zstar`` is
    NaN where no compliant node exists.
    """
    dz = z_axis.step
    k0 = int(round(-z_axis.lo / dz))
    wneg = w_slab[..., :k0 + 1]
    ok = wneg <= eps_w
    feasible = ok.any(axis=-1)
    kstar = k0 - ok[..., ::-1].argmax(axis=-1)
    kstar = np.where(feasible, kstar, 0)
    nz = w_slab.shape[-1]
    w_k = np.take_along_axis(w_slab, kstar[..., None], axis=-1)[..., 0]
    k1 = np.minimum(kstar + 1, nz - 1)
    w_k1 = np.take_along_axis(w_slab, k1[..., None], axis=-1)[..., 0]
    z_k = z_axis.lo + kstar * dz
    at_top = kstar >= k0
    denom = np.where(w_k1 > w_k, w_k1 - w_k, 1.0)
    zstar = z_k + dz * np.clip((eps_w - w_k) / denom, 0.0, 1.0)
    zstar = np.minimum(zstar, 0.0)
    zstar = np.where(at_top, 0.0, zstar)
    zstar = np.where(feasible, zstar, np.nan)
    return zstar, feasible


@dataclass
class ReconstructionResult:
    """Constrained value and optimal budget level recovered from the
    augmented field, with infeasible nodes marked rather than valued."""

    value: ValueField           # NaN at infeasible nodes
    zstar: ValueField           # NaN at infeasible nodes
    feasible: np.ndarray        # (n_times, *spatial) bool
    eps_w: float


def _reconstruct_arrays(w_data, times, aug, model, system, eps_w,
                        terminal_box_mask=None):
    rate_cap = hydro.max_power_output(system)
    x = aug.x_axis.coords()
    v_out = np.empty(w_data.shape[:-1])
    z_out = np.empty_like(v_out)
    feas = np.empty(v_out.shape, dtype=bool)
    for k, t in enumerate(times):
        zstar, ok = reconstruct_slice(w_data[k], aug.z_axis, eps_w)
        if abs(t - aug.horizon) < 1e-12 and terminal_box_mask is not None:
            # at the horizon the constraint degenerates to "inside the box"
            ok = ok & terminal_box_mask
            zstar = np.where(ok, zstar, np.nan)
        g_row = prices.accumulated_price(model, rate_cap, float(t), x,
                                         aug.horizon)
        v = zstar + g_row.reshape((-1,) + (1,) * (zstar.ndim - 1))
        v_out[k] = v
        z_out[k] = zstar
        feas[k] = ok
    return v_out, z_out, feas


def _inside_box_mask(system, aug):
    masks = []
    for ax, cap in zip(aug.y_axes, system.y_max):
        y = ax.coords()
        masks.append((y >= -1e-12) & (y <= cap + 1e-12))
    if len(masks) == 1:
        return np.broadcast_to(masks[0][None, :], (aug.x_axis.n, len(masks[0])))
    m = masks[0][:, None] & masks[1][None, :]
    return np.broadcast_to(m[None], (aug.x_axis.n, *m.shape))


def reconstruct_value(w_field: ValueField, model: prices.PriceModel,
                      system: hydro.HydroSystem, aug: AugmentedGrid,
                      eps_w: float | None = None) -> ReconstructionResult:
    """Recover the constrained value on every stored slice of the field."""
    if eps_w is None:
        eps_w = default_eps_w(model, system, aug)
    v, z, feas = _reconstruct_arrays(w_field.data, w_field.times, aug, model,
                                     system, eps_w,
                                     terminal_box_mask=_inside_box_mask(system, aug))
    base = aug.base_grid()
    meta = {"eps_w": eps_w, "solver": "levelset_reconstruction"}
    return ReconstructionResult(
        value=ValueField(base, w_field.times, v, metadata=meta,
                         allow_non_finite=True),
        zstar=ValueField(base, w_field.times, z, metadata=meta,
                         allow_non_finite=True),
        feasible=feas,
        eps_w=eps_w,
    )


def _policy_slice(w_next, t, model, system, aug, controls, zstar, feasible):
    """(u, alpha) minimiser of the one-step operator at the optimal budget."""
    gather, zeta, acells, rowscale, shifts, dz = _step_inputs(
        model, system, aug, controls, t)
    idx_p, w_p, idx_m, w_m = gather
    ap = kernels.gather_price_axis(w_next, idx_p, w_p)
    am = kernels.gather_price_axis(w_next, idx_m, w_m)
    zpos = (np.nan_to_num(zstar, nan=0.0) - aug.z_axis.lo) / dz
    zpos = np.ascontiguousarray(zpos)
    feas = np.ascontiguousarray(feasible)
    if system.n_dams == 1:
        (m, w), = shifts
        ui, ai = kernels.policy_step_1dam(ap, am, zpos, feas, m, w, zeta,
                                          acells, rowscale, dz)
    else:
        (m1, w1), (m2, w2) = shifts
        ui, ai = kernels.policy_step_2dam(ap, am, zpos, feas, m1, w1, m2, w2,
                                          zeta, acells, rowscale, dz)
    return ui, ai, rowscale


def reconstruct_feedback(w_field: ValueField, recon: ReconstructionResult,
                         model: prices.PriceModel, system: hydro.HydroSystem,
                         aug: AugmentedGrid,
                         n_controls: int = 21) -> FeedbackPolicy:
    """Feedback extracted from a stored augmented field.

    Needs consecutively stored slices: the control at a slice is the
    minimiser of the one-step operator against the next slice, evaluated at
    that node's optimal budget level.
    """
    times = w_field.times
    dt = aug.dt
    if len(times) < 2 or not np.allclose(np.diff(times), dt):
        raise ValueError("feedback extraction needs consecutively stored slices")
    controls = hydro.control_table(system, n_controls)
    alphas = aug.alpha_axis.coords()
    n_pol = len(times) - 1
    spatial = tuple(ax.n for ax in aug.spatial_axes)
    uidx = np.zeros((n_pol, *spatial), dtype=np.int16)
    aval = np.zeros((n_pol, *spatial))
    for k in range(n_pol):
        ui, ai, rowscale = _policy_slice(w_field.data[k + 1], times[k], model,
                                         system, aug, controls,
                                         recon.zstar.data[k],
                                         recon.feasible[k])
        uidx[k] = np.where(ui >= 0, ui, 0)
        rs = rowscale.reshape((-1,) + (1,) * (ai.ndim - 1))
        aval[k] = np.where(ai >= 0, alphas[np.clip(ai, 0, None)] * rs, 0.0)
    return FeedbackPolicy(
        grid=aug.base_grid(),
        times=times[:-1],
        controls=controls,
        indices=uidx,
        extras={
            "alpha": aval,
            "zstar": np.nan_to_num(recon.zstar.data[:n_pol], nan=0.0),
            "feasible": recon.feasible[:n_pol],
        },
        metadata={"source": "levelset", "eps_w": recon.eps_w},
    )


@dataclass
class LevelsetSolution:
    """Everything the pipeline needs from one augmented solve."""

    aug: AugmentedGrid
    recon: ReconstructionResult
    policy: FeedbackPolicy
    w_exports: ValueField
    eps_w: float
    metadata: dict = field(default_factory=dict)


def solve_levelset(model: prices.PriceModel, system: hydro.HydroSystem,
                   aug: AugmentedGrid, n_controls: int = 21,
                   eps_w: float | None = None,
                   w_export_times=(0.0,)) -> LevelsetSolution:
    """Single backward pass with on-the-fly reconstruction and feedback.

    Keeps only two augmented slabs in memory; the full reconstruction
    (value, optimal budget, feasibility, policy) is produced at every time
    step, while raw augmented slabs are retained only at the export times.
    """
    if eps_w is None:
        eps_w = default_eps_w(model, system, aug)
    controls = hydro.control_table(system, n_controls)
    alphas = aug.alpha_axis.coords()
    times = np.linspace(0.0, aug.horizon, aug.n_steps + 1)
    dt = aug.dt
    export_set = {int(round(t / dt)) for t in sorted(set(w_export_times))}

    spatial = tuple(ax.n for ax in aug.spatial_axes)
    n_t = aug.n_steps + 1
    v_all = np.empty((n_t, *spatial))
    z_all = np.empty((n_t, *spatial))
    feas_all = np.empty((n_t, *spatial), dtype=bool)
    uidx = np.zeros((aug.n_steps, *spatial), dtype=np.int16)
    aval = np.zeros((aug.n_steps, *spatial))

    box_mask = _inside_box_mask(system, aug)
    w = _terminal_slab(aug)
    stored = {}
    if aug.n_steps in export_set:
        stored[aug.n_steps] = w.copy()
    v_all[-1:], z_all[-1:], feas_all[-1:] = _reconstruct_arrays(
        w[None], times[-1:], aug, model, system, eps_w,
        terminal_box_mask=box_mask)

    tic = _time.perf_counter()
    for n in range(aug.n_steps - 1, -1, -1):
        w_next = w
        w = sl_step_augmented(w_next, times[n], model, system, aug, controls)
        v_all[n:n + 1], z_all[n:n + 1], feas_all[n:n + 1] = _reconstruct_arrays(
            w[None], times[n:n + 1], aug, model, system, eps_w)
        ui, ai, rowscale = _policy_slice(w_next, times[n], model, system, aug,
                                         controls, z_all[n], feas_all[n])
        uidx[n] = np.where(ui >= 0, ui, 0)
        rs = rowscale.reshape((-1,) + (1,) * (ai.ndim - 1))
        aval[n] = np.where(ai >= 0, alphas[np.clip(ai, 0, None)] * rs, 0.0)
        if n in export_set:
            stored[n] = w.copy()
    wall = _time.perf_counter() - tic

    base = aug.base_grid()
    meta = {"eps_w": eps_w, "solver": "levelset", "n_controls": n_controls,
            "n_alpha": aug.alpha_axis.n, "alpha_max": aug.alpha_axis.hi,
            "wall_time_s": wall, "backend": kernels.BACKEND}
    recon = ReconstructionResult(
        value=ValueField(base, times, v_all, metadata=meta,
                         allow_non_finite=True),
        zstar=ValueField(base, times, z_all, metadata=meta,
                         allow_non_finite=True),
        feasible=feas_all,
        eps_w=eps_w,
    )
    policy = FeedbackPolicy(
        grid=base, times=times[:-1], controls=controls, indices=uidx,
        extras={"alpha": aval, "zstar": np.nan_to_num(z_all[:-1], nan=0.0),
                "feasible": feas_all[:-1]},
        metadata={"source": "levelset", "eps_w": eps_w},
    )
    keys = sorted(stored)
    w_exports = None
    if keys:
        w_exports = ValueField(
            grid=aug.field_grid(), times=times[keys],
            data=np.stack([stored[k] for k in keys]), metadata=meta,
        )
    return LevelsetSolution(aug=aug, recon=recon, policy=policy,
                            w_exports=w_exports, eps_w=eps_w, metadata=meta)
