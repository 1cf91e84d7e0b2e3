"""Rectilinear grids, stored value fields and feedback policy tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Axis",
    "GridSpec",
    "ValueField",
    "FeedbackPolicy",
    "multilinear_interp",
]


@dataclass(frozen=True)
class Axis:
    name: str
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"axis {self.name!r} needs at least 2 points")
        if not self.hi > self.lo:
            raise ValueError(f"axis {self.name!r} needs hi > lo")

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    def coords(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)


@dataclass(frozen=True)
class GridSpec:
    """Uniform axes over the spatial state plus a uniform time grid on [0, T]."""

    axes: tuple
    n_steps: int
    horizon: float

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("need at least one time step")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        names = [ax.name for ax in self.axes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate axis names")
        for ax in self.axes:
            if ax.name == "x" and ax.lo != 0.0:
                raise ValueError("price axis must start at 0")

    @property
    def shape(self) -> tuple:
        return tuple(ax.n for ax in self.axes)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def axis(self, name: str) -> Axis:
        for ax in self.axes:
            if ax.name == name:
                return ax
        raise KeyError(f"no axis named {name!r}")

    def coords(self, name: str) -> np.ndarray:
        return self.axis(name).coords()

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def meta(self) -> dict:
        return {
            "axes": [
                {"name": ax.name, "min": ax.lo, "max": ax.hi, "n_points": ax.n}
                for ax in self.axes
            ],
            "n_time_steps": self.n_steps,
            "horizon": self.horizon,
        }


def _axis_index_weight(ax: Axis, value: float, extrapolate_high: bool):
    """Bracketing node index and interpolation weight along one axis.

    Below the axis minimum is always an error.  Above the maximum, callers
    may allow linear extrapolation (weight > 1), used for the price axis
    where solutions have linear growth.
    """
    snap = 1e-9 * max(1.0, abs(ax.hi))
    if value < ax.lo - snap:
        raise ValueError(f"query {value} below axis {ax.name!r} minimum {ax.lo}")
    if value > ax.hi + snap and not extrapolate_high:
        raise ValueError(f"query {value} above axis {ax.name!r} maximum {ax.hi}")
    pos = (value - ax.lo) / ax.step
    idx = int(np.floor(pos))
    idx = min(max(idx, 0), ax.n - 2)
    return idx, pos - idx


def multilinear_interp(slab: np.ndarray, axes, point, extrapolate_axes=("x",)) -> float:
    """Multilinear interpolation of ``slab`` at ``point``.

    Exact on multilinear functions.  Linear extrapolation is permitted only
    along the axes named in ``extrapolate_axes``.
    """
    point = np.atleast_1d(np.asarray(point, dtype=float))
    if len(point) != len(axes):
        raise ValueError(f"point has {len(point)} coords, grid has {len(axes)} axes")
    idx_w = [
        _axis_index_weight(ax, p, ax.name in extrapolate_axes)
        for ax, p in zip(axes, point)
    ]
    value = 0.0
    for corner in range(1 << len(axes)):
        weight = 1.0
        index = []
        for d, (i, w) in enumerate(idx_w):
            if corner >> d & 1:
                weight *= w
                index.append(i + 1)
            else:
                weight *= 1.0 - w
                index.append(i)
        if weight != 0.0:
            value += weight * slab[tuple(index)]
    return float(value)


@dataclass
class ValueField:
    """Numeric field on a grid, stored at a subset of the time nodes.

    ``data[k]`` is the slab at ``times[k]`` (ascending).  Queries between
    stored slices use the latest stored slice at or before the query time.
    """

    grid: GridSpec
    times: np.ndarray
    data: np.ndarray
    metadata: dict = field(default_factory=dict)
    allow_non_finite: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.data.shape != (len(self.times), *self.grid.shape):
            raise ValueError(
                f"data shape {self.data.shape} does not match "
                f"{(len(self.times), *self.grid.shape)}"
            )
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("stored times must be strictly increasing")
        if not self.allow_non_finite and not np.all(np.isfinite(self.data)):
            raise ValueError("value field contains non-finite entries")

    def time_index(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1
        if k < 0:
            raise ValueError(f"no stored slice at or before t={t}")
        return k

    def slab(self, t: float) -> np.ndarray:
        """Stored slab at exactly time ``t``."""
        k = self.time_index(t)
        if abs(self.times[k] - t) > 1e-9 * max(1.0, self.grid.horizon):
            raise KeyError(f"no slab stored at t={t}")
        return self.data[k]

    def interpolate(self, t: float, point) -> float:
        """Value at an off-grid point: floor in time, multilinear in space."""
        slab = self.data[self.time_index(t)]
        return multilinear_interp(slab, self.grid.axes, point)


@dataclass
class FeedbackPolicy:
    """Optimal control index per node per time slice.

    Off-grid control queries snap to the nearest node: the optima are
    bang-bang, and interpolating across a switching surface would produce
    controls no single node ever chose.  ``extras`` may carry per-node
    companion arrays (for level-set policies: the auxiliary control, the
    optimal budget level and a feasibility mask).
    """

    grid: GridSpec
    times: np.ndarray
    controls: np.ndarray        # (n_controls, control_dim) lookup table
    indices: np.ndarray         # (n_times, *grid.shape) int16 into controls
    extras: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.indices.shape != (len(self.times), *self.grid.shape):
            raise ValueError("policy index array does not match grid/time shape")

    def nearest_time_index(self, t: float) -> int:
        dt = self.times[1] - self.times[0] if len(self.times) > 1 else 1.0
        k = int(round((t - self.times[0]) / dt))
        return min(max(k, 0), len(self.times) - 1)

    def nearest_node(self, point) -> tuple:
        out = []
        for ax, p in zip(self.grid.axes, np.atleast_1d(point)):
            i = int(round((p - ax.lo) / ax.step))
            out.append(min(max(i, 0), ax.n - 1))
        return tuple(out)

    def control_at(self, t: float, point) -> np.ndarray:
        k = self.nearest_time_index(t)
        node = self.nearest_node(point)
        return self.controls[self.indices[(k, *node)]]

    def save(self, path):
        """Serialise to .npz (round-trips through ``FeedbackPolicy.load``)."""
        payload = {
            "times": self.times,
            "controls": self.controls,
            "indices": self.indices,
            "axis_names": np.array([ax.name for ax in self.grid.axes]),
            "axis_lo": np.array([ax.lo for ax in self.grid.axes]),
            "axis_hi": np.array([ax.hi for ax in self.grid.axes]),
            "axis_n": np.array([ax.n for ax in self.grid.axes]),
            "n_steps": np.array(self.grid.n_steps),
            "horizon": np.array(self.grid.horizon),
        }
        for key, arr in self.extras.items():
            payload[f"extra_{key}"] = arr
        np.savez_compressed(path, **payload)

    @classmethod
    def load(cls, path) -> "FeedbackPolicy":
        with np.load(path, allow_pickle=False) as zf:
            axes = tuple(
                Axis(str(nm), float(lo), float(hi), int(n))
                for nm, lo, hi, n in zip(
                    zf["axis_names"], zf["axis_lo"], zf["axis_hi"], zf["axis_n"]
                )
            )
            grid = GridSpec(axes=axes, n_steps=int(zf["n_steps"]),
                            horizon=float(zf["horizon"]))
            extras = {
                key[len("extra_"):]: zf[key]
                for key in zf.files if key.startswith("extra_")
            }
            return cls(grid=grid, times=zf["times"], controls=zf["controls"],
                       indices=zf["indices"], extras=extras)
