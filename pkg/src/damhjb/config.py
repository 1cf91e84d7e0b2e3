"""Run configuration: TOML (or JSON) parsing, validation and defaults.

Every key is checked against a schema with path-qualified error messages;
unknown keys are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grids import Axis, GridSpec
from .levelset import AugmentedGrid
from .prices import PriceModel
from .system import HydroSystem, Inflow

__all__ = ["RunConfig", "parse_config", "constrained_grid", "augmented_grid",
           "violation_grid", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridParams:
    n_x: int
    x_max: float
    n_y: int
    n_time_steps: int
    n_z: int = 81
    n_controls: int = 21
    n_alpha: int = 41
    y_pad_frac: float = 0.25
    z_pad_frac: float = 0.1
    n_y_violation: int = 301


@dataclass(frozen=True)
class SolverParams:
    eps_w_scale: float = 1e-5
    zero_level_tol_factor: float = 10.0
    alpha_max_factor: float = 2.0
    rel_tol: float = 0.05
    memory_budget_mb: int = 2048
    controllability_scan_points: int = 10_000


@dataclass(frozen=True)
class OutputParams:
    dir: str = "out"
    export_times: tuple = (0.0,)
    export_x: float = 5.0
    plots: bool = True


@dataclass(frozen=True)
class SimParams:
    n_paths: int = 20_000
    dt_sim: float = 1e-3
    seed: int = 0
    start: tuple = (0.0, 5.0, 0.5)
    policy_source: str = "auto"          # auto | hjb | levelset


@dataclass(frozen=True)
class RunConfig:
    model: PriceModel
    system: HydroSystem
    grid: GridParams
    solver: SolverParams
    output: OutputParams
    sim: SimParams
    source: str = ""


def _section(raw: dict, name: str, required: bool = True) -> dict:
    if name not in raw:
        if required:
            raise ConfigError(f"missing required section [{name}]")
        return {}
    sec = raw[name]
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table/section")
    return dict(sec)


def _take(sec: dict, section: str, key: str, kind, default=None, required=False):
    if key not in sec:
        if required:
            raise ConfigError(f"[{section}].{key} is required")
        return default
    val = sec.pop(key)
    if kind is float and isinstance(val, (int, float)) and not isinstance(val, bool):
        return float(val)
    if kind is int and isinstance(val, int) and not isinstance(val, bool):
        return int(val)
    if kind is bool and isinstance(val, bool):
        return val
    if kind is str and isinstance(val, str):
        return val
    if kind is list and isinstance(val, list):
        return val
    if kind is dict and isinstance(val, dict):
        return dict(val)
    raise ConfigError(f"[{section}].{key} must be of type {kind.__name__}")


def _reject_unknown(sec: dict, section: str):
    if sec:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(sec))}")


def _parse_inflow(spec: dict, section: str, base_dir: Path) -> Inflow:
    spec = dict(spec)
    form = _take(spec, section, "form", str, default="sine_offset")
    if form == "sine_offset":
        amplitude = _take(spec, section, "amplitude", float, default=0.0)
        offset = _take(spec, section, "offset", float, default=0.0)
        _reject_unknown(spec, section)
        return Inflow(kind="sine_offset", amplitude=amplitude, offset=offset)
    if form == "table":
        csv_path = _take(spec, section, "csv", str, required=True)
        _reject_unknown(spec, section)
        path = base_dir / csv_path
        if not path.exists():
            raise ConfigError(f"[{section}].csv: file {path} not found")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] != 2:
            raise ConfigError(f"[{section}].csv must have two columns t,beta")
        return Inflow(kind="table", times=tuple(data[:, 0]),
                      values=tuple(data[:, 1]))
    raise ConfigError(f"[{section}].form must be 'sine_offset' or 'table'")


def parse_config(path) -> RunConfig:
    """Load and validate a TOML (or JSON) run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        raw = json.loads(text.decode())
    else:
        raw = tomllib.loads(text.decode())
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a table")

    known_sections = {"price", "system", "grid", "solver", "output", "sim"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    # [price]
    sec = _section(raw, "price")
    kind = _take(sec, "price", "kind", str, required=True)
    if kind not in ("gbm", "igbm"):
        raise ConfigError("[price].kind must be 'gbm' or 'igbm'")
    b = _take(sec, "price", "b", float, required=True)
    sigma = _take(sec, "price", "sigma", float, required=True)
    a = _take(sec, "price", "a", float, default=None)
    if kind == "igbm" and a is None:
        raise ConfigError("[price].a is required for the igbm model")
    if kind == "gbm" and a is not None:
        raise ConfigError("[price].a is only valid for the igbm model")
    _reject_unknown(sec, "price")
    try:
        model = PriceModel(kind=kind, b=b, sigma=sigma, a=a or 0.0)
    except ValueError as exc:
        raise ConfigError(f"[price]: {exc}") from exc

    # [system]
    sec = _section(raw, "system")
    n_dams = _take(sec, "system", "n_dams", int, default=1)
    if n_dams not in (1, 2):
        raise ConfigError("[system].n_dams must be 1 or 2")
    horizon = _take(sec, "system", "T", float, required=True)
    y_max_raw = sec.pop("y_max", None)
    if y_max_raw is None:
        raise ConfigError("[system].y_max is required")
    y_max = tuple(float(v) for v in (y_max_raw if isinstance(y_max_raw, list)
                                     else [y_max_raw] * n_dams))
    if len(y_max) != n_dams:
        raise ConfigError(f"[system].y_max needs {n_dams} value(s)")
    u1_max = _take(sec, "system", "u1_max", float, required=True)
    u1_min = _take(sec, "system", "u1_min", float, default=0.0)
    u2_max = _take(sec, "system", "u2_max", float, default=0.0)
    gamma = _take(sec, "system", "gamma", float, default=1.0 if n_dams == 1 else None)
    if n_dams == 2 and gamma is None:
        raise ConfigError("[system].gamma is required for two dams")
    beta_spec = _take(sec, "system", "beta", dict, required=True)
    beta2_spec = _take(sec, "system", "beta2", dict, default=None)
    _reject_unknown(sec, "system")
    base_dir = path.parent
    inflow1 = _parse_inflow(beta_spec, "system.beta", base_dir)
    inflows = (inflow1,)
    if n_dams == 2:
        inflow2 = (inflow1 if beta2_spec is None
                   else _parse_inflow(beta2_spec, "system.beta2", base_dir))
        inflows = (inflow1, inflow2)
    elif beta2_spec is not None:
        raise ConfigError("[system].beta2 is only valid for two dams")
    try:
        system = HydroSystem(n_dams=n_dams, inflows=inflows, y_max=y_max,
                             u1_max=u1_max, u1_min=u1_min, u2_max=u2_max,
                             gamma=gamma if gamma is not None else 1.0,
                             horizon=horizon)
    except ValueError as exc:
        raise ConfigError(f"[system]: {exc}") from exc

    # [grid] with topology-dependent defaults
    sec = _section(raw, "grid", required=False)
    if n_dams == 1:
        defaults = {"n_x": 101, "n_y": 101, "n_time_steps": 200}
    else:
        defaults = {"n_x": 61, "n_y": 61, "n_time_steps": 100}
    grid = GridParams(
        n_x=_take(sec, "grid", "n_x", int, default=defaults["n_x"]),
        x_max=_take(sec, "grid", "x_max", float, default=20.0),
        n_y=_take(sec, "grid", "n_y", int, default=defaults["n_y"]),
        n_time_steps=_take(sec, "grid", "n_time_steps", int,
                           default=defaults["n_time_steps"]),
        n_z=_take(sec, "grid", "n_z", int, default=81),
        n_controls=_take(sec, "grid", "n_controls", int, default=21),
        n_alpha=_take(sec, "grid", "n_alpha", int, default=41),
        y_pad_frac=_take(sec, "grid", "y_pad_frac", float, default=0.25),
        z_pad_frac=_take(sec, "grid", "z_pad_frac", float, default=0.1),
        n_y_violation=_take(sec, "grid", "n_y_violation", int, default=301),
    )
    _reject_unknown(sec, "grid")
    for name in ("n_x", "n_y", "n_z", "n_controls", "n_time_steps"):
        if getattr(grid, name) < 2:
            raise ConfigError(f"[grid].{name} must be at least 2")
    if grid.x_max <= 0:
        raise ConfigError("[grid].x_max must be positive")

    # [solver]
    sec = _section(raw, "solver", required=False)
    solver = SolverParams(
        eps_w_scale=_take(sec, "solver", "eps_w_scale", float, default=1e-5),
        zero_level_tol_factor=_take(sec, "solver", "zero_level_tol_factor",
                                    float, default=10.0),
        alpha_max_factor=_take(sec, "solver", "alpha_max_factor", float,
                               default=2.0),
        rel_tol=_take(sec, "solver", "rel_tol", float, default=0.05),
        memory_budget_mb=_take(sec, "solver", "memory_budget_mb", int,
                               default=2048),
        controllability_scan_points=_take(
            sec, "solver", "controllability_scan_points", int, default=10_000),
    )
    _reject_unknown(sec, "solver")
    if solver.eps_w_scale <= 0 or solver.rel_tol <= 0:
        raise ConfigError("[solver] tolerances must be positive")

    # [output]
    sec = _section(raw, "output", required=False)
    output = OutputParams(
        dir=_take(sec, "output", "dir", str, default="out"),
        export_times=tuple(_take(sec, "output", "export_times", list,
                                 default=[0.0])),
        export_x=_take(sec, "output", "export_x", float, default=5.0),
        plots=_take(sec, "output", "plots", bool, default=True),
    )
    _reject_unknown(sec, "output")
    for t in output.export_times:
        if not 0.0 <= float(t) <= horizon:
            raise ConfigError(f"[output].export_times entry {t} outside [0, T]")

    # [sim]
    sec = _section(raw, "sim", required=False)
    default_start = [0.0, 5.0] + [0.5 * c for c in y_max]
    sim = SimParams(
        n_paths=_take(sec, "sim", "n_paths", int, default=20_000),
        dt_sim=_take(sec, "sim", "dt_sim", float, default=1e-3),
        seed=_take(sec, "sim", "seed", int, default=0),
        start=tuple(float(v) for v in _take(sec, "sim", "start", list,
                                            default=default_start)),
        policy_source=_take(sec, "sim", "policy_source", str, default="auto"),
    )
    _reject_unknown(sec, "sim")
    if sim.policy_source not in ("auto", "hjb", "levelset"):
        raise ConfigError("[sim].policy_source must be auto, hjb or levelset")
    if len(sim.start) != 2 + n_dams:
        raise ConfigError(f"[sim].start needs {2 + n_dams} components (t, x, levels)")
    if sim.n_paths < 1 or sim.dt_sim <= 0:
        raise ConfigError("[sim].n_paths and dt_sim must be positive")

    return RunConfig(model=model, system=system, grid=grid, solver=solver,
                     output=output, sim=sim, source=str(path))


def constrained_grid(config: RunConfig) -> GridSpec:
    """Grid for the direct constrained solve: levels cover the capacity box."""
    g, system = config.grid, config.system
    axes = [Axis("x", 0.0, g.x_max, g.n_x)]
    names = ["y"] if system.n_dams == 1 else ["y1", "y2"]
    for name, cap in zip(names, system.y_max):
        axes.append(Axis(name, 0.0, cap, g.n_y))
    return GridSpec(axes=tuple(axes), n_steps=g.n_time_steps,
                    horizon=system.horizon)


def violation_grid(config: RunConfig) -> GridSpec:
    """Extended single-level grid for the violation-cost solve."""
    system = config.system
    cap = system.y_max[0]
    pad = config.grid.y_pad_frac * cap
    return GridSpec(axes=(Axis("y", -pad, cap + pad, config.grid.n_y_violation),),
                    n_steps=config.grid.n_time_steps, horizon=system.horizon)


def augmented_grid(config: RunConfig, demo: bool = False) -> AugmentedGrid:
    """Augmented grid per the configuration; ``demo`` caps every axis at 21
    points (two-dam level-set runs are only supported at that resolution)."""
    g = config.grid
    n_x, n_y, n_z, n_alpha = g.n_x, g.n_y, g.n_z, g.n_alpha
    n_steps = g.n_time_steps
    if demo:
        n_x, n_y, n_z = min(n_x, 21), min(n_y, 21), min(n_z, 21)
        n_alpha = min(n_alpha, 9)
        n_steps = min(n_steps, 50)
    return AugmentedGrid.create(
        config.model, config.system, n_x=n_x, x_max=g.x_max, n_y=n_y,
        n_z=n_z, n_alpha=n_alpha, n_steps=n_steps, y_pad_frac=g.y_pad_frac,
        z_pad_frac=g.z_pad_frac, alpha_max_factor=config.solver.alpha_max_factor)
