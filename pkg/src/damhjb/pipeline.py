"""Run orchestration: solves, tabular export, validation and plot emission.

Stages run in dependency order (viability, hjb, levelset, reconstruct,
simulate, validate).  When the controllability margin is zero the direct
HJB stage is skipped and the pipeline steers to the level-set route, which
needs no such assumption.  A stage failure writes a FAILED marker file and
aborts downstream stages while keeping partial artifacts on disk.
"""

from __future__ import annotations

import csv
import json
import time as _time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels, prices
from . import system as hydro
from .config import (RunConfig, augmented_grid, constrained_grid,
                     violation_grid)
from .grids import FeedbackPolicy, ValueField
from .hjb import max_rate_envelope, solve_constrained_hjb
from .levelset import LevelsetSolution, solve_levelset
from .simulate import SimConfig, compare_values, simulate_policy
from .viability import compute_viability
from ._plots import PLOT_SCRIPT

__all__ = ["STAGES", "PipelineResult", "run_pipeline", "write_table",
           "read_table", "run_validation"]

STAGES = ("viability", "hjb", "levelset", "reconstruct", "simulate", "validate")

_DEPENDENCIES = {
    "reconstruct": {"levelset"},
    "validate": set(),       # validates whatever ran
}


def write_table(path, header, columns):
    """Write a long-format CSV with a header row; floats keep full precision."""
    columns = [np.asarray(c) for c in columns]
    n = len(columns[0])
    if any(len(c) != n for c in columns):
        raise ValueError("columns must have equal length")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([
                format(v, ".17g") if isinstance(v, (float, np.floating)) else v
                for v in row
            ])


def read_table(path):
    """Read a CSV written by ``write_table``: returns (header, columns)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols = []
    for j in range(len(header)):
        raw = [r[j] for r in rows]
        try:
            cols.append(np.array([float(v) for v in raw]))
        except ValueError:
            cols.append(np.array(raw))
    return header, cols


def _field_long_format(fld: ValueField, t: float, extra=None):
    axes = fld.grid.axes
    mesh = np.meshgrid(*[ax.coords() for ax in axes], indexing="ij")
    cols = [m.ravel() for m in mesh]
    slab = fld.slab(t)
    cols.append(slab.ravel())
    header = [ax.name for ax in axes] + ["value"]
    if extra is not None:
        name, arr = extra
        header.append(name)
        cols.append(np.asarray(arr).ravel())
    return header, cols


def _time_tag(fld_times, t, horizon, n_steps):
    return int(round(t / horizon * n_steps))


@dataclass
class PipelineResult:
    out_dir: Path
    status: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(v in ("ok", "skipped") for v in self.status.values())


def _export_times(config: RunConfig):
    times = set(float(t) for t in config.output.export_times)
    times.add(0.0)
    times.add(config.system.horizon)
    return sorted(times)


def _stage_viability(config: RunConfig, out: Path, artifacts: dict):
    if config.system.n_dams != 1:
        artifacts["viability"] = None
        return "skipped"
    grid = violation_grid(config)
    result = compute_viability(
        config.system, grid,
        tolerance=None if config.solver.zero_level_tol_factor == 10.0 else
        config.solver.zero_level_tol_factor * grid.dt * grid.axes[0].step)
    artifacts["viability"] = result
    theta = result.theta_field
    tt, yy = np.meshgrid(theta.times, theta.grid.coords("y"), indexing="ij")
    write_table(out / "theta.csv", ["t", "y", "theta"],
                [tt.ravel(), yy.ravel(), theta.data.ravel()])
    write_table(out / "region.csv",
                ["t", "hat_y_analytic", "hat_y_levelset"],
                [theta.times, result.boundary_analytic,
                 result.boundary_levelset])
    return "ok"


def _stage_hjb(config: RunConfig, out: Path, artifacts: dict):
    report = hydro.check_controllability(config.system)
    if not report.holds:
        artifacts["hjb"] = None
        artifacts["hjb_skip_reason"] = (
            "controllability margin is zero; direct constrained solve not "
            "well posed, level-set route used instead")
        return "skipped"
    grid = constrained_grid(config)
    fld, policy = solve_constrained_hjb(
        config.model, config.system, grid,
        n_controls=config.grid.n_controls,
        export_times=_export_times(config))
    artifacts["hjb"] = (fld, policy)
    for t in fld.times:
        tag = _time_tag(fld.times, t, grid.horizon, grid.n_steps)
        header, cols = _field_long_format(fld, t)
        write_table(out / f"V_t{tag}.csv", header, cols)
    for t in fld.times:
        if t >= policy.times[-1] + (policy.times[1] - policy.times[0]
                                    if len(policy.times) > 1 else np.inf):
            continue
        tag = _time_tag(fld.times, t, grid.horizon, grid.n_steps)
        k = policy.nearest_time_index(t)
        ctrl = policy.controls[policy.indices[k]]
        axes = grid.axes
        mesh = np.meshgrid(*[ax.coords() for ax in axes], indexing="ij")
        cols = [m.ravel() for m in mesh]
        header = [ax.name for ax in axes]
        for d in range(ctrl.shape[-1]):
            header.append(f"u{d + 1}")
            cols.append(ctrl[..., d].ravel())
        write_table(out / f"policy_t{tag}.csv", header, cols)
    policy.save(out / "policy_hjb.npz")
    return "ok"


def _stage_levelset(config: RunConfig, out: Path, artifacts: dict, demo: bool):
    if config.system.n_dams == 2 and not demo:
        raise RuntimeError(
            "two-dam level-set runs are only supported at demonstration "
            "resolution; pass --demo")
    aug = augmented_grid(config, demo=demo)
    from .levelset import default_eps_w
    eps_w = default_eps_w(config.model, config.system, aug,
                          scale=config.solver.eps_w_scale)
    sol = solve_levelset(
        config.model, config.system, aug,
        n_controls=config.grid.n_controls if not demo else
        min(config.grid.n_controls, 9),
        eps_w=eps_w,
        w_export_times=_export_times(config))
    artifacts["levelset"] = sol
    w = sol.w_exports
    x_coords = aug.x_axis.coords()
    ix = int(np.argmin(np.abs(x_coords - config.output.export_x)))
    rows = {"t": [], "y": [], "z": [], "value": []}
    for t in w.times:
        tag = _time_tag(w.times, t, aug.horizon, aug.n_steps)
        header, cols = _field_long_format(w, t)
        write_table(out / f"W_t{tag}.csv", header, cols)
        slab = w.slab(t)
        sub = slab[ix] if config.system.n_dams == 1 else slab[ix, :, aug.y_axes[1].n // 2]
        yy, zz = np.meshgrid(aug.y_axes[0].coords(), aug.z_axis.coords(),
                             indexing="ij")
        rows["t"].append(np.full(yy.size, t))
        rows["y"].append(yy.ravel())
        rows["z"].append(zz.ravel())
        rows["value"].append(sub.ravel())
    write_table(out / "W_levelsets.csv", ["t", "y", "z", "value"],
                [np.concatenate(rows[k]) for k in ("t", "y", "z", "value")])
    return "ok"


def _stage_reconstruct(config: RunConfig, out: Path, artifacts: dict):
    sol: LevelsetSolution = artifacts.get("levelset")
    if sol is None:
        raise RuntimeError("reconstruct requires the levelset stage")
    recon, policy, aug = sol.recon, sol.policy, sol.aug
    for t in _export_times(config):
        tag = _time_tag(recon.value.times, t, aug.horizon, aug.n_steps)
        k = recon.value.time_index(t)
        feas = recon.feasible[k]
        header, cols = _field_long_format(recon.value, recon.value.times[k],
                                          extra=("infeasible",
                                                 (~feas).astype(int)))
        write_table(out / f"V_reconstructed_t{tag}.csv", header, cols)
        header, cols = _field_long_format(recon.zstar, recon.value.times[k])
        write_table(out / f"zstar_t{tag}.csv", header, cols)
        if t < policy.times[-1] or np.isclose(t, policy.times[-1]):
            kp = policy.nearest_time_index(t)
            ctrl = policy.controls[policy.indices[kp]]
            mesh = np.meshgrid(*[ax.coords() for ax in policy.grid.axes],
                               indexing="ij")
            cols = [m.ravel() for m in mesh]
            header = [ax.name for ax in policy.grid.axes]
            for d in range(ctrl.shape[-1]):
                header.append(f"u{d + 1}")
                cols.append(ctrl[..., d].ravel())
            header.append("alpha")
            cols.append(policy.extras["alpha"][kp].ravel())
            write_table(out / f"policy_levelset_t{tag}.csv", header, cols)
    policy.save(out / "policy_levelset.npz")
    return "ok"


def _pick_policy(config: RunConfig, artifacts: dict):
    wanted = config.sim.policy_source
    if wanted == "auto":
        wanted = "hjb" if artifacts.get("hjb") else "levelset"
    if wanted == "hjb":
        if not artifacts.get("hjb"):
            raise RuntimeError("no direct-HJB policy available to simulate")
        return artifacts["hjb"][1], "hjb"
    sol = artifacts.get("levelset")
    if sol is None:
        raise RuntimeError("no level-set policy available to simulate")
    return sol.policy, "levelset"


def _stage_simulate(config: RunConfig, out: Path, artifacts: dict,
                    seed=None, policy_dir=None):
    if policy_dir is not None:
        policy_dir = Path(policy_dir)
        for name, source in (("policy_hjb.npz", "hjb"),
                             ("policy_levelset.npz", "levelset")):
            if (policy_dir / name).exists():
                policy = FeedbackPolicy.load(policy_dir / name)
                break
        else:
            raise RuntimeError(f"no policy file found under {policy_dir}")
    else:
        policy, source = _pick_policy(config, artifacts)
    sim_cfg = SimConfig(
        n_paths=config.sim.n_paths,
        dt_sim=config.sim.dt_sim,
        seed=config.sim.seed if seed is None else int(seed),
        policy_source=source,
        keep_samples=True,
    )
    report = simulate_policy(config.model, config.system, policy,
                             config.sim.start, sim_cfg)
    artifacts["sim"] = (report, source)
    payload = report.to_dict()
    payload["policy_source"] = source
    payload["start"] = list(config.sim.start)
    payload["seed"] = sim_cfg.seed
    (out / "sim_report.json").write_text(json.dumps(payload, indent=2))
    sample = report.payoffs[: min(1000, len(report.payoffs))]
    write_table(out / "paths_sample.csv", ["path", "payoff"],
                [np.arange(len(sample)), sample])
    return "ok"


# --------------------------------------------------------------------------
# validation checks
# --------------------------------------------------------------------------

def _check(checks, name, passed, detail):
    checks[name] = {"passed": bool(passed), "detail": detail}


def run_validation(config: RunConfig, artifacts: dict) -> dict:
    """Consistency checks applicable to the artifacts this run produced."""
    checks = {}
    rate_cap = hydro.max_power_output(config.system)

    hjb_art = artifacts.get("hjb")
    if hjb_art:
        fld, _ = hjb_art
        v_final = fld.slab(config.system.horizon)
        _check(checks, "terminal_value_zero", np.all(v_final == 0.0),
               "V at the horizon is exactly zero")
        _check(checks, "value_nonnegative", float(fld.data.min()) >= 0.0,
               f"min V = {fld.data.min():.3g}")
        times, p, q = max_rate_envelope(config.model, rate_cap, fld.grid)
        x = fld.grid.coords("x")
        tol = 1e-9 * max(1.0, float(fld.data.max()))
        worst = -np.inf
        for t in fld.times:
            k = int(round(t / fld.grid.dt))
            cap_vals = p[k] + q[k] * x
            slab = fld.slab(t)
            worst = max(worst, float((slab - cap_vals.reshape(
                (-1,) + (1,) * (slab.ndim - 1))).max()))
        _check(checks, "value_below_rate_cap_envelope", worst <= tol,
               f"max V - envelope = {worst:.3g}")

    via = artifacts.get("viability")
    if via is not None:
        cell = via.theta_field.grid.axes[0].step
        gap = np.nanmax(np.abs(via.boundary_levelset - via.boundary_analytic))
        _check(checks, "viability_boundary_agreement", gap <= cell + 1e-12,
               f"max boundary gap {gap:.4g} vs cell {cell:.4g}")

    sol = artifacts.get("levelset")
    if sol is not None and sol.w_exports is not None:
        w = sol.w_exports
        aug = sol.aug
        zmax = np.maximum(aug.z_axis.coords(), 0.0)
        w_term = w.slab(aug.horizon)
        _check(checks, "w_terminal_exact",
               np.array_equal(w_term, np.broadcast_to(zmax, w_term.shape)),
               "W at the horizon equals max(z, 0) exactly")
        _check(checks, "w_nonnegative", float(w.data.min()) >= 0.0,
               f"min W = {w.data.min():.3g}")
        mono = float(np.diff(w.data, axis=-1).min())
        _check(checks, "w_monotone_in_z", mono >= 0.0,
               f"min z-increment {mono:.3g}")

    if hjb_art and sol is not None:
        fld, _ = hjb_art
        v_dir = fld.slab(0.0)
        recon = sol.recon
        v_rec = recon.value.slab(0.0)
        gap, sup = _reconstruction_gap(fld, v_dir, sol, v_rec,
                                       x_window=min(10.0, fld.grid.axis("x").hi))
        rel = gap / sup if sup > 0 else 0.0
        _check(checks, "reconstruction_agreement",
               rel <= config.solver.rel_tol,
               f"relative sup-norm gap {rel:.4f} on the common window")

    sim_art = artifacts.get("sim")
    if sim_art:
        report, source = sim_art
        pde = _pde_value_at_start(config, artifacts, source)
        if pde is not None:
            verdict = compare_values(report, pde, rel_tol=config.solver.rel_tol)
            _check(checks, "mc_consistency", verdict.passed, verdict.detail)
        tol = _sim_tolerance(config)
        _check(checks, "mc_constraint_satisfaction",
               report.violation_frequency == 0.0
               and report.max_violation <= tol,
               f"violation freq {report.violation_frequency:.3g}, max "
               f"excursion {report.max_violation:.3g} vs bound {tol:.3g}")
    return checks


def _sim_tolerance(config: RunConfig) -> float:
    ts = np.linspace(0.0, config.system.horizon, 501)
    beta_max = max(float(np.max(config.system.inflows[d](ts)))
                   for d in range(config.system.n_dams))
    speed = config.system.u1_max + (config.system.u2_max
                                    if config.system.n_dams == 2 else 0.0)
    return (speed + beta_max) * config.sim.dt_sim


def _reconstruction_gap(fld, v_dir, sol, v_rec, x_window):
    """Sup-norm gap between direct and reconstructed values on the common
    (x, y) nodes inside the window, and the direct sup-norm there."""
    gx = fld.grid.axis("x")
    x_dir = gx.coords()
    aug = sol.aug
    x_rec = aug.x_axis.coords()
    y_dir = fld.grid.axes[1].coords()
    y_rec = aug.y_axes[0].coords()
    ix_d = np.flatnonzero(x_dir <= x_window + 1e-9)
    common_x, ix_r = [], []
    for i in ix_d:
        j = np.argmin(np.abs(x_rec - x_dir[i]))
        if abs(x_rec[j] - x_dir[i]) < 1e-9:
            common_x.append(i)
            ix_r.append(j)
    iy_d, iy_r = [], []
    for i, yv in enumerate(y_dir):
        j = np.argmin(np.abs(y_rec - yv))
        if abs(y_rec[j] - yv) < 1e-9:
            iy_d.append(i)
            iy_r.append(j)
    sub_dir = v_dir[np.ix_(common_x, iy_d)]
    sub_rec = v_rec[np.ix_(ix_r, iy_r)]
    gap = float(np.nanmax(np.abs(sub_dir - sub_rec)))
    sup = float(np.max(np.abs(sub_dir)))
    return gap, sup


def _pde_value_at_start(config: RunConfig, artifacts: dict, source: str):
    start = config.sim.start
    point = start[1:]
    if source == "hjb" and artifacts.get("hjb"):
        fld, _ = artifacts["hjb"][0], artifacts["hjb"][1]
        return float(fld.interpolate(start[0], point))
    sol = artifacts.get("levelset")
    if sol is not None:
        return float(sol.recon.value.interpolate(start[0], point))
    return None


def _stage_validate(config: RunConfig, out: Path, artifacts: dict):
    checks = run_validation(config, artifacts)
    (out / "validation.json").write_text(json.dumps(checks, indent=2))
    artifacts["validation"] = checks
    if not all(c["passed"] for c in checks.values()):
        failed = [k for k, c in checks.items() if not c["passed"]]
        raise RuntimeError(f"validation failed: {', '.join(failed)}")
    return "ok"


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

def _write_meta(config: RunConfig, out: Path, status: dict, wall: float,
                artifacts: dict):
    sysd = config.system
    meta = {
        "config_source": config.source,
        "price": vars(config.model).copy(),
        "system": {
            "n_dams": sysd.n_dams,
            "y_max": list(sysd.y_max),
            "u1_min": sysd.u1_min,
            "u1_max": sysd.u1_max,
            "u2_max": sysd.u2_max,
            "gamma": sysd.gamma,
            "horizon": sysd.horizon,
        },
        "rate_cap": hydro.max_power_output(sysd),
        "controllability_margin": hydro.check_controllability(sysd).margin,
        "grid": vars(config.grid).copy(),
        "solver": vars(config.solver).copy(),
        "backend": kernels.BACKEND,
        "stages": status,
        "wall_time_s": wall,
        "timestamp": _time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if artifacts.get("hjb"):
        meta["hjb_wall_time_s"] = artifacts["hjb"][0].metadata["wall_time_s"]
    if artifacts.get("levelset"):
        meta["levelset_wall_time_s"] = artifacts["levelset"].metadata[
            "wall_time_s"]
        meta["eps_w"] = artifacts["levelset"].eps_w
    (out / "meta.json").write_text(json.dumps(meta, indent=2))


def run_pipeline(config: RunConfig, stages, out_dir=None, seed=None,
                 demo: bool = False, policy_dir=None) -> PipelineResult:
    """Execute the requested stages in dependency order.

    Unknown stage names are rejected; an empty stage set is a no-op
    success.  Failures leave a FAILED marker naming the stage and abort
    everything downstream.
    """
    stages = set(stages)
    unknown = stages - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stage(s): {', '.join(sorted(unknown))}")
    for stage, deps in _DEPENDENCIES.items():
        if stage in stages:
            stages |= deps
    if "simulate" in stages and config.sim.policy_source != "hjb" \
            and policy_dir is None:
        stages.add("levelset")
    if "simulate" in stages and config.sim.policy_source in ("auto", "hjb") \
            and policy_dir is None:
        if hydro.check_controllability(config.system).holds:
            stages.add("hjb")
        else:
            stages.add("levelset")

    out = Path(out_dir if out_dir is not None else config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()

    result = PipelineResult(out_dir=out)
    tic = _time.perf_counter()
    runners = {
        "viability": lambda: _stage_viability(config, out, result.artifacts),
        "hjb": lambda: _stage_hjb(config, out, result.artifacts),
        "levelset": lambda: _stage_levelset(config, out, result.artifacts,
                                            demo),
        "reconstruct": lambda: _stage_reconstruct(config, out,
                                                  result.artifacts),
        "simulate": lambda: _stage_simulate(config, out, result.artifacts,
                                            seed=seed, policy_dir=policy_dir),
        "validate": lambda: _stage_validate(config, out, result.artifacts),
    }
    for stage in STAGES:
        if stage not in stages:
            continue
        try:
            result.status[stage] = runners[stage]()
        except Exception as exc:  # noqa: BLE001 - marker + re-raise semantics
            result.status[stage] = f"failed: {exc}"
            marker.write_text(f"stage {stage} failed: {exc}\n")
            break
    wall = _time.perf_counter() - tic
    _write_meta(config, out, result.status, wall, result.artifacts)
    if config.output.plots:
        (out / "plot_results.py").write_text(PLOT_SCRIPT)
    return result
