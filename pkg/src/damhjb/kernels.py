"""Hot inner loops of the semi-Lagrangian solvers, with two backends.

Every kernel exists twice: a numba ``@njit(parallel=True)`` version and a
vectorised pure-numpy fallback.  The backend is picked once at import from
the ``DAMHJB_BACKEND`` environment variable (``numba`` when available,
``numpy`` to force the fallback); both variants are also exported directly
so tests and benchmarks can compare them.  The two paths use identical
arithmetic (same association order, no fastmath) so results agree bitwise
and are independent of the thread count.

Shift conventions: all characteristic displacements arrive in grid-cell
units.  A control's reservoir shift is the same for every node of a uniform
axis, so interpolation at the foot reduces to a fixed-weight combination of
two shifted slabs; that is what makes the inner loops contiguous and cheap.
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = [
    "BACKEND",
    "HAVE_NUMBA",
    "shift_cells",
    "price_feet",
    "gather_price_axis",
    "constrained_step_2d",
    "constrained_step_3d",
    "augmented_step_1dam",
    "augmented_step_2dam",
    "policy_step_1dam",
    "policy_step_2dam",
]

_env_backend = os.environ.get("DAMHJB_BACKEND", "").strip().lower()
if _env_backend not in ("", "numba", "numpy"):
    raise ValueError(f"DAMHJB_BACKEND must be 'numba' or 'numpy', got {_env_backend!r}")

HAVE_NUMBA = False
if _env_backend != "numpy":
    try:
        import numba
        from numba import njit, prange

        HAVE_NUMBA = True
    except ImportError:
        if _env_backend == "numba":
            raise

BACKEND = "numba" if HAVE_NUMBA else "numpy"

if HAVE_NUMBA:
    _threads = os.environ.get("DAMHJB_THREADS", "").strip()
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


# --------------------------------------------------------------------------
# shared precomputation helpers (plain numpy on both backends)
# --------------------------------------------------------------------------

def shift_cells(s_cells: float, n: int):
    """Split a shift (in cells) into floor/frac plus the admissible node range.

    Near-integer shifts are snapped so controls whose characteristic lands
    exactly on the boundary are not excluded by float noise.  ``(lo, hi)``
    is the inclusive range of node indices whose foot stays inside
    ``[0, n-1]``.
    """
    r = round(s_cells)
    if abs(s_cells - r) < 1e-9:
        s_cells = float(r)
    m = math.floor(s_cells)
    w = s_cells - m
    lo = max(0, math.ceil(-s_cells))
    hi = min(n - 1, math.floor(n - 1 - s_cells))
    return m, w, lo, hi


def price_feet(x_coords: np.ndarray, drift_vals: np.ndarray,
               diff_vals: np.ndarray, dt: float):
    """Gather indices/weights for the two price-axis characteristic feet.

    The second-order term is realised by averaging the value at
    ``x + drift*dt +/- diffusion*sqrt(dt)``.  Weights above 1 at the top of
    the axis encode linear extrapolation, consistent with the linear growth
    of the solutions there.
    """
    n = len(x_coords)
    dx = x_coords[1] - x_coords[0]
    lo = x_coords[0]
    sq = math.sqrt(dt)
    out = []
    for sign in (1.0, -1.0):
        foot = x_coords + drift_vals * dt + sign * diff_vals * sq
        if foot.min() < lo - 1e-9 * max(1.0, abs(lo) + dx):
            raise ValueError("price characteristic leaves the grid from below; "
                             "reduce the time step")
        pos = (foot - lo) / dx
        idx = np.clip(np.floor(pos).astype(np.int64), 0, n - 2)
        w = pos - idx
        out.append((idx, w))
    (idx_p, w_p), (idx_m, w_m) = out
    return idx_p, w_p, idx_m, w_m


def gather_price_axis(vnext: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Interpolate a slab along its leading (price) axis at the feet.

    Results are clipped at zero: the stored fields are nonnegative, and the
    clip keeps the linear extrapolation row from injecting negative values.
    """
    shape = (-1,) + (1,) * (vnext.ndim - 1)
    w = w.reshape(shape)
    out = (1.0 - w) * vnext[idx] + w * vnext[idx + 1]
    return np.maximum(out, 0.0, out=out)


# --------------------------------------------------------------------------
# constrained value iteration steps
# --------------------------------------------------------------------------

def _constrained_step_2d_numpy(ap, am, my, wy, jlo, jhi, payoff):
    nx, ny = ap.shape
    nc = len(my)
    best = np.full((nx, ny), -np.inf)
    arg = np.full((nx, ny), -1, dtype=np.int16)
    for c in range(nc):
        lo, hi = jlo[c], jhi[c]
        if hi < lo:
            continue
        ja = np.arange(lo, hi + 1) + my[c]
        jb = np.minimum(ja + 1, ny - 1)
        w = wy[c]
        sa = ap[:, ja] + am[:, ja]
        sb = ap[:, jb] + am[:, jb]
        cand = 0.5 * ((1.0 - w) * sa + w * sb) + payoff[:, c][:, None]
        seg = best[:, lo:hi + 1]
        better = cand > seg
        seg[better] = cand[better]
        arg[:, lo:hi + 1][better] = c
    return best, arg


def _constrained_step_3d_numpy(ap, am, m1, w1, lo1, hi1, m2, w2, lo2, hi2, payoff):
    nx, n1, n2 = ap.shape
    nc = len(m1)
    best = np.full((nx, n1, n2), -np.inf)
    arg = np.full((nx, n1, n2), -1, dtype=np.int16)
    s = ap + am
    for c in range(nc):
        a1, b1 = lo1[c], hi1[c]
        a2, b2 = lo2[c], hi2[c]
        if b1 < a1 or b2 < a2:
            continue
        ja = np.arange(a1, b1 + 1) + m1[c]
        jb = np.minimum(ja + 1, n1 - 1)
        ka = np.arange(a2, b2 + 1) + m2[c]
        kb = np.minimum(ka + 1, n2 - 1)
        v1, v2 = w1[c], w2[c]
        saa = s[:, ja[:, None], ka[None, :]]
        sab = s[:, ja[:, None], kb[None, :]]
        sba = s[:, jb[:, None], ka[None, :]]
        sbb = s[:, jb[:, None], kb[None, :]]
        cand = (1.0 - v1) * ((1.0 - v2) * saa + v2 * sab) \
            + v1 * ((1.0 - v2) * sba + v2 * sbb)
        cand = 0.5 * cand + payoff[:, c][:, None, None]
        seg = best[:, a1:b1 + 1, a2:b2 + 1]
        better = cand > seg
        seg[better] = cand[better]
        arg[:, a1:b1 + 1, a2:b2 + 1][better] = c
    return best, arg


# --------------------------------------------------------------------------
# augmented (level-set) steps
# --------------------------------------------------------------------------

def _shift_z_numpy(b, shift, dz):
    """Value of slab ``b`` at z-positions ``k + shift[i]`` per price row.

    Above the top z node the field continues with slope one (the augmented
    value is affine with unit slope for large budgets); below the bottom it
    continues constant.
    """
    nx, ny, nz = b.shape
    pos = np.arange(nz)[None, :] + shift[:, None]          # (nx, nz)
    kk = np.floor(pos).astype(np.int64)
    f = pos - kk
    kkc = np.clip(kk, 0, nz - 1)[:, None, :]
    kk1c = np.clip(kk + 1, 0, nz - 1)[:, None, :]
    fb = f[:, None, :]
    val = (1.0 - fb) * np.take_along_axis(b, kkc, axis=2) \
        + fb * np.take_along_axis(b, kk1c, axis=2)
    top = pos >= nz - 1
    bottom = pos <= 0.0
    if top.any():
        over = ((pos - (nz - 1)) * dz)[:, None, :]
        val = np.where(top[:, None, :], b[:, :, -1:] + over, val)
    if bottom.any():
        val = np.where(bottom[:, None, :], b[:, :, :1], val)
    return val


def _augmented_step_1dam_numpy(ap, am, my, wy, zeta, acells, arowsc, runcost, dz):
    nx, ny, nz = ap.shape
    nu, na = len(my), len(acells)
    j_idx = np.arange(ny)
    best = np.full((nx, ny, nz), np.inf)
    for c in range(nu):
        ja = np.clip(j_idx + my[c], 0, ny - 1)
        jb = np.clip(j_idx + my[c] + 1, 0, ny - 1)
        w = wy[c]
        bp = (1.0 - w) * ap[:, ja, :] + w * ap[:, jb, :]
        bm = (1.0 - w) * am[:, ja, :] + w * am[:, jb, :]
        for a in range(na):
            vp = _shift_z_numpy(bp, zeta[:, c] + arowsc * acells[a], dz)
            vm = _shift_z_numpy(bm, zeta[:, c] - arowsc * acells[a], dz)
            cand = 0.5 * (vp + vm)
            np.minimum(best, cand, out=best)
    best += runcost[None, :, None]
    return best


def _augmented_step_2dam_numpy(ap, am, m1, w1, m2, w2, zeta, acells, arowsc,
                               runcost, dz):
    nx, n1, n2, nz = ap.shape
    nc, na = len(m1), len(acells)
    j_idx = np.arange(n1)
    k_idx = np.arange(n2)
    best = np.full((nx, n1, n2, nz), np.inf)
    for c in range(nc):
        ja = np.clip(j_idx + m1[c], 0, n1 - 1)
        jb = np.clip(j_idx + m1[c] + 1, 0, n1 - 1)
        ka = np.clip(k_idx + m2[c], 0, n2 - 1)
        kb = np.clip(k_idx + m2[c] + 1, 0, n2 - 1)
        v1, v2 = w1[c], w2[c]
        bp = (1.0 - v1) * ((1.0 - v2) * ap[:, ja[:, None], ka[None, :], :]
                           + v2 * ap[:, ja[:, None], kb[None, :], :]) \
            + v1 * ((1.0 - v2) * ap[:, jb[:, None], ka[None, :], :]
                    + v2 * ap[:, jb[:, None], kb[None, :], :])
        bm = (1.0 - v1) * ((1.0 - v2) * am[:, ja[:, None], ka[None, :], :]
                           + v2 * am[:, ja[:, None], kb[None, :], :]) \
            + v1 * ((1.0 - v2) * am[:, jb[:, None], ka[None, :], :]
                    + v2 * am[:, jb[:, None], kb[None, :], :])
        bp2 = bp.reshape(nx, n1 * n2, nz)
        bm2 = bm.reshape(nx, n1 * n2, nz)
        for a in range(na):
            vp = _shift_z_numpy(bp2, zeta[:, c] + arowsc * acells[a], dz)
            vm = _shift_z_numpy(bm2, zeta[:, c] - arowsc * acells[a], dz)
            cand = (0.5 * (vp + vm)).reshape(nx, n1, n2, nz)
            np.minimum(best, cand, out=best)
    best += runcost[None, :, :, None]
    return best


# --------------------------------------------------------------------------
# per-node policy extraction at a prescribed z position
# --------------------------------------------------------------------------

def _zval_numpy(b, ii, jrow, pos, dz):
    """b[(ii, jrow, .)] interpolated at z position ``pos`` (cell units)."""
    nz = b.shape[-1]
    kk = np.clip(np.floor(pos).astype(np.int64), 0, nz - 1)
    kk1 = np.clip(kk + 1, 0, nz - 1)
    f = pos - np.floor(pos)
    val = (1.0 - f) * b[ii, jrow, kk] + f * b[ii, jrow, kk1]
    top = pos >= nz - 1
    bottom = pos <= 0.0
    val = np.where(top, b[ii, jrow, nz - 1] + (pos - (nz - 1)) * dz, val)
    val = np.where(bottom, b[ii, jrow, 0], val)
    return val


def _policy_step_1dam_numpy(ap, am, zpos, feasible, my, wy, zeta, acells,
                            arowsc, dz):
    nx, ny, nz = ap.shape
    nu, na = len(my), len(acells)
    ui = np.full((nx, ny), -1, dtype=np.int16)
    ai = np.full((nx, ny), -1, dtype=np.int16)
    ii, jj = np.nonzero(feasible)
    if len(ii) == 0:
        return ui, ai
    zp = zpos[ii, jj]
    rs = arowsc[ii]
    best = np.full(len(ii), np.inf)
    bu = np.full(len(ii), -1, dtype=np.int16)
    ba = np.full(len(ii), -1, dtype=np.int16)
    for c in range(nu):
        ja = np.clip(jj + my[c], 0, ny - 1)
        jb = np.clip(jj + my[c] + 1, 0, ny - 1)
        w = wy[c]
        zd = zp + zeta[ii, c]
        for a in range(na):
            pp = zd + rs * acells[a]
            pm = zd - rs * acells[a]
            vp = (1.0 - w) * _zval_numpy(ap, ii, ja, pp, dz) \
                + w * _zval_numpy(ap, ii, jb, pp, dz)
            vm = (1.0 - w) * _zval_numpy(am, ii, ja, pm, dz) \
                + w * _zval_numpy(am, ii, jb, pm, dz)
            cand = 0.5 * (vp + vm)
            better = cand < best
            best[better] = cand[better]
            bu[better] = c
            ba[better] = a
    ui[ii, jj] = bu
    ai[ii, jj] = ba
    return ui, ai


def _policy_step_2dam_numpy(ap, am, zpos, feasible, m1, w1, m2, w2, zeta,
                            acells, arowsc, dz):
    nx, n1, n2, nz = ap.shape
    nc, na = len(m1), len(acells)
    ui = np.full((nx, n1, n2), -1, dtype=np.int16)
    ai = np.full((nx, n1, n2), -1, dtype=np.int16)
    ii, jj, kk = np.nonzero(feasible)
    if len(ii) == 0:
        return ui, ai
    ap2 = ap.reshape(nx, n1 * n2, nz)
    am2 = am.reshape(nx, n1 * n2, nz)
    zp = zpos[ii, jj, kk]
    rs = arowsc[ii]
    best = np.full(len(ii), np.inf)
    bu = np.full(len(ii), -1, dtype=np.int16)
    ba = np.full(len(ii), -1, dtype=np.int16)
    for c in range(nc):
        ja = np.clip(jj + m1[c], 0, n1 - 1)
        jb = np.clip(jj + m1[c] + 1, 0, n1 - 1)
        ka = np.clip(kk + m2[c], 0, n2 - 1)
        kb = np.clip(kk + m2[c] + 1, 0, n2 - 1)
        v1, v2 = w1[c], w2[c]
        rows = (ja * n2 + ka, ja * n2 + kb, jb * n2 + ka, jb * n2 + kb)
        wts = ((1.0 - v1) * (1.0 - v2), (1.0 - v1) * v2,
               v1 * (1.0 - v2), v1 * v2)
        zd = zp + zeta[ii, c]
        for a in range(na):
            pp = zd + rs * acells[a]
            pm = zd - rs * acells[a]
            vp = np.zeros(len(ii))
            vm = np.zeros(len(ii))
            for row, wt in zip(rows, wts):
                vp += wt * _zval_numpy(ap2, ii, row, pp, dz)
                vm += wt * _zval_numpy(am2, ii, row, pm, dz)
            cand = 0.5 * (vp + vm)
            better = cand < best
            best[better] = cand[better]
            bu[better] = c
            ba[better] = a
    ui[ii, jj, kk] = bu
    ai[ii, jj, kk] = ba
    return ui, ai


# --------------------------------------------------------------------------
# numba variants
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _foot_z(row, pos, nz, dz):
        if pos >= nz - 1:
            return row[nz - 1] + (pos - (nz - 1)) * dz
        if pos <= 0.0:
            return row[0]
        kk = int(pos)
        f = pos - kk
        return (1.0 - f) * row[kk] + f * row[kk + 1]

    @njit(parallel=True, cache=True)
    def _constrained_step_2d_numba(ap, am, my, wy, jlo, jhi, payoff):
        nx, ny = ap.shape
        nc = my.shape[0]
        best = np.full((nx, ny), -np.inf)
        arg = np.full((nx, ny), -1, dtype=np.int16)
        for i in prange(nx):
            for c in range(nc):
                m = my[c]
                w = wy[c]
                pay = payoff[i, c]
                for j in range(jlo[c], jhi[c] + 1):
                    ja = j + m
                    jb = ja + 1
                    if jb > ny - 1:
                        jb = ny - 1
                    sa = ap[i, ja] + am[i, ja]
                    sb = ap[i, jb] + am[i, jb]
                    cand = 0.5 * ((1.0 - w) * sa + w * sb) + pay
                    if cand > best[i, j]:
                        best[i, j] = cand
                        arg[i, j] = c
        return best, arg

    @njit(parallel=True, cache=True)
    def _constrained_step_3d_numba(ap, am, m1, w1, lo1, hi1, m2, w2, lo2, hi2,
                                   payoff):
        nx, n1, n2 = ap.shape
        nc = m1.shape[0]
        best = np.full((nx, n1, n2), -np.inf)
        arg = np.full((nx, n1, n2), -1, dtype=np.int16)
        for i in prange(nx):
            for c in range(nc):
                v1 = w1[c]
                v2 = w2[c]
                pay = payoff[i, c]
                for j in range(lo1[c], hi1[c] + 1):
                    ja = j + m1[c]
                    jb = ja + 1
                    if jb > n1 - 1:
                        jb = n1 - 1
                    for k in range(lo2[c], hi2[c] + 1):
                        ka = k + m2[c]
                        kb = ka + 1
                        if kb > n2 - 1:
                            kb = n2 - 1
                        saa = ap[i, ja, ka] + am[i, ja, ka]
                        sab = ap[i, ja, kb] + am[i, ja, kb]
                        sba = ap[i, jb, ka] + am[i, jb, ka]
                        sbb = ap[i, jb, kb] + am[i, jb, kb]
                        cand = (1.0 - v1) * ((1.0 - v2) * saa + v2 * sab) \
                            + v1 * ((1.0 - v2) * sba + v2 * sbb)
                        cand = 0.5 * cand + pay
                        if cand > best[i, j, k]:
                            best[i, j, k] = cand
                            arg[i, j, k] = c
        return best, arg

    @njit(parallel=True, cache=True)
    def _augmented_step_1dam_numba(ap, am, my, wy, zeta, acells, arowsc,
                                   runcost, dz):
        nx, ny, nz = ap.shape
        nu = my.shape[0]
        na = acells.shape[0]
        out = np.empty((nx, ny, nz))
        for i in prange(nx):
            bp = np.empty(nz)
            bm = np.empty(nz)
            best = np.empty(nz)
            rs = arowsc[i]
            for j in range(ny):
                for k in range(nz):
                    best[k] = np.inf
                for c in range(nu):
                    m = my[c]
                    w = wy[c]
                    ja = min(max(j + m, 0), ny - 1)
                    jb = min(max(j + m + 1, 0), ny - 1)
                    for k in range(nz):
                        bp[k] = (1.0 - w) * ap[i, ja, k] + w * ap[i, jb, k]
                        bm[k] = (1.0 - w) * am[i, ja, k] + w * am[i, jb, k]
                    zd = zeta[i, c]
                    for a in range(na):
                        sp = zd + rs * acells[a]
                        sm = zd - rs * acells[a]
                        mp = int(math.floor(sp))
                        fp = sp - mp
                        mm = int(math.floor(sm))
                        fm = sm - mm
                        klo = max(0, max(-mp, -mm))
                        khi = min(nz - 1, min(nz - 2 - mp, nz - 2 - mm))
                        for k in range(klo, khi + 1):
                            vp = (1.0 - fp) * bp[k + mp] + fp * bp[k + mp + 1]
                            vm = (1.0 - fm) * bm[k + mm] + fm * bm[k + mm + 1]
                            cand = 0.5 * (vp + vm)
                            if cand < best[k]:
                                best[k] = cand
                        for k in range(0, min(klo, nz)):
                            vp = _foot_z(bp, k + sp, nz, dz)
                            vm = _foot_z(bm, k + sm, nz, dz)
                            cand = 0.5 * (vp + vm)
                            if cand < best[k]:
                                best[k] = cand
                        for k in range(max(khi + 1, 0), nz):
                            vp = _foot_z(bp, k + sp, nz, dz)
                            vm = _foot_z(bm, k + sm, nz, dz)
                            cand = 0.5 * (vp + vm)
                            if cand < best[k]:
                                best[k] = cand
                for k in range(nz):
                    out[i, j, k] = best[k] + runcost[j]
        return out

    @njit(parallel=True, cache=True)
    def _augmented_step_2dam_numba(ap, am, m1, w1, m2, w2, zeta, acells,
                                   arowsc, runcost, dz):
        nx, n1, n2, nz = ap.shape
        nc = m1.shape[0]
        na = acells.shape[0]
        out = np.empty((nx, n1, n2, nz))
        for i in prange(nx):
            bp = np.empty(nz)
            bm = np.empty(nz)
            best = np.empty(nz)
            rs = arowsc[i]
            for j in range(n1):
                for k2 in range(n2):
                    for k in range(nz):
                        best[k] = np.inf
                    for c in range(nc):
                        v1 = w1[c]
                        v2 = w2[c]
                        ja = min(max(j + m1[c], 0), n1 - 1)
                        jb = min(max(j + m1[c] + 1, 0), n1 - 1)
                        ka = min(max(k2 + m2[c], 0), n2 - 1)
                        kb = min(max(k2 + m2[c] + 1, 0), n2 - 1)
                        for k in range(nz):
                            bp[k] = (1.0 - v1) * ((1.0 - v2) * ap[i, ja, ka, k]
                                                  + v2 * ap[i, ja, kb, k]) \
                                + v1 * ((1.0 - v2) * ap[i, jb, ka, k]
                                        + v2 * ap[i, jb, kb, k])
                            bm[k] = (1.0 - v1) * ((1.0 - v2) * am[i, ja, ka, k]
                                                  + v2 * am[i, ja, kb, k]) \
                                + v1 * ((1.0 - v2) * am[i, jb, ka, k]
                                        + v2 * am[i, jb, kb, k])
                        zd = zeta[i, c]
                        for a in range(na):
                            sp = zd + rs * acells[a]
                            sm = zd - rs * acells[a]
                            mp = int(math.floor(sp))
                            fp = sp - mp
                            mm = int(math.floor(sm))
                            fm = sm - mm
                            klo = max(0, max(-mp, -mm))
                            khi = min(nz - 1, min(nz - 2 - mp, nz - 2 - mm))
                            for k in range(klo, khi + 1):
                                vp = (1.0 - fp) * bp[k + mp] + fp * bp[k + mp + 1]
                                vm = (1.0 - fm) * bm[k + mm] + fm * bm[k + mm + 1]
                                cand = 0.5 * (vp + vm)
                                if cand < best[k]:
                                    best[k] = cand
                            for k in range(0, min(klo, nz)):
                                vp = _foot_z(bp, k + sp, nz, dz)
                                vm = _foot_z(bm, k + sm, nz, dz)
                                cand = 0.5 * (vp + vm)
                                if cand < best[k]:
                                    best[k] = cand
                            for k in range(max(khi + 1, 0), nz):
                                vp = _foot_z(bp, k + sp, nz, dz)
                                vm = _foot_z(bm, k + sm, nz, dz)
                                cand = 0.5 * (vp + vm)
                                if cand < best[k]:
                                    best[k] = cand
                    for k in range(nz):
                        out[i, j, k2, k] = best[k] + runcost[j, k2]
        return out

    @njit(parallel=True, cache=True)
    def _policy_step_1dam_numba(ap, am, zpos, feasible, my, wy, zeta, acells,
                                arowsc, dz):
        nx, ny, nz = ap.shape
        nu = my.shape[0]
        na = acells.shape[0]
        ui = np.full((nx, ny), -1, dtype=np.int16)
        ai = np.full((nx, ny), -1, dtype=np.int16)
        for i in prange(nx):
            rs = arowsc[i]
            for j in range(ny):
                if not feasible[i, j]:
                    continue
                zp = zpos[i, j]
                best = np.inf
                bu = np.int16(-1)
                ba = np.int16(-1)
                for c in range(nu):
                    m = my[c]
                    w = wy[c]
                    ja = min(max(j + m, 0), ny - 1)
                    jb = min(max(j + m + 1, 0), ny - 1)
                    zd = zp + zeta[i, c]
                    for a in range(na):
                        pp = zd + rs * acells[a]
                        pm = zd - rs * acells[a]
                        vp = (1.0 - w) * _foot_z(ap[i, ja], pp, nz, dz) \
                            + w * _foot_z(ap[i, jb], pp, nz, dz)
                        vm = (1.0 - w) * _foot_z(am[i, ja], pm, nz, dz) \
                            + w * _foot_z(am[i, jb], pm, nz, dz)
                        cand = 0.5 * (vp + vm)
                        if cand < best:
                            best = cand
                            bu = np.int16(c)
                            ba = np.int16(a)
                ui[i, j] = bu
                ai[i, j] = ba
        return ui, ai

    @njit(parallel=True, cache=True)
    def _policy_step_2dam_numba(ap, am, zpos, feasible, m1, w1, m2, w2, zeta,
                                acells, arowsc, dz):
        nx, n1, n2, nz = ap.shape
        nc = m1.shape[0]
        na = acells.shape[0]
        ui = np.full((nx, n1, n2), -1, dtype=np.int16)
        ai = np.full((nx, n1, n2), -1, dtype=np.int16)
        for i in prange(nx):
            rs = arowsc[i]
            for j in range(n1):
                for k2 in range(n2):
                    if not feasible[i, j, k2]:
                        continue
                    zp = zpos[i, j, k2]
                    best = np.inf
                    bu = np.int16(-1)
                    ba = np.int16(-1)
                    for c in range(nc):
                        v1 = w1[c]
                        v2 = w2[c]
                        ja = min(max(j + m1[c], 0), n1 - 1)
                        jb = min(max(j + m1[c] + 1, 0), n1 - 1)
                        ka = min(max(k2 + m2[c], 0), n2 - 1)
                        kb = min(max(k2 + m2[c] + 1, 0), n2 - 1)
                        zd = zp + zeta[i, c]
                        for a in range(na):
                            pp = zd + rs * acells[a]
                            pm = zd - rs * acells[a]
                            vp = (1.0 - v1) * ((1.0 - v2) * _foot_z(ap[i, ja, ka], pp, nz, dz)
                                               + v2 * _foot_z(ap[i, ja, kb], pp, nz, dz)) \
                                + v1 * ((1.0 - v2) * _foot_z(ap[i, jb, ka], pp, nz, dz)
                                        + v2 * _foot_z(ap[i, jb, kb], pp, nz, dz))
                            vm = (1.0 - v1) * ((1.0 - v2) * _foot_z(am[i, ja, ka], pm, nz, dz)
                                               + v2 * _foot_z(am[i, ja, kb], pm, nz, dz)) \
                                + v1 * ((1.0 - v2) * _foot_z(am[i, jb, ka], pm, nz, dz)
                                        + v2 * _foot_z(am[i, jb, kb], pm, nz, dz))
                            cand = 0.5 * (vp + vm)
                            if cand < best:
                                best = cand
                                bu = np.int16(c)
                                ba = np.int16(a)
                    ui[i, j, k2] = bu
                    ai[i, j, k2] = ba
        return ui, ai


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def _pick(numba_fn_name, numpy_fn):
    if HAVE_NUMBA:
        return globals()[numba_fn_name]
    return numpy_fn


constrained_step_2d = _pick("_constrained_step_2d_numba", _constrained_step_2d_numpy)
constrained_step_3d = _pick("_constrained_step_3d_numba", _constrained_step_3d_numpy)
augmented_step_1dam = _pick("_augmented_step_1dam_numba", _augmented_step_1dam_numpy)
augmented_step_2dam = _pick("_augmented_step_2dam_numba", _augmented_step_2dam_numpy)
policy_step_1dam = _pick("_policy_step_1dam_numba", _policy_step_1dam_numpy)
policy_step_2dam = _pick("_policy_step_2dam_numba", _policy_step_2dam_numpy)

# explicit handles for the backend-comparison tests and the benchmark
numpy_impls = {
    "constrained_step_2d": _constrained_step_2d_numpy,
    "constrained_step_3d": _constrained_step_3d_numpy,
    "augmented_step_1dam": _augmented_step_1dam_numpy,
    "augmented_step_2dam": _augmented_step_2dam_numpy,
    "policy_step_1dam": _policy_step_1dam_numpy,
    "policy_step_2dam": _policy_step_2dam_numpy,
}
numba_impls = {
    name: globals().get(f"_{name}_numba") for name in numpy_impls
} if HAVE_NUMBA else {}
