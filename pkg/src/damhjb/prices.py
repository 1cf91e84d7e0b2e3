"""Electricity price models: SDE coefficients, moments, and path simulation.

Two nonnegative price dynamics are supported, both driven by a single
Brownian motion:

* ``gbm``   geometric Brownian motion, drift ``b*x``, volatility ``sigma*x``
* ``igbm``  mean-reverting (inhomogeneous) GBM, drift ``a - b*x``,
  volatility ``sigma*x``

Both have affine drift, so the mean ODE ``m'(s) = drift(s, m(s))`` solves in
closed form and the accumulated expected price integrates exactly.  Paths are
simulated with Euler-Maruyama, fully truncated at zero so they never go
negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PriceModel",
    "drift",
    "diffusion",
    "expected_price",
    "accumulated_price",
    "simulate_step",
    "simulate_paths",
]


@dataclass(frozen=True)
class PriceModel:
    """Parameters of the price SDE ``dX = drift dt + diffusion dB``.

    ``kind`` is ``"gbm"`` or ``"igbm"``.  For GBM the drift is ``b*x``; for
    IGBM it is ``a - b*x`` (long-run mean ``a/b`` when ``b > 0``).  The
    volatility is ``sigma*x`` for both, which keeps paths nonnegative.
    """

    kind: str
    b: float
    sigma: float
    a: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gbm", "igbm"):
            raise ValueError(f"unknown price model kind {self.kind!r}")
        if self.b < 0 or self.sigma < 0 or self.a < 0:
            raise ValueError("price model parameters must be nonnegative")
        if self.kind == "gbm" and self.a != 0.0:
            raise ValueError("GBM takes no mean-reversion level 'a'")

    @classmethod
    def gbm(cls, b: float, sigma: float) -> "PriceModel":
        return cls(kind="gbm", b=b, sigma=sigma)

    @classmethod
    def igbm(cls, a: float, b: float, sigma: float) -> "PriceModel":
        return cls(kind="igbm", b=b, sigma=sigma, a=a)

    @property
    def lipschitz_constant(self) -> float:
        """Constant bounding both the Lipschitz norm and linear growth of
        the coefficients."""
        return max(self.b, self.sigma, self.a)


def _check_price(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("price must be nonnegative")
    return x


def drift(model: PriceModel, t: float, x) -> np.ndarray:
    """Drift coefficient of the price SDE at time ``t``, price ``x >= 0``."""
    x = _check_price(x)
    if model.kind == "gbm":
        return model.b * x
    return model.a - model.b * x


def diffusion(model: PriceModel, t: float, x) -> np.ndarray:
    """Diffusion coefficient ``sigma*x`` (degenerate at zero)."""
    x = _check_price(x)
    return model.sigma * x


def expected_price(model: PriceModel, t: float, x, s: float) -> np.ndarray:
    """E[X_s | X_t = x], from the exact solution of the mean ODE.

    GBM: ``x * exp(b*(s-t))``.  IGBM: ``a/b + (x - a/b) * exp(-b*(s-t))``
    for ``b > 0`` and ``x + a*(s-t)`` in the degenerate ``b = 0`` case.
    """
    x = _check_price(x)
    if s < t:
        raise ValueError(f"need s >= t, got s={s} < t={t}")
    tau = s - t
    if model.kind == "gbm":
        return x * math.exp(model.b * tau)
    if model.b == 0.0:
        return x + model.a * tau
    mean_level = model.a / model.b
    return mean_level + (x - mean_level) * math.exp(-model.b * tau)


def accumulated_price(model: PriceModel, rate_cap: float, t: float, x,
                      horizon: float) -> np.ndarray:
    """``rate_cap * integral_t^T E[X_s | X_t = x] ds`` in closed form.

    This is the revenue of selling at the maximal production rate for the
    rest of the horizon.  Zero at ``t = T`` and nondecreasing in ``x``.
    """
    x = _check_price(x)
    if rate_cap < 0:
        raise ValueError("rate_cap must be nonnegative")
    if horizon < t:
        raise ValueError(f"need t <= horizon, got t={t} > T={horizon}")
    tau = horizon - t
    if model.kind == "gbm":
        if model.b == 0.0:
            return rate_cap * x * tau
        return rate_cap * x * math.expm1(model.b * tau) / model.b
    if model.b == 0.0:
        return rate_cap * (x * tau + 0.5 * model.a * tau * tau)
    mean_level = model.a / model.b
    decay = -math.expm1(-model.b * tau) / model.b  # (1 - e^{-b tau}) / b
    return rate_cap * (mean_level * tau + (x - mean_level) * decay)


def simulate_step(model: PriceModel, t: float, x, dt: float, noise) -> np.ndarray:
    """One Euler-Maruyama step with full truncation at zero.

    ``max(0, x + drift*dt + diffusion*sqrt(dt)*noise)``; truncation keeps
    every simulated price nonnegative.
    """
    x = _check_price(x)
    if dt <= 0:
        raise ValueError("dt must be positive")
    noise = np.asarray(noise, dtype=float)
    step = x + drift(model, t, x) * dt + diffusion(model, t, x) * math.sqrt(dt) * noise
    return np.maximum(step, 0.0)


def path_noise(seed: int, n_paths: int, n_steps: int) -> np.ndarray:
    """Standard normal increments, one independent substream per path.

    Streams are split from a single seed so results are reproducible and
    independent of how paths are batched or parallelised.
    """
    children = np.random.SeedSequence(seed).spawn(n_paths)
    out = np.empty((n_paths, n_steps))
    for p, child in enumerate(children):
        out[p] = np.random.default_rng(child).standard_normal(n_steps)
    return out


def simulate_paths(model: PriceModel, t: float, x0: float, horizon: float,
                   n_steps: int, n_paths: int, seed: int = 0):
    """Simulate ``n_paths`` price paths on ``[t, horizon]``.

    Returns ``(times, paths)`` with ``paths`` of shape
    ``(n_paths, n_steps + 1)``; column ``k`` holds ``X`` at ``times[k]``.
    """
    if n_steps < 1 or n_paths < 1:
        raise ValueError("need n_steps >= 1 and n_paths >= 1")
    times = np.linspace(t, horizon, n_steps + 1)
    dt = (horizon - t) / n_steps
    noise = path_noise(seed, n_paths, n_steps)
    paths = np.empty((n_paths, n_steps + 1))
    paths[:, 0] = x0
    x = np.full(n_paths, float(x0))
    for k in range(n_steps):
        x = simulate_step(model, times[k], x, dt, noise[:, k])
        paths[:, k + 1] = x
    return times, paths
