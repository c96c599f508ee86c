#!/usr/bin/env python3
"""
oracle.py

Independent time-stepping reference for the scalar mode equation

    y'(t) + lambda * (1 + gamma * d_t^alpha) y(t) = f(t),   y(0) = y0,

with d_t^alpha the Riemann-Liouville derivative.

Responsibilities:
- Uniform time grids and trajectories
- Grunwald-Letnikov discrete RL derivative
- Implicit Euler + GL memory solver (one scalar linear solve per step)
- Step-halving: Richardson extrapolation and observed convergence order

IMPORTANT:
The GL history starts from the impulse-consistent value
y0 / (1 + lambda h + lambda gamma h^(1-alpha)), while node 0 reports y0.
Starting the history from y0 itself scales the whole discrete solution by
that same factor, which only converges like h^(1-alpha).
"""

from __future__ import annotations

import math
import logging
from dataclasses import dataclass

import numpy as np

from kernel import FracParams

log = logging.getLogger(__name__)


# ================= CONFIG =================

EXACT_ORDER = math.inf      # sentinel: both nested differences vanish


class GridError(ValueError):
    pass


# ================= TYPES =================

@dataclass(frozen=True)
class TimeGrid:
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (self.t_end > 0 and math.isfinite(self.t_end)):
            raise GridError(f"t_end must be a positive finite number, got {self.t_end}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise GridError(f"n_steps must be an integer >= 2, got {self.n_steps}")

    @property
    def h(self) -> float:
        return self.t_end / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t_end, self.n_steps * factor)


@dataclass(frozen=True)
class TimeSeries:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n_steps + 1,):
            raise GridError(f"expected {self.grid.n_steps + 1} values, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise GridError("trajectory contains non-finite values")
        object.__setattr__(self, "values", values)

    def at(self, t: float) -> float:
        """Linear interpolation between grid nodes."""
        return float(np.interp(t, self.grid.nodes, self.values))


# ================= GL OPERATOR =================

def gl_weights(alpha: float, n: int) -> np.ndarray:
    """g_0 = 1, g_i = g_{i-1} (1 - (alpha + 1) / i), i = 1..n."""
    factors = 1.0 - (alpha + 1.0) / np.arange(1, n + 1)
    return np.concatenate(([1.0], np.cumprod(factors)))


def rl_derivative(series: TimeSeries, alpha: float) -> TimeSeries:
    """(d^alpha y)_j = h^(-alpha) sum_{i=0}^{j} g_i y_{j-i}."""
    if not (0.0 < alpha < 1.0):
        raise GridError(f"alpha must lie in (0, 1), got {alpha}")
    n = series.grid.n_steps
    g = gl_weights(alpha, n)
    conv = np.convolve(g, series.values)[: n + 1]
    return TimeSeries(series.grid, conv * series.grid.h ** (-alpha))


# ================= SOLVER =================

def _forcing_on(forcing, nodes):
    if forcing is None:
        return np.zeros_like(nodes)
    values = np.asarray(forcing(nodes), dtype=float)
    return np.broadcast_to(values, nodes.shape).astype(float)


def solve_scalar_ivp(params: FracParams, lam: float, y0: float, forcing, grid: TimeGrid) -> TimeSeries:
    if not (lam > 0 and math.isfinite(lam)):
        raise GridError(f"lambda must be a positive finite number, got {lam}")

    n, h = grid.n_steps, grid.h
    g = gl_weights(params.alpha, n)
    memory_coef = lam * params.gamma * h ** (-params.alpha)
    diag = 1.0 / h + lam + memory_coef
    f = _forcing_on(forcing, grid.nodes)

    hist = np.empty(n + 1)
    hist[0] = y0 / (h * diag)
    for j in range(1, n + 1):
        memory = np.dot(g[1:j + 1], hist[j - 1::-1])
        hist[j] = (hist[j - 1] / h - memory_coef * memory + f[j]) / diag

    if not np.all(np.isfinite(hist)):
        raise FloatingPointError(f"oracle overflow (lambda={lam}, n={n})")

    hist[0] = y0
    return TimeSeries(grid, hist)


def richardson(params: FracParams, lam: float, y0: float, forcing, grid: TimeGrid) -> TimeSeries:
    """2 y_{2n} - y_n on the base grid (removes the first-order error term)."""
    coarse = solve_scalar_ivp(params, lam, y0, forcing, grid)
    fine = solve_scalar_ivp(params, lam, y0, forcing, grid.refined(2))
    return TimeSeries(grid, 2.0 * fine.values[::2] - coarse.values)


def refine_scalar_ivp(params: FracParams, lam: float, y0: float, forcing, grid: TimeGrid,
                      tol: float = 1e-5, max_halvings: int = 3) -> TimeSeries:
    """
    Halve the step until two successive extrapolated runs agree at t_end
    to within `tol`.
    """
    current = richardson(params, lam, y0, forcing, grid)
    for _ in range(max_halvings):
        grid = grid.refined(2)
        nxt = richardson(params, lam, y0, forcing, grid)
        if abs(nxt.values[-1] - current.values[-1]) < tol:
            return nxt
        current = nxt

    if max_halvings:
        log.warning("step halving did not reach tol=%g at n=%d (lambda=%g)",
                    tol, grid.n_steps, lam)
    return current


def convergence_order(params: FracParams, lam: float, y0: float, forcing, base_grid: TimeGrid) -> float:
    if base_grid.n_steps < 64:
        raise GridError("convergence_order needs a base grid with n >= 64")

    ends = [
        solve_scalar_ivp(params, lam, y0, forcing, base_grid.refined(f)).values[-1]
        for f in (1, 2, 4)
    ]
    d1 = abs(ends[0] - ends[1])
    d2 = abs(ends[1] - ends[2])
    if d1 == 0.0 or d2 == 0.0:
        return EXACT_ORDER
    return math.log2(d1 / d2)
