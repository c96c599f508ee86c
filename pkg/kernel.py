#!/usr/bin/env python3
"""
kernel.py

Relaxation kernel of the fractional Rayleigh-Stokes mode equation

    y'(t) + lambda * (1 + gamma * d_t^alpha) y(t) = 0,   y(0) = 1,

written as B(lambda, t) = int_0^inf exp(-r t) b(lambda, r) dr.

Responsibilities:
- Spectral density b(lambda, r)
- B, dB/dt and dB/dlambda with controlled quadrature error
- Exact tail bounds for the truncation radius (upper incomplete gamma)
- Duhamel convolution with a scalar forcing
- Explicit constants: the dB/dt bound and the lower-bound constant

All integrals go through one adaptive engine: scipy's quad_vec (GK21) on
[0, R] with a fixed breakpoint ladder. The ladder depends only on the
inputs, so the same call always takes the same subdivision path.
"""

from __future__ import annotations

import math
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad, quad_vec
from scipy.special import gamma as gamma_fn, gammaincc

log = logging.getLogger(__name__)


# ================= CONFIG =================

LADDER_FIRST_DECADE = -8        # first breakpoint at r = 1e-8
MAX_RADIUS_DOUBLINGS = 64
MAX_RADIUS = 1e100             # keeps r**2 finite inside the density
SMALL_T_TERM = np.finfo(float).eps


# ================= ERRORS =================

class KernelDomainError(ValueError):
    pass


class QuadratureError(RuntimeError):
    def __init__(self, message, lam=None, t=None):
        super().__init__(message)
        self.lam = lam
        self.t = t


# ================= TYPES =================

def exponential_tail_cutoff(t: float, tol: float) -> float:
    """Smallest R >= 1 with exp(-R t) / t <= tol; inf when t is too small to represent R."""
    return max(1.0, -(math.log(t) + math.log(tol)) / t)


@dataclass(frozen=True)
class FracParams:
    alpha: float
    gamma: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise KernelDomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not (self.gamma > 0.0 and math.isfinite(self.gamma)):
            raise KernelDomainError(f"gamma must be a positive finite number, got {self.gamma}")

    @property
    def sin_pa(self) -> float:
        return math.sin(math.pi * self.alpha)

    @property
    def cos_pa(self) -> float:
        return math.cos(math.pi * self.alpha)


@dataclass(frozen=True)
class QuadConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_subdivisions: int = 200
    tail_cutoff: Callable[[float, float], float] = exponential_tail_cutoff
    duhamel_panels: int = 64
    duhamel_order: int = 24

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise KernelDomainError("rel_tol and abs_tol must be > 0")
        if self.max_subdivisions < 1:
            raise KernelDomainError("max_subdivisions must be >= 1")
        if self.duhamel_panels < 1 or self.duhamel_order < 1:
            raise KernelDomainError("duhamel_panels and duhamel_order must be >= 1")


@dataclass(frozen=True)
class KernelValue:
    value: float
    est_error: float


# -------------------- validation --------------------

def _check_lambda(lam):
    if not (lam > 0 and math.isfinite(lam)):
        raise KernelDomainError(f"lambda must be a positive finite number, got {lam}")


def _check_times(ts, strictly_positive=False):
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if ts.size == 0:
        raise KernelDomainError("empty time vector")
    if not np.all(np.isfinite(ts)):
        raise KernelDomainError("times must be finite")
    if strictly_positive and np.any(ts <= 0):
        raise KernelDomainError("times must be > 0")
    if np.any(ts < 0):
        raise KernelDomainError("times must be >= 0")
    return ts


# ================= DENSITY =================

def _density(params: FracParams, lam, r):
    ra = r ** params.alpha
    g = lam * params.gamma * ra
    num = (params.gamma / math.pi) * lam * ra * params.sin_pa
    den = (-r + g * params.cos_pa + lam) ** 2 + (g * params.sin_pa) ** 2
    return num / den


def density(params: FracParams, lam: float, r):
    """b(lambda, r); accepts a scalar or an array of r > 0."""
    _check_lambda(lam)
    r_arr = np.asarray(r, dtype=float)
    if np.any(~(r_arr > 0)):
        raise KernelDomainError("r must be > 0")
    values = _density(params, lam, r_arr)
    if np.ndim(r) == 0:
        return float(values)
    return values


def _density_scaled(params: FracParams, lam, r):
    # lambda * b, with the denominator divided through by lambda^2
    g = params.gamma * r ** params.alpha
    d1 = (-r / lam + g * params.cos_pa + 1.0) ** 2 + (g * params.sin_pa) ** 2
    return (params.gamma / math.pi) * r ** params.alpha * params.sin_pa / d1, d1, g


# ================= QUADRATURE ENGINE =================

def _tail_bound(ts, radius, majorants):
    """
    Bound of int_R^inf exp(-r t) * scale * r^power dr for every t,
    summed over the (power, scale) majorant terms.
    """
    ts = np.asarray(ts, dtype=float)
    total = np.zeros_like(ts)
    for power, scale in majorants:
        a = power + 1.0
        total += scale * gamma_fn(a) * gammaincc(a, radius * ts) / ts ** a
    return total


def _truncation_radius(t_min, majorants, cfg: QuadConfig):
    budget = 0.5 * cfg.abs_tol
    scale = sum(s for _, s in majorants)
    radius = cfg.tail_cutoff(t_min, budget / scale)
    for _ in range(MAX_RADIUS_DOUBLINGS):
        if not radius <= MAX_RADIUS:
            raise QuadratureError(f"truncation radius exceeds {MAX_RADIUS:g} at t={t_min}", t=t_min)
        if _tail_bound([t_min], radius, majorants)[0] < budget:
            return radius
        radius *= 2.0
    raise QuadratureError(f"no truncation radius meets abs_tol at t={t_min}", t=t_min)


def _ladder(radius, lam):
    top = int(math.ceil(math.log10(radius)))
    points = {10.0 ** k for k in range(LADDER_FIRST_DECADE, top + 1)}
    points.add(float(lam))
    return sorted(p for p in points if 0.0 < p < radius)


def _laplace_quad(integrand, ts, majorants, lam, cfg: QuadConfig, what):
    """
    int_0^inf integrand(r, ts) dr for a vector of positive times at once.

    Returns (values, errors); errors add the shared quadrature estimate
    and the per-time tail bound.
    """
    radius = _truncation_radius(float(ts.min()), majorants, cfg)
    points = _ladder(radius, lam)

    value, err, info = quad_vec(
        lambda r: integrand(r, ts),
        0.0,
        radius,
        epsabs=0.5 * cfg.abs_tol,
        epsrel=cfg.rel_tol,
        norm="max",
        limit=len(points) + 1 + cfg.max_subdivisions,
        points=points,
        full_output=True,
    )
    if not info.success:
        raise QuadratureError(
            f"{what}: quadrature did not converge (lambda={lam}, "
            f"t_min={float(ts.min())}): {info.message}",
            lam=lam,
            t=float(ts.min()),
        )

    errors = float(err) + _tail_bound(ts, radius, majorants)
    return np.asarray(value, dtype=float), errors


def _b_majorant(params: FracParams, lam):
    # b <= 1 / (pi gamma lambda sin(pi alpha) r^alpha) for every r > 0
    return 1.0 / (math.pi * params.gamma * lam * params.sin_pa)


# ================= KERNEL =================

def small_time_term(params: FracParams, lam: float, ts):
    """lambda t + lambda gamma t^(1-alpha) / Gamma(2-alpha), so that 1 - B ~ this as t -> 0."""
    ts = np.asarray(ts, dtype=float)
    a = params.alpha
    return lam * ts + lam * params.gamma * ts ** (1.0 - a) / gamma_fn(2.0 - a)


def eval_B_many(params: FracParams, lam: float, ts, cfg: QuadConfig = QuadConfig()):
    """B(lambda, t) for a vector of t >= 0; t = 0 is exactly 1."""
    _check_lambda(lam)
    ts = _check_times(ts)

    values = np.ones_like(ts)
    errors = np.zeros_like(ts)
    positive = ts > 0

    # B = 1 - lambda t - lambda gamma t^(1-alpha) / Gamma(2-alpha) + ...;
    # below machine precision the leading term is the answer
    term = np.zeros_like(ts)
    term[positive] = small_time_term(params, lam, ts[positive])
    tiny = positive & (term < SMALL_T_TERM)
    values[tiny] = 1.0 - term[tiny]
    errors[tiny] = term[tiny]

    rest = positive & ~tiny
    if not np.any(rest):
        return values, errors

    scale = _b_majorant(params, lam)

    def integrand(r, t):
        return np.exp(-r * t) * _density(params, lam, r)

    v, e = _laplace_quad(integrand, ts[rest], [(-params.alpha, scale)], lam, cfg, "B")
    values[rest] = v
    errors[rest] = e
    return values, errors


def eval_B(params: FracParams, lam: float, t: float, cfg: QuadConfig = QuadConfig()) -> KernelValue:
    values, errors = eval_B_many(params, lam, [t], cfg)
    return KernelValue(float(values[0]), float(errors[0]))


def eval_dBdt_many(params: FracParams, lam: float, ts, cfg: QuadConfig = QuadConfig()):
    _check_lambda(lam)
    ts = _check_times(ts, strictly_positive=True)
    scale = _b_majorant(params, lam)

    def integrand(r, t):
        return -r * np.exp(-r * t) * _density(params, lam, r)

    return _laplace_quad(integrand, ts, [(1.0 - params.alpha, scale)], lam, cfg, "dB/dt")


def eval_dBdt(params: FracParams, lam: float, t: float, cfg: QuadConfig = QuadConfig()) -> KernelValue:
    values, errors = eval_dBdt_many(params, lam, [t], cfg)
    return KernelValue(float(values[0]), float(errors[0]))


def eval_dBdlambda_many(params: FracParams, lam: float, ts, cfg: QuadConfig = QuadConfig()):
    """
    dB/dlambda as the sum of two integrals against b1 = lambda * b:

        -(1/lambda^2) int e^{-t r} b1 dr
        +(2/lambda^3) int e^{-t r} b1 r (r/lambda - gamma r^a cos(pi a) - 1) / D1 dr
    """
    _check_lambda(lam)
    ts = _check_times(ts, strictly_positive=True)
    s = params.sin_pa
    majorants = [
        (-params.alpha, 1.0 / (math.pi * params.gamma * lam ** 2 * s)),
        (1.0 - 2.0 * params.alpha, 1.0 / (lam ** 3 * math.pi * params.gamma ** 2 * s ** 2)),
    ]

    def integrand(r, t):
        b1, d1, g = _density_scaled(params, lam, r)
        first = -b1 / lam ** 2
        second = (2.0 / lam ** 3) * b1 * r * (r / lam - g * params.cos_pa - 1.0) / d1
        return np.exp(-r * t) * (first + second)

    return _laplace_quad(integrand, ts, majorants, lam, cfg, "dB/dlambda")


def eval_dBdlambda(params: FracParams, lam: float, t0: float, cfg: QuadConfig = QuadConfig()) -> KernelValue:
    values, errors = eval_dBdlambda_many(params, lam, [t0], cfg)
    return KernelValue(float(values[0]), float(errors[0]))


# ================= CONSTANTS =================

def derivative_bound_constant(params: FracParams) -> float:
    """|dB/dt| <= const / (lambda t^(2 - alpha)) with this const."""
    return gamma_fn(2.0 - params.alpha) / (params.gamma * math.pi * params.sin_pa)


def lower_bound_constant(params: FracParams, lambda1: float, T: float, cfg: QuadConfig = QuadConfig()) -> float:
    """
    C(alpha, gamma, lambda1) = (gamma sin(pi alpha) / 4) *
        int_0^inf r^alpha e^{-r T} / (r^2/lambda1^2 + gamma^2 r^(2 alpha) + 1) dr.

    The integral representation gives B(lambda, t) >= C / (pi lambda) for
    lambda >= lambda1 and 0 <= t <= T. Without the 1/pi factor the bound
    holds at alpha = 1/2 but can fail for small alpha.
    """
    _check_lambda(lambda1)
    if not (T > 0 and math.isfinite(T)):
        raise KernelDomainError(f"T must be a positive finite number, got {T}")

    a, g = params.alpha, params.gamma
    front = g * params.sin_pa / 4.0

    def integrand(r, t):
        return front * r ** a * np.exp(-r * t) / (r ** 2 / lambda1 ** 2 + g ** 2 * r ** (2 * a) + 1.0)

    value, _ = _laplace_quad(integrand, np.array([float(T)]), [(-a, params.sin_pa / (4.0 * g))], lambda1, cfg, "C(alpha,gamma,lambda1)")
    return float(value[0])


def normalization(params: FracParams, lam: float) -> float:
    """int_0^inf b(lambda, r) dr, which equals B(lambda, 0) = 1."""
    _check_lambda(lam)
    f = lambda r: _density(params, lam, r)
    total = 0.0
    for a, b in ((0.0, 1.0), (1.0, max(lam, 1.0) * 100.0)):
        total += quad(f, a, b, epsabs=1e-13, epsrel=1e-12, limit=400)[0]
    total += quad(f, max(lam, 1.0) * 100.0, np.inf, epsabs=1e-13, epsrel=1e-12, limit=400)[0]
    return total


# ================= DUHAMEL =================

@lru_cache(maxsize=32)
def _gauss_rule(order):
    return leggauss(order)


def gauss_panels(t_end: float, panels: int, order: int):
    """Composite Gauss-Legendre nodes/weights on uniform panels of [0, t_end]."""
    x, w = _gauss_rule(order)
    edges = np.linspace(0.0, t_end, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _sample(forcing, tau):
    values = np.asarray(forcing(tau), dtype=float)
    values = np.broadcast_to(values, np.shape(tau)).astype(float)
    if not np.all(np.isfinite(values)):
        raise KernelDomainError("forcing is not finite on the integration interval")
    return values


def duhamel(params: FracParams, lam: float, t: float, forcing, cfg: QuadConfig = QuadConfig()) -> float:
    """
    int_0^t B(lambda, t - tau) f(tau) dtau.

    `forcing` takes an array of times and returns an array (or a scalar,
    which is broadcast).
    """
    _check_lambda(lam)
    if not (t >= 0 and math.isfinite(t)):
        raise KernelDomainError(f"t must be >= 0, got {t}")
    if t == 0:
        return 0.0

    tau, weights = gauss_panels(t, cfg.duhamel_panels, cfg.duhamel_order)
    f_vals = _sample(forcing, tau)
    if not np.any(f_vals):
        return 0.0

    b_vals, _ = eval_B_many(params, lam, t - tau, cfg)
    return float(np.dot(weights, b_vals * f_vals))


def duhamel_on_grid(params: FracParams, lam: float, forcing, times, cfg: QuadConfig = QuadConfig()):
    """
    Duhamel integral at every node of a uniform grid starting at 0, using
    product-trapezoid weights and one kernel pass over the grid.
    """
    times = _check_times(times)
    if times[0] != 0.0 or times.size < 2:
        raise KernelDomainError("grid must start at 0 and have at least two nodes")
    h = times[1] - times[0]

    f_vals = _sample(forcing, times)
    if not np.any(f_vals):
        return np.zeros_like(times)

    b_vals, _ = eval_B_many(params, lam, times, cfg)
    conv = np.convolve(b_vals, f_vals)[: times.size]
    omega = h * (conv - 0.5 * b_vals * f_vals[0] - 0.5 * b_vals[0] * f_vals)
    omega[0] = 0.0
    return omega


def integrate_B(params: FracParams, lam: float, horizons, cfg: QuadConfig = QuadConfig()):
    """int_0^T B(lambda, t) dt for each horizon T, from one kernel pass."""
    horizons = _check_times(horizons, strictly_positive=True)
    rules = [gauss_panels(T, cfg.duhamel_panels, cfg.duhamel_order) for T in horizons]
    nodes = np.concatenate([n for n, _ in rules])
    b_vals, _ = eval_B_many(params, lam, nodes, cfg)

    out = np.empty_like(horizons)
    start = 0
    for i, (n, w) in enumerate(rules):
        out[i] = np.dot(w, b_vals[start:start + n.size])
        start += n.size
    return out
