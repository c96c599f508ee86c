#!/usr/bin/env python3
"""
analysis.py

Batch checks and landscape reports built on top of the kernel and the
nonlocal solver.

Responsibilities:
- Kernel inequality suite over a (lambda, t) product grid -> BoundReport list
- Per-mode conditioning tables for a given beta (amplification 1/|B - beta|)
- Sign scans locating Lambda0 (large-lambda monotonicity) and T0
- Coercive-shape fits for the homogeneous and the forced parts
- Quadrature vs time-stepping comparison tables

IMPORTANT:
Bounds with explicit constants are hard checks with a fixed slack.
Bounds whose constants are not explicit are fitted, and only the stability
of the fit under one grid refinement is asserted.
"""

from __future__ import annotations

import math
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from common import parallel_map
from kernel import (
    FracParams,
    QuadConfig,
    derivative_bound_constant,
    duhamel_on_grid,
    eval_B_many,
    eval_dBdlambda_many,
    eval_dBdt_many,
    integrate_B,
    lower_bound_constant,
)
from nonlocal_problem import (
    DEFAULT_K0_TOL,
    Forcing,
    OmegaTable,
    SolutionSeries,
    forcing_regularity,
    kernel_matrix,
    kernel_per_mode,
)
from oracle import TimeGrid, TimeSeries, refine_scalar_ivp, rl_derivative
from spectrum import Spectrum

log = logging.getLogger(__name__)


# ================= CONFIG =================

EXACT_SLACK = 1e-8
LOWER_BOUND_SLACK = 1e-10
REFINEMENT_DRIFT = 0.1

DEFAULT_LAMBDA_GRID = tuple(float(x) for x in np.logspace(0.0, 4.0, 25))
DEFAULT_T_GRID = (0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0)

BOUND_RANGE = "kernel_range"
BOUND_MONOTONE = "kernel_monotone"
BOUND_INTEGRAL = "kernel_integral"
BOUND_DECAY_SHAPE = "kernel_decay_shape"
BOUND_TIME_DERIVATIVE = "kernel_time_derivative"
BOUND_LOWER = "kernel_lower_bound"
BOUND_COERCIVE_HOMOGENEOUS = "coercive_homogeneous"
BOUND_COERCIVE_INHOMOGENEOUS = "coercive_inhomogeneous"

CONDITIONING_HEADER = ["beta", "k", "lambda", "B_t0", "gap", "amplification", "resonant"]


# ================= REPORTS =================

@dataclass(frozen=True)
class BoundReport:
    bound_id: str
    grid: dict
    max_violation: float
    fitted_constant: float
    tolerance: float
    hard: bool
    passed: bool
    notes: tuple = ()
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "bound_id": self.bound_id,
            "grid": self.grid,
            "max_violation": self.max_violation,
            "fitted_constant": self.fitted_constant,
            "tolerance": self.tolerance,
            "hard": self.hard,
            "passed": self.passed,
            "notes": list(self.notes),
            "details": self.details,
        }


def _hard(bound_id, grid, violation, constant, tolerance, notes=()):
    return BoundReport(
        bound_id=bound_id,
        grid=grid,
        max_violation=float(violation),
        fitted_constant=float(constant),
        tolerance=tolerance,
        hard=True,
        passed=bool(violation <= tolerance),
        notes=tuple(notes),
    )


# ================= KERNEL BOUNDS =================

def _grid_summary(params, lambdas, ts, T):
    return {
        "alpha": params.alpha,
        "gamma": params.gamma,
        "lambda": [float(lambdas.min()), float(lambdas.max()), int(lambdas.size)],
        "t": [float(t) for t in ts],
        "T": float(T),
    }


def _scan_lambda(params, lam, ts, horizons, T, lower_c, cfg):
    """All per-lambda violations for one row of the product grid."""
    B, _ = eval_B_many(params, lam, ts, cfg)
    positive = ts > 0

    out = {}
    zero_col = B[~positive]
    inner = B[positive]
    out["range"] = max(
        float(np.max(np.abs(zero_col - 1.0))) if zero_col.size else 0.0,
        float(np.max(np.maximum(inner - 1.0, -inner), initial=0.0)),
    )
    out["monotone"] = float(np.max(np.diff(B), initial=0.0))

    if horizons.size:
        integrals = integrate_B(params, lam, horizons, cfg)
        out["integral"] = float(np.max(integrals - 1.0 / lam))
    else:
        out["integral"] = -math.inf

    tp = ts[positive]
    out["decay"] = float(np.max(lam * inner * np.maximum(tp, tp ** (1.0 - params.alpha)), initial=0.0))

    if tp.size:
        dB, _ = eval_dBdt_many(params, lam, tp, cfg)
        out["derivative"] = float(np.max(np.abs(dB) * lam * tp ** (2.0 - params.alpha)))
    else:
        out["derivative"] = 0.0

    within = ts <= T
    out["lower"] = float(np.max(lower_c / (math.pi * lam) - B[within], initial=-math.inf))
    out["lower_displayed"] = float(np.max(lower_c / lam - B[within], initial=-math.inf))
    return out


def verify_kernel_bounds(params: FracParams, lambda_grid=DEFAULT_LAMBDA_GRID, t_grid=DEFAULT_T_GRID,
                         T: Optional[float] = None, cfg: QuadConfig = QuadConfig(), threads: int = 1) -> list:
    lambdas = np.asarray(lambda_grid, dtype=float)
    ts = np.sort(np.asarray(t_grid, dtype=float))
    if lambdas.size == 0 or ts.size == 0:
        raise ValueError("lambda and t grids must be nonempty")
    if np.any(lambdas <= 0) or np.any(ts < 0):
        raise ValueError("grids must be positive (t may include 0)")
    T = float(ts.max()) if T is None else float(T)

    horizons = ts[(ts > 0) & (ts <= T)]
    lambda1 = float(lambdas.min())
    lower_c = lower_bound_constant(params, lambda1, T, cfg)
    deriv_c = derivative_bound_constant(params)
    grid = _grid_summary(params, lambdas, ts, T)

    rows = parallel_map(lambda lam: _scan_lambda(params, float(lam), ts, horizons, T, lower_c, cfg), lambdas, threads)

    def worst(key):
        return max(r[key] for r in rows)

    range_v = worst("range")
    monotone_v = max(0.0, worst("monotone"))
    integral_v = max(0.0, worst("integral"))
    deriv_v = max(0.0, worst("derivative") - deriv_c)
    lower_v = max(0.0, worst("lower"))
    decay_c = worst("decay")

    reports = [
        _hard(BOUND_RANGE, grid, range_v, 1.0, EXACT_SLACK, ["B(lambda, 0) = 1 and 0 < B < 1 for t > 0"]),
        _hard(BOUND_MONOTONE, grid, monotone_v, 0.0, EXACT_SLACK, ["B strictly decreasing in t"]),
        _hard(BOUND_INTEGRAL, grid, integral_v, 1.0, EXACT_SLACK, ["int_0^T B dt <= 1 / lambda"]),
        BoundReport(
            bound_id=BOUND_DECAY_SHAPE,
            grid=grid,
            max_violation=0.0,
            fitted_constant=decay_c,
            tolerance=math.inf,
            hard=False,
            passed=math.isfinite(decay_c),
            notes=("lambda B(lambda, t) <= C min(1/t, t^(alpha-1)); C fitted over the grid",),
        ),
        _hard(BOUND_TIME_DERIVATIVE, grid, deriv_v, deriv_c, EXACT_SLACK,
              ["|dB/dt| lambda t^(2-alpha) <= Gamma(2-alpha) / (gamma pi sin(pi alpha))"]),
        BoundReport(
            bound_id=BOUND_LOWER,
            grid=grid,
            max_violation=lower_v,
            fitted_constant=lower_c,
            tolerance=LOWER_BOUND_SLACK,
            hard=True,
            passed=lower_v <= LOWER_BOUND_SLACK,
            notes=(
                f"B(lambda, t) >= C / (pi lambda) for lambda >= {lambda1:g}, t <= {T:g}",
                "C / lambda without the 1/pi factor is reported in details, not asserted",
            ),
            details={
                "asserted_constant": lower_c / math.pi,
                "displayed_constant_violation": max(0.0, worst("lower_displayed")),
            },
        ),
    ]

    for r in reports:
        if r.hard and not r.passed:
            log.warning("bound %s violated by %.3e (tol %.1e)", r.bound_id, r.max_violation, r.tolerance)
    return reports


# ================= CONDITIONING =================

@dataclass(frozen=True)
class ConditioningRow:
    k: int
    lam: float
    b_t0: float
    gap: float
    amplification: float
    resonant: bool


@dataclass(frozen=True)
class ConditioningTable:
    beta: float
    t0: float
    rows: tuple
    loglog_slope: Optional[float] = None

    @property
    def max_amplification(self) -> float:
        finite = [r.amplification for r in self.rows if not r.resonant]
        return max(finite) if finite else math.nan

    def as_rows(self) -> list:
        return [
            [self.beta, r.k, r.lam, r.b_t0, r.gap, r.amplification, int(r.resonant)]
            for r in self.rows
        ]


def amplification_spectrum(beta: float, t0: float, spectrum: Spectrum, params: FracParams,
                           cfg: QuadConfig = QuadConfig(), k0_tol: float = DEFAULT_K0_TOL,
                           threads: int = 1) -> ConditioningTable:
    b_t0 = kernel_per_mode(spectrum, params, t0, cfg, threads)
    gaps = b_t0 - beta

    rows = []
    for m, b, gap in zip(spectrum.modes, b_t0, gaps):
        resonant = 0.0 < beta < 1.0 and abs(gap) <= k0_tol
        amp = math.inf if resonant else 1.0 / abs(gap)
        rows.append(ConditioningRow(m.index, m.lam, float(b), float(gap), amp, resonant))

    slope = None
    if beta == 0.0 and spectrum.K >= 2:
        lams = np.array([r.lam for r in rows])
        amps = np.array([r.amplification for r in rows])
        slope = float(np.polyfit(np.log(lams), np.log(amps), 1)[0])

    flagged = [r.k for r in rows if r.resonant]
    if flagged:
        log.info("beta=%g: resonant modes %s", beta, flagged)
    return ConditioningTable(float(beta), float(t0), tuple(rows), slope)


# ================= SIGN SCANS =================

def _first_stable_index(flags):
    """Smallest i with flags[i:] all True, or None."""
    idx = None
    for i in range(len(flags) - 1, -1, -1):
        if not flags[i]:
            break
        idx = i
    return idx


def locate_Lambda0(params: FracParams, t0: float, lambda_grid, cfg: QuadConfig = QuadConfig(),
                   threads: int = 1) -> Optional[float]:
    """
    Smallest grid lambda beyond which dB/dlambda(., t0) < 0 at every larger
    grid point. None when the grid is degenerate or the sign never settles.
    """
    lambdas = np.asarray(lambda_grid, dtype=float)
    if lambdas.size < 2:
        return None
    if np.any(np.diff(lambdas) <= 0):
        raise ValueError("lambda grid must be increasing")

    values = parallel_map(lambda lam: eval_dBdlambda_many(params, float(lam), [t0], cfg)[0][0], lambdas, threads)
    idx = _first_stable_index([v < 0 for v in values])
    return None if idx is None else float(lambdas[idx])


def locate_T0(params: FracParams, lambda1: float, t_grid, lambda_grid, cfg: QuadConfig = QuadConfig(),
              threads: int = 1) -> Optional[float]:
    """
    Smallest grid t >= 1 from which dB/dlambda(lambda, t) < 0 for every
    lambda >= lambda1 on the lambda grid. None when not found.
    """
    lambdas = np.asarray(lambda_grid, dtype=float)
    lambdas = lambdas[lambdas >= lambda1]
    if lambdas.size == 0:
        raise ValueError(f"lambda grid has no point >= lambda1={lambda1}")

    ts = np.sort(np.asarray(t_grid, dtype=float))
    ts = ts[ts >= 1.0]
    if ts.size == 0:
        return None

    rows = parallel_map(lambda lam: eval_dBdlambda_many(params, float(lam), ts, cfg)[0], lambdas, threads)
    negative = np.all(np.array(rows) < 0, axis=0)
    idx = _first_stable_index(list(negative))
    return None if idx is None else float(ts[idx])


# ================= COERCIVE FITS =================

def _dBdt_matrix(spectrum, params, times, cfg, threads):
    groups = spectrum.groups()
    lams = [spectrum.mode(idx[0]).lam for idx in groups.values()]
    rows = parallel_map(lambda lam: eval_dBdt_many(params, lam, times, cfg)[0], lams, threads)

    out = np.empty((spectrum.K, len(times)))
    for members, row in zip(groups.values(), rows):
        for k in members:
            out[k - 1] = row
    return out


def _frac_of_rows(rows, grid, alpha):
    return np.array([rl_derivative(TimeSeries(grid, row), alpha).values for row in rows])


def _fit(quantity, nodes, exponent):
    """max over t > 0 of quantity(t) * t^exponent."""
    mask = nodes > 0
    if not np.any(quantity[mask]):
        return 0.0
    return float(np.max(quantity[mask] * nodes[mask] ** exponent))


def _homogeneous_quantities(sol: SolutionSeries, grid: TimeGrid, threads: int):
    """(w, |d_t w|^2 + |A w|^2 + |d^alpha A w|^2) on the grid nodes."""
    nodes = grid.nodes
    lams = sol.spectrum.lambdas[:, None]
    h = sol.h[:, None]

    w = h * kernel_matrix(sol.spectrum, sol.params, nodes, sol.kernel_cfg, threads)
    dw = np.zeros_like(w)
    dw[:, 1:] = h * _dBdt_matrix(sol.spectrum, sol.params, nodes[1:], sol.kernel_cfg, threads)
    Aw = lams * w
    frac = _frac_of_rows(Aw, grid, sol.params.alpha)

    Q = np.sum(dw ** 2 + Aw ** 2 + frac ** 2, axis=0)
    return w, dw, Q


def _omega_on_grid(spectrum, params, forcing, grid, cfg, threads):
    nodes = grid.nodes
    if forcing is None or forcing.is_zero:
        return np.zeros((spectrum.K, nodes.size))
    rows = parallel_map(
        lambda m: duhamel_on_grid(params, m.lam, forcing.mode(m.index), nodes, cfg),
        spectrum.modes,
        threads,
    )
    return np.array(rows)


def _forced_quantity(spectrum, params, omega, grid):
    lams = spectrum.lambdas[:, None]
    d_omega = np.gradient(omega, grid.h, axis=1)
    frac = _frac_of_rows(lams * omega, grid, params.alpha)
    return np.sum(d_omega ** 2 + frac ** 2, axis=0), d_omega


def _drift(coarse, fine):
    if coarse == 0.0:
        return 0.0 if fine == 0.0 else math.inf
    return abs(fine - coarse) / abs(coarse)


def coercive_report(sol: SolutionSeries, omega: Optional[OmegaTable], grid: TimeGrid,
                    threads: int = 1) -> BoundReport:
    """
    Fit C in |d_t w|^2 + |A w|^2 + |d^alpha A w|^2 <= C t^(-2(2-alpha)) |psi|^2
    on the grid and on its refinement. The t^(-2(1-alpha)) fit and, when
    there is a forcing part, the same quantity for u = w + omega are carried
    in `details`.
    """
    if grid.t_end > sol.T * (1 + 1e-12):
        raise ValueError(f"grid ends at {grid.t_end} beyond T={sol.T}")

    a = sol.params.alpha
    strong, weak = 2.0 * (2.0 - a), 2.0 * (1.0 - a)
    psi2 = float(np.dot(sol.psi, sol.psi))
    forcing = None if omega is None else omega.forcing

    fits = {}
    for label, g in (("coarse", grid), ("fine", grid.refined(2))):
        w, dw, Q = _homogeneous_quantities(sol, g, threads)
        scale = psi2 if psi2 > 0 else 1.0
        fits[label] = {
            "strong": _fit(Q, g.nodes, strong) / scale,
            "weak": _fit(Q, g.nodes, weak) / scale,
        }
        if forcing is not None and not forcing.is_zero:
            om = _omega_on_grid(sol.spectrum, sol.params, forcing, g, sol.kernel_cfg, threads)
            u = w + om
            lams = sol.spectrum.lambdas[:, None]
            du = dw + np.gradient(om, g.h, axis=1)
            frac = _frac_of_rows(lams * u, g, a)
            Qu = np.sum(du ** 2 + (lams * u) ** 2 + frac ** 2, axis=0)
            fits[label]["u_strong"] = _fit(Qu, g.nodes, strong)

    drift = _drift(fits["coarse"]["strong"], fits["fine"]["strong"])
    details = {
        "exponent_tested": -strong,
        "exponent_reported": -weak,
        "fitted_constant_refined": fits["fine"]["strong"],
        "fitted_constant_weak": fits["coarse"]["weak"],
        "fitted_constant_weak_refined": fits["fine"]["weak"],
        "drift": drift,
        "grid_steps": grid.n_steps,
    }
    if "u_strong" in fits["coarse"]:
        details["u_fitted_constant"] = fits["coarse"]["u_strong"]
        details["u_fitted_constant_refined"] = fits["fine"]["u_strong"]

    return BoundReport(
        bound_id=BOUND_COERCIVE_HOMOGENEOUS,
        grid={"T": grid.t_end, "n_steps": grid.n_steps, "K": sol.spectrum.K},
        max_violation=drift,
        fitted_constant=fits["coarse"]["strong"],
        tolerance=REFINEMENT_DRIFT,
        hard=False,
        passed=drift <= REFINEMENT_DRIFT,
        notes=("constant fitted against t^(-2(2-alpha)) |psi|^2; stability under one refinement asserted",),
        details=details,
    )


def forcing_coercive_report(spectrum: Spectrum, params: FracParams, forcing: Forcing, grid: TimeGrid,
                            cfg: QuadConfig = QuadConfig(), eps: float = 0.5, threads: int = 1) -> BoundReport:
    """
    Fit C in |d_t omega(t)|^2 + |d^alpha A omega(t)|^2 <= C max_t |f(t)|^2_eps
    for the Duhamel part, with the same refinement check.
    """
    fits = {}
    for label, g in (("coarse", grid), ("fine", grid.refined(2))):
        om = _omega_on_grid(spectrum, params, forcing, g, cfg, threads)
        Q, _ = _forced_quantity(spectrum, params, om, g)
        norm = forcing_regularity(forcing, spectrum, g.nodes, eps)
        fits[label] = float(np.max(Q)) / norm if norm > 0 else 0.0

    drift = _drift(fits["coarse"], fits["fine"])
    return BoundReport(
        bound_id=BOUND_COERCIVE_INHOMOGENEOUS,
        grid={"T": grid.t_end, "n_steps": grid.n_steps, "K": spectrum.K, "eps": eps},
        max_violation=drift,
        fitted_constant=fits["coarse"],
        tolerance=REFINEMENT_DRIFT,
        hard=False,
        passed=drift <= REFINEMENT_DRIFT,
        notes=("constant fitted against max_t |f(t)|^2 in D(A^eps)",),
        details={"fitted_constant_refined": fits["fine"], "drift": drift},
    )


# ================= ORACLE COMPARISON =================

ORACLE_HEADER = ["alpha", "gamma", "lambda", "t", "B_quad", "B_oracle", "rel_err"]


def oracle_comparison(params_list, lambdas, times, n_steps: int = 8192, cfg: QuadConfig = QuadConfig(),
                      threads: int = 1, tol: float = 1e-7, max_halvings: int = 1) -> list:
    """
    Rows of ORACLE_HEADER: quadrature B against the time-stepper,
    extrapolated and halved from n_steps until the end value settles to tol.
    """
    times = np.asarray(times, dtype=float)
    grid = TimeGrid(float(times.max()), n_steps)
    jobs = [(p, float(lam)) for p in params_list for lam in lambdas]

    def one(job):
        p, lam = job
        quad_vals, _ = eval_B_many(p, lam, times, cfg)
        ref = refine_scalar_ivp(p, lam, 1.0, None, grid, tol=tol, max_halvings=max_halvings)
        out = []
        for t, bq in zip(times, quad_vals):
            bo = ref.at(float(t))
            out.append([p.alpha, p.gamma, lam, float(t), float(bq), bo, abs(bq - bo) / abs(bo)])
        return out

    return [row for rows in parallel_map(one, jobs, threads) for row in rows]
