#!/usr/bin/env python3
"""
nonlocal_problem.py

Per-mode solver for the time-nonlocal problem

    d_t u + (1 + gamma d_t^alpha) A u = f,   u(t0) = beta u(0) + phi.

Responsibilities:
- Forcing representations (presets, coefficient tables, samples)
- Regime classification: unique / backward (beta = 0) / resonant set K0
- Inhomogeneous part omega_k(t) (Duhamel) and homogeneous part h_k B(lambda_k, t)
- Orthogonality enforcement on K0 and caller-chosen kernel coefficients
- Evaluation of u and residual verification on an oracle grid

Per-mode work may run on a worker pool; every reduction walks the modes in
index order so results do not depend on scheduling.
"""

from __future__ import annotations

import math
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import gamma as gamma_fn

from common import parallel_map
from kernel import FracParams, QuadConfig, duhamel, duhamel_on_grid, eval_B, eval_B_many
from oracle import GridError, TimeGrid, TimeSeries, rl_derivative
from spectrum import CoeffVector, Spectrum, sobolev_norm, synthesize

log = logging.getLogger(__name__)


# ================= CONFIG =================

DEFAULT_K0_TOL = 1e-9
NEAR_RESONANCE_FACTOR = 10.0
ORTHOGONALITY_RTOL = 1e-8
MIN_ORACLE_STEPS = 1024
INTERIOR_FRACTION = 0.1

REGIME_UNIQUE = "UniquelySolvable"
REGIME_BACKWARD = "BackwardIllPosed"
REGIME_RESONANT = "ResonantK0"


# ================= ERRORS =================

class ProblemSpecError(ValueError):
    pass


class OrthogonalityViolation(RuntimeError):
    def __init__(self, offending: dict, tolerance: float):
        modes = ", ".join(f"k={k}: |psi_k|={abs(v):.3e}" for k, v in offending.items())
        super().__init__(f"orthogonality conditions fail on K0 ({modes}; tol={tolerance:.3e})")
        self.offending = dict(offending)
        self.tolerance = tolerance


# ================= FORCING =================

def _zero(t):
    return np.zeros_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class Forcing:
    """Per-mode scalar forcings f_k(t); each callable is vectorized in t."""
    funcs: tuple
    kind: str
    is_zero: bool = False

    @property
    def K(self) -> int:
        return len(self.funcs)

    def mode(self, k: int) -> Callable:
        return self.funcs[k - 1]

    def coefficients_at(self, t: float) -> np.ndarray:
        return np.array([float(np.asarray(f(np.array([t]))).ravel()[0]) for f in self.funcs])

    @classmethod
    def zero(cls, K: int) -> "Forcing":
        return cls(tuple(_zero for _ in range(K)), "zero", True)

    @classmethod
    def constant(cls, values) -> "Forcing":
        values = [float(v) for v in values]

        def make(c):
            return lambda t: np.full_like(np.asarray(t, dtype=float), c)

        return cls(tuple(make(c) for c in values), "constant", not any(values))

    @classmethod
    def polynomial(cls, table) -> "Forcing":
        """table[k][j] is the coefficient of t^j in f_k."""
        rows = [np.asarray(row, dtype=float) for row in table]

        def make(coef):
            return lambda t: np.polynomial.polynomial.polyval(np.asarray(t, dtype=float), coef)

        return cls(tuple(make(r) for r in rows), "polynomial", not any(np.any(r) for r in rows))

    @classmethod
    def manufactured_linear(cls, spectrum: Spectrum, params: FracParams, slopes) -> "Forcing":
        """
        Forcing whose per-mode solution with zero initial value is a_k * t:
        f_k(t) = a_k (1 + lambda_k t + lambda_k gamma t^(1-alpha) / Gamma(2-alpha)).
        """
        slopes = [float(a) for a in slopes]
        if len(slopes) != spectrum.K:
            raise ProblemSpecError(f"expected {spectrum.K} slopes, got {len(slopes)}")
        power = 1.0 - params.alpha
        frac = params.gamma / gamma_fn(2.0 - params.alpha)

        def make(a, lam):
            return lambda t: a * (1.0 + lam * np.asarray(t, dtype=float) + lam * frac * np.asarray(t, dtype=float) ** power)

        funcs = tuple(make(a, m.lam) for a, m in zip(slopes, spectrum.modes))
        return cls(funcs, "manufactured", not any(slopes))

    @classmethod
    def sampled(cls, times, values) -> "Forcing":
        """Linear interpolation of samples; values[k][j] = f_k(times[j])."""
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[1] != times.size:
            raise ProblemSpecError("sampled forcing needs values of shape (K, len(times))")
        if np.any(np.diff(times) <= 0):
            raise ProblemSpecError("sample times must be increasing")

        def make(row):
            return lambda t: np.interp(np.asarray(t, dtype=float), times, row)

        return cls(tuple(make(r) for r in values), "sampled", not np.any(values))


def forcing_regularity(forcing: Forcing, spectrum: Spectrum, times, eps: float = 0.5) -> float:
    """max over the grid of ||f(t)||^2 in D(A^eps) (finite-truncation diagnostic)."""
    return max(sobolev_norm(spectrum, forcing.coefficients_at(float(t)), eps) for t in times)


# ================= PROBLEM =================

@dataclass(frozen=True)
class NonlocalSpec:
    beta: float
    t0: float
    T: float
    phi: CoeffVector
    forcing: Forcing
    params: FracParams

    def __post_init__(self):
        if not math.isfinite(self.beta):
            raise ProblemSpecError(f"beta must be finite, got {self.beta}")
        if not (self.T > 0 and 0 < self.t0 <= self.T):
            raise ProblemSpecError(f"need 0 < t0 <= T, got t0={self.t0}, T={self.T}")
        if len(self.phi) != self.forcing.K:
            raise ProblemSpecError(f"phi has {len(self.phi)} modes but forcing has {self.forcing.K}")

    def check_against(self, spectrum: Spectrum):
        if len(self.phi) != spectrum.K:
            raise ProblemSpecError(f"phi has {len(self.phi)} modes, spectrum has {spectrum.K}")

    def psi(self, omega_t0) -> CoeffVector:
        """psi = phi - omega(t0), coefficientwise."""
        return CoeffVector(self.phi.coeffs - np.asarray(omega_t0, dtype=float))


@dataclass(frozen=True)
class Regime:
    tag: str
    k0_set: tuple
    min_gap: float
    b_t0: np.ndarray
    gaps: np.ndarray
    k0_tol: float
    warnings: tuple = ()

    def as_dict(self) -> dict:
        return {
            "tag": self.tag,
            "k0": list(self.k0_set),
            "min_gap": self.min_gap,
            "k0_tol": self.k0_tol,
            "warnings": list(self.warnings),
        }


def kernel_per_mode(spectrum: Spectrum, params: FracParams, t: float, cfg: QuadConfig, threads: int = 1) -> np.ndarray:
    """B(lambda_k, t) for every mode, one evaluation per multiplicity group."""
    groups = spectrum.groups()
    lams = [spectrum.mode(idx[0]).lam for idx in groups.values()]
    values = parallel_map(lambda lam: eval_B(params, lam, t, cfg).value, lams, threads)

    out = np.empty(spectrum.K)
    for members, value in zip(groups.values(), values):
        for k in members:
            out[k - 1] = value
    return out


def kernel_matrix(spectrum: Spectrum, params: FracParams, times, cfg: QuadConfig, threads: int = 1) -> np.ndarray:
    """K x len(times) table of B(lambda_k, t_j), grouped like kernel_per_mode."""
    groups = spectrum.groups()
    lams = [spectrum.mode(idx[0]).lam for idx in groups.values()]
    rows = parallel_map(lambda lam: eval_B_many(params, lam, times, cfg)[0], lams, threads)

    out = np.empty((spectrum.K, len(times)))
    for members, row in zip(groups.values(), rows):
        for k in members:
            out[k - 1] = row
    return out


def classify(spec: NonlocalSpec, spectrum: Spectrum, kernel_cfg: QuadConfig = QuadConfig(),
             k0_tol: float = DEFAULT_K0_TOL, threads: int = 1) -> Regime:
    if not k0_tol > 0:
        raise ProblemSpecError(f"k0_tol must be > 0, got {k0_tol}")
    spec.check_against(spectrum)

    b_t0 = kernel_per_mode(spectrum, spec.params, spec.t0, kernel_cfg, threads)
    gaps = b_t0 - spec.beta
    abs_gaps = np.abs(gaps)
    min_gap = float(abs_gaps.min())

    # 0 < B < 1, so resonance needs beta strictly inside (0, 1)
    k0 = ()
    if 0.0 < spec.beta < 1.0:
        k0 = tuple(m.index for m, g in zip(spectrum.modes, abs_gaps) if g <= k0_tol)

    warnings = []
    band = NEAR_RESONANCE_FACTOR * k0_tol
    for m, g in zip(spectrum.modes, abs_gaps):
        if m.index not in k0 and 0.0 < g <= band:
            msg = f"near-resonance at k={m.index}: |B - beta|={g:.3e}, amplification={1.0 / g:.3e}"
            log.warning(msg)
            warnings.append(msg)

    if spec.beta == 0.0:
        tag = REGIME_BACKWARD
    elif k0:
        tag = REGIME_RESONANT
    else:
        tag = REGIME_UNIQUE

    return Regime(tag, k0, min_gap, b_t0, gaps, k0_tol, tuple(warnings))


# ================= INHOMOGENEOUS PART =================

@dataclass(frozen=True)
class OmegaTable:
    times: np.ndarray
    values: np.ndarray          # K x len(times)
    t0: float
    at_t0: np.ndarray           # omega_k(t0)
    forcing: Forcing


def solve_inhomogeneous(spec: NonlocalSpec, spectrum: Spectrum, time_grid: TimeGrid,
                        cfg: QuadConfig = QuadConfig(), threads: int = 1) -> OmegaTable:
    spec.check_against(spectrum)
    if time_grid.t_end > spec.T * (1 + 1e-12):
        raise ProblemSpecError(f"time grid ends at {time_grid.t_end} beyond T={spec.T}")

    times = time_grid.nodes
    K = spectrum.K
    if spec.forcing.is_zero:
        return OmegaTable(times, np.zeros((K, times.size)), spec.t0, np.zeros(K), spec.forcing)

    def one_mode(mode):
        f = spec.forcing.mode(mode.index)
        row = np.array([duhamel(spec.params, mode.lam, float(t), f, cfg) for t in times])
        hit = np.nonzero(times == spec.t0)[0]
        at_t0 = row[hit[0]] if hit.size else duhamel(spec.params, mode.lam, spec.t0, f, cfg)
        return row, at_t0

    results = parallel_map(one_mode, spectrum.modes, threads)
    values = np.array([r for r, _ in results])
    at_t0 = np.array([a for _, a in results])
    return OmegaTable(times, values, spec.t0, at_t0, spec.forcing)


def omega_value(sol: "SolutionSeries", omega: Optional[OmegaTable], k: int, t: float) -> float:
    if omega is None or omega.forcing.is_zero or t == 0.0:
        return 0.0
    if t == omega.t0:
        return float(omega.at_t0[k - 1])
    hit = np.nonzero(omega.times == t)[0]
    if hit.size:
        return float(omega.values[k - 1, hit[0]])
    mode = sol.spectrum.mode(k)
    return duhamel(sol.params, mode.lam, t, omega.forcing.mode(k), sol.kernel_cfg)


# ================= HOMOGENEOUS PART =================

@dataclass
class SolutionSeries:
    spectrum: Spectrum
    params: FracParams
    beta: float
    t0: float
    T: float
    h: np.ndarray
    psi: np.ndarray
    free_indices: tuple
    b_t0: np.ndarray
    regime_tag: str
    kernel_cfg: QuadConfig
    unstable: bool = False
    cache: dict = field(default_factory=dict)

    def kernel_values(self, t: float) -> np.ndarray:
        if t == 0.0:
            return np.ones(self.spectrum.K)
        if t == self.t0:
            return self.b_t0
        if t not in self.cache:
            self.cache[t] = kernel_per_mode(self.spectrum, self.params, t, self.kernel_cfg)
        return self.cache[t]

    def amplification(self) -> np.ndarray:
        """|h_k| / |psi_k| (nan where psi_k = 0)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.psi != 0, np.abs(self.h) / np.abs(self.psi), np.nan)


def solve_homogeneous(psi: CoeffVector, spec: NonlocalSpec, spectrum: Spectrum, regime: Regime,
                      free_values: Optional[dict] = None, kernel_cfg: QuadConfig = QuadConfig()) -> SolutionSeries:
    spec.check_against(spectrum)
    if len(psi) != spectrum.K:
        raise ProblemSpecError(f"psi has {len(psi)} modes, spectrum has {spectrum.K}")

    free = {int(k): float(v) for k, v in (free_values or {}).items()}
    stray = sorted(set(free) - set(regime.k0_set))
    if stray:
        raise ProblemSpecError(f"free values given outside K0: {stray}")

    c = psi.coeffs
    tol = ORTHOGONALITY_RTOL * float(np.linalg.norm(c))
    offending = {k: float(c[k - 1]) for k in regime.k0_set if abs(c[k - 1]) > tol}
    if offending:
        raise OrthogonalityViolation(offending, tol)

    h = np.empty(spectrum.K)
    for i, m in enumerate(spectrum.modes):
        if m.index in regime.k0_set:
            h[i] = free.get(m.index, 0.0)
        else:
            h[i] = c[i] / regime.gaps[i]

    unstable = regime.tag == REGIME_BACKWARD
    if unstable:
        amp = 1.0 / np.min(regime.b_t0)
        log.warning("backward problem (beta=0): solved without regularization, amplification up to %.3e", amp)

    return SolutionSeries(
        spectrum=spectrum,
        params=spec.params,
        beta=spec.beta,
        t0=spec.t0,
        T=spec.T,
        h=h,
        psi=c.copy(),
        free_indices=tuple(k for k in regime.k0_set),
        b_t0=regime.b_t0,
        regime_tag=regime.tag,
        kernel_cfg=kernel_cfg,
        unstable=unstable,
    )


def solve_nonlocal(spec: NonlocalSpec, spectrum: Spectrum, time_grid: TimeGrid, cfg: QuadConfig = QuadConfig(),
                   free_values: Optional[dict] = None, k0_tol: float = DEFAULT_K0_TOL, threads: int = 1):
    """u = omega + w; returns (SolutionSeries, OmegaTable, Regime)."""
    regime = classify(spec, spectrum, cfg, k0_tol, threads)
    omega = solve_inhomogeneous(spec, spectrum, time_grid, cfg, threads)
    psi = spec.psi(omega.at_t0)

    sol = solve_homogeneous(psi, spec, spectrum, regime, free_values, cfg)
    return sol, omega, regime


# ================= EVALUATION =================

def coefficients_at(sol: SolutionSeries, omega: Optional[OmegaTable], t: float) -> np.ndarray:
    if not (0.0 <= t <= sol.T):
        raise ProblemSpecError(f"t={t} outside [0, {sol.T}]")
    b = sol.kernel_values(t)
    om = np.array([omega_value(sol, omega, m.index, t) for m in sol.spectrum.modes])
    return sol.h * b + om


def evaluate(sol: SolutionSeries, omega: Optional[OmegaTable], t: float, mode_or_point) -> float:
    """u_k(t) for an integer mode index, or u(t, x) for a point of the domain."""
    if isinstance(mode_or_point, (int, np.integer)) and not isinstance(mode_or_point, bool):
        k = int(mode_or_point)
        sol.spectrum.mode(k)
        return float(coefficients_at(sol, omega, t)[k - 1])
    return synthesize(sol.spectrum, coefficients_at(sol, omega, t), mode_or_point)


def evaluate_many(sol: SolutionSeries, omega: Optional[OmegaTable], times, threads: int = 1) -> np.ndarray:
    """K x len(times) table of u_k(t), one kernel pass per multiplicity group."""
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(times > sol.T):
        raise ProblemSpecError(f"times must lie in [0, {sol.T}]")

    out = sol.h[:, None] * kernel_matrix(sol.spectrum, sol.params, times, sol.kernel_cfg, threads)
    if omega is not None and not omega.forcing.is_zero:
        for m in sol.spectrum.modes:
            out[m.index - 1] += [omega_value(sol, omega, m.index, float(t)) for t in times]
    return out


# ================= VERIFICATION =================

@dataclass(frozen=True)
class ResidualReport:
    nonlocal_residual: float
    nonlocal_residual_scaled: float
    equation_residual: float
    equation_residual_refined: float
    residual_order: Optional[float]
    continuity_sup: float
    continuity_drift: float
    grid_steps: int
    interior_start: float
    unstable: bool

    def as_dict(self) -> dict:
        return {
            "nonlocal_residual": self.nonlocal_residual,
            "nonlocal_residual_scaled": self.nonlocal_residual_scaled,
            "equation_residual": self.equation_residual,
            "equation_residual_refined": self.equation_residual_refined,
            "residual_order": self.residual_order,
            "continuity_sup": self.continuity_sup,
            "continuity_drift": self.continuity_drift,
            "grid_steps": self.grid_steps,
            "interior_start": self.interior_start,
            "unstable": self.unstable,
        }


def _trajectories(sol: SolutionSeries, forcing: Optional[Forcing], grid: TimeGrid, threads: int):
    nodes = grid.nodes
    U = sol.h[:, None] * kernel_matrix(sol.spectrum, sol.params, nodes, sol.kernel_cfg, threads)
    if forcing is not None and not forcing.is_zero:
        rows = parallel_map(
            lambda m: duhamel_on_grid(sol.params, m.lam, forcing.mode(m.index), nodes, sol.kernel_cfg),
            sol.spectrum.modes,
            threads,
        )
        U = U + np.array(rows)
    return U


def _equation_residual(sol: SolutionSeries, forcing: Optional[Forcing], grid: TimeGrid, interior: float, threads: int):
    U = _trajectories(sol, forcing, grid, threads)
    nodes = grid.nodes
    mask = nodes[1:] >= interior * sol.T
    worst = 0.0
    for i, m in enumerate(sol.spectrum.modes):
        u = U[i]
        dt = np.diff(u) / grid.h
        frac = rl_derivative(TimeSeries(grid, u), sol.params.alpha).values[1:]
        f = np.zeros(grid.n_steps) if forcing is None else np.broadcast_to(
            np.asarray(forcing.mode(m.index)(nodes[1:]), dtype=float), (grid.n_steps,))
        r = dt + m.lam * (u[1:] + sol.params.gamma * frac) - f
        if np.any(mask):
            worst = max(worst, float(np.max(np.abs(r[mask]))))
    sup = float(np.max(np.linalg.norm(U, axis=0)))
    return worst, sup


def verify_solution(sol: SolutionSeries, omega: Optional[OmegaTable], spec: NonlocalSpec, spectrum: Spectrum,
                    oracle_grid: TimeGrid, interior: float = INTERIOR_FRACTION, threads: int = 1) -> ResidualReport:
    if oracle_grid.n_steps < MIN_ORACLE_STEPS:
        raise GridError(f"oracle grid needs at least {MIN_ORACLE_STEPS} steps, got {oracle_grid.n_steps}")
    if abs(oracle_grid.t_end - spec.T) > 1e-12 * spec.T:
        raise GridError("oracle grid must span [0, T]")

    u_t0 = coefficients_at(sol, omega, spec.t0)
    u_0 = coefficients_at(sol, omega, 0.0)
    phi = spec.phi.coeffs
    raw = np.abs(u_t0 - spec.beta * u_0 - phi)
    nonlocal_res = float(raw.max())
    scaled = float(np.max(raw / np.maximum(1.0, np.abs(phi))))

    forcing = None if omega is None else omega.forcing
    eq, sup = _equation_residual(sol, forcing, oracle_grid, interior, threads)
    eq_fine, sup_fine = _equation_residual(sol, forcing, oracle_grid.refined(2), interior, threads)

    order = None
    if eq > 0 and eq_fine > 0:
        order = math.log2(eq / eq_fine)
    drift = abs(sup_fine - sup) / sup if sup > 0 else 0.0

    return ResidualReport(
        nonlocal_residual=nonlocal_res,
        nonlocal_residual_scaled=scaled,
        equation_residual=eq,
        equation_residual_refined=eq_fine,
        residual_order=order,
        continuity_sup=sup,
        continuity_drift=drift,
        grid_steps=oracle_grid.n_steps,
        interior_start=interior * spec.T,
        unstable=sol.unstable,
    )
