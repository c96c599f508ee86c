#!/usr/bin/env python3
"""
rsnl_cli.py

Command-line front end for the Rayleigh-Stokes nonlocal solver.

Responsibilities:
- Load and validate one JSON run configuration (pydantic, unknown keys rejected)
- Resolve --threads / --config / --out against .env and the environment
- Drive the kernel, solver and analysis modules per subcommand
- Emit byte-stable CSV / JSON for plots and regression diffs
- Map failures to exit codes

Exit codes:
  0  success
  2  configuration or domain error
  3  quadrature failure
  4  hard kernel bound violated
  5  orthogonality conditions fail on K0 (violation.json written)

Subcommands:
  eval-kernel     kernel.csv          lambda,t,B,est_error,dBdt
  verify-bounds   bounds.json         kernel inequality reports
  solve           solution.csv        t,k,u_k   (+ residuals.json)
  sweep-beta      sweep_beta.csv      per-beta conditioning tables
  find-k0         k0.json             resonant set and near-resonance warnings
  oracle-compare  oracle_compare.csv  quadrature vs time stepping
"""

import os
import csv
import sys
import json
import math
import logging
import argparse
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from common import (
    CONFIG_ENV,
    fmt_float,
    maybe_progress,
    parallel_map,
    resolve_out_dir,
    resolve_setting,
    resolve_threads,
    setup_logging,
)
from kernel import FracParams, QuadConfig, QuadratureError, eval_B, eval_B_many, eval_dBdt_many
from nonlocal_problem import (
    DEFAULT_K0_TOL,
    Forcing,
    NonlocalSpec,
    OrthogonalityViolation,
    ProblemSpecError,
    classify,
    evaluate_many,
    forcing_regularity,
    solve_nonlocal,
    verify_solution,
)
from analysis import (
    CONDITIONING_HEADER,
    DEFAULT_LAMBDA_GRID,
    DEFAULT_T_GRID,
    ORACLE_HEADER,
    amplification_spectrum,
    oracle_comparison,
    verify_kernel_bounds,
)
from oracle import TimeGrid
from spectrum import (
    CoeffVector,
    ProjectionError,
    analyze,
    dirichlet_interval,
    dirichlet_rectangle,
    spectrum_from_table,
)

log = logging.getLogger("rsnl")


# ================= CONFIG =================

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_QUADRATURE = 3
EXIT_BOUND = 4
EXIT_ORTHOGONALITY = 5

KERNEL_HEADER = ["lambda", "t", "B", "est_error", "dBdt"]
SOLUTION_HEADER = ["t", "k", "u_k"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ParamsModel(StrictModel):
    alpha: float = Field(0.5, gt=0.0, lt=1.0)
    gamma: float = Field(1.0, gt=0.0)


class ProblemModel(StrictModel):
    beta: float = 2.0
    t0: float = Field(1.0, gt=0.0)
    T: float = Field(1.0, gt=0.0)
    # beta := B(lambda_m, t0) + beta_offset when set
    resonant_mode: Optional[int] = Field(None, ge=1)
    beta_offset: float = 0.0

    @model_validator(mode="after")
    def _t0_inside(self):
        if self.t0 > self.T:
            raise ValueError(f"t0={self.t0} must not exceed T={self.T}")
        return self


class OperatorModel(StrictModel):
    type: Literal["interval", "rectangle", "table"] = "interval"
    dims: List[float] = Field(default_factory=lambda: [1.0])
    K: int = Field(10, ge=1)
    table_path: Optional[str] = None

    @model_validator(mode="after")
    def _shape(self):
        need = {"interval": 1, "rectangle": 2}.get(self.type)
        if need is not None and len(self.dims) != need:
            raise ValueError(f"{self.type} operator needs {need} dims, got {len(self.dims)}")
        if any(d <= 0 for d in self.dims):
            raise ValueError("operator dims must be positive")
        if self.type == "table" and not self.table_path:
            raise ValueError("table operator needs table_path")
        return self


class PhiModel(StrictModel):
    kind: Literal["zero", "modes", "kernel_mode", "parabola", "random"] = "zero"
    coeffs: List[float] = Field(default_factory=list)
    mode: int = Field(1, ge=1)
    scale: float = 1.0
    decay: float = 2.0


class ForcingModel(StrictModel):
    kind: Literal["zero", "constant", "polynomial", "manufactured", "sampled"] = "zero"
    values: List[float] = Field(default_factory=list)
    table: List[List[float]] = Field(default_factory=list)
    slopes: List[float] = Field(default_factory=list)
    times: List[float] = Field(default_factory=list)
    samples: List[List[float]] = Field(default_factory=list)
    eps: float = Field(0.5, ge=0.0)


class QuadratureModel(StrictModel):
    rel_tol: float = Field(1e-10, gt=0.0)
    abs_tol: float = Field(1e-12, gt=0.0)
    max_subdivisions: int = Field(200, ge=1)
    duhamel_panels: int = Field(64, ge=1)
    duhamel_order: int = Field(24, ge=1)

    def build(self) -> QuadConfig:
        return QuadConfig(
            rel_tol=self.rel_tol,
            abs_tol=self.abs_tol,
            max_subdivisions=self.max_subdivisions,
            duhamel_panels=self.duhamel_panels,
            duhamel_order=self.duhamel_order,
        )


class OracleModel(StrictModel):
    n_steps: int = Field(1024, ge=2)
    compare_steps: int = Field(8192, ge=2)
    compare_tol: float = Field(1e-7, gt=0.0)
    compare_halvings: int = Field(1, ge=0)
    alphas: Optional[List[float]] = None
    gammas: Optional[List[float]] = None
    lambdas: List[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0])
    times: List[float] = Field(default_factory=lambda: [0.1, 0.25, 0.5, 0.75, 1.0])


class GridModel(StrictModel):
    lambdas: List[float] = Field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID), min_length=1)
    t: List[float] = Field(default_factory=lambda: list(DEFAULT_T_GRID), min_length=1)
    T: Optional[float] = Field(None, gt=0.0)


class SolveModel(StrictModel):
    steps: int = Field(64, ge=2)


class OutputsModel(StrictModel):
    dir: Optional[str] = None


class RunConfig(StrictModel):
    params: ParamsModel = Field(default_factory=ParamsModel)
    problem: ProblemModel = Field(default_factory=ProblemModel)
    operator: OperatorModel = Field(default_factory=OperatorModel)
    phi: PhiModel = Field(default_factory=PhiModel)
    forcing: ForcingModel = Field(default_factory=ForcingModel)
    quadrature: QuadratureModel = Field(default_factory=QuadratureModel)
    oracle: OracleModel = Field(default_factory=OracleModel)
    grid: GridModel = Field(default_factory=GridModel)
    solve: SolveModel = Field(default_factory=SolveModel)
    free_values: Dict[int, float] = Field(default_factory=dict)
    beta_list: List[float] = Field(default_factory=lambda: [-1.0, 0.0, 0.5, 1.0, 2.0], min_length=1)
    k0_tol: float = Field(DEFAULT_K0_TOL, gt=0.0)
    seed: int = 0
    outputs: OutputsModel = Field(default_factory=OutputsModel)


def load_config(path: Optional[str]) -> RunConfig:
    if not path:
        log.info("no config given, using defaults")
        return RunConfig()
    with open(path, encoding="utf-8") as f:
        return RunConfig.model_validate(json.load(f))


# -------------------- builders --------------------

def _pad(values, K, fill):
    values = list(values)
    if len(values) > K:
        raise ProblemSpecError(f"{len(values)} per-mode entries given for K={K}")
    return values + [fill] * (K - len(values))


def build_params(cfg: RunConfig) -> FracParams:
    return FracParams(cfg.params.alpha, cfg.params.gamma)


def build_spectrum(cfg: RunConfig):
    op = cfg.operator
    if op.type == "interval":
        return dirichlet_interval(op.dims[0], op.K)
    if op.type == "rectangle":
        return dirichlet_rectangle(op.dims[0], op.dims[1], op.K)
    return spectrum_from_table(op.table_path)


def resolve_beta(cfg: RunConfig, spectrum, params, quad) -> float:
    p = cfg.problem
    if p.resonant_mode is None:
        return p.beta
    lam = spectrum.mode(p.resonant_mode).lam
    return eval_B(params, lam, p.t0, quad).value + p.beta_offset


def build_phi(cfg: RunConfig, spectrum, params, beta, quad) -> CoeffVector:
    phi, K = cfg.phi, spectrum.K
    if phi.kind == "zero":
        return CoeffVector.zeros(K)
    if phi.kind == "modes":
        return CoeffVector(_pad(phi.coeffs, K, 0.0))
    if phi.kind == "kernel_mode":
        # phi = (B(lambda_m, t0) - beta) * scale * e_m, so that h = scale * e_m
        lam = spectrum.mode(phi.mode).lam
        gap = eval_B(params, lam, cfg.problem.t0, quad).value - beta
        return CoeffVector.basis(K, phi.mode, gap * phi.scale)
    if phi.kind == "parabola":
        if not spectrum.has_eigenfunctions:
            raise ProblemSpecError("parabola phi needs an interval or rectangle operator")
        if spectrum.kind == "interval":
            (L,) = spectrum.dims
            return analyze(spectrum, lambda x: phi.scale * x * (L - x))
        a, b = spectrum.dims
        return analyze(spectrum, lambda x, y: phi.scale * x * (a - x) * y * (b - y))

    rng = np.random.default_rng(cfg.seed)
    k = np.arange(1, K + 1, dtype=float)
    return CoeffVector(phi.scale * rng.standard_normal(K) * k ** (-phi.decay))


def build_forcing(cfg: RunConfig, spectrum, params) -> Forcing:
    fc, K = cfg.forcing, spectrum.K
    if fc.kind == "zero":
        return Forcing.zero(K)
    if fc.kind == "constant":
        return Forcing.constant(_pad(fc.values, K, 0.0))
    if fc.kind == "polynomial":
        return Forcing.polynomial(_pad(fc.table, K, [0.0]))
    if fc.kind == "manufactured":
        return Forcing.manufactured_linear(spectrum, params, _pad(fc.slopes, K, 0.0))
    return Forcing.sampled(fc.times, _pad(fc.samples, K, [0.0] * len(fc.times)))


# ================= WRITERS =================

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return str(x)
        return float(fmt_float(x))
    return obj


def write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(_jsonable(payload), f, indent=2, ensure_ascii=False, sort_keys=True)
        f.write("\n")
    print(f"[✓] wrote {path}")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    print(f"[✓] wrote {path}")


# ================= COMMANDS =================

def cmd_eval_kernel(cfg: RunConfig, out_dir, threads, progress=False) -> int:
    params, quad = build_params(cfg), cfg.quadrature.build()
    ts = np.asarray(cfg.grid.t, dtype=float)
    positive = ts > 0

    def rows_for(lam):
        B, err = eval_B_many(params, lam, ts, quad)
        dB = np.full_like(ts, -math.inf)
        if np.any(positive):
            dB[positive] = eval_dBdt_many(params, lam, ts[positive], quad)[0]
        return [[lam, t, b, e, d] for t, b, e, d in zip(ts, B, err, dB)]

    chunks = parallel_map(rows_for, maybe_progress(cfg.grid.lambdas, "kernel", progress), threads)
    rows = [row for chunk in chunks for row in chunk]

    write_csv(os.path.join(out_dir, "kernel.csv"), KERNEL_HEADER, rows)
    return EXIT_OK


def cmd_verify_bounds(cfg: RunConfig, out_dir, threads) -> int:
    reports = verify_kernel_bounds(
        build_params(cfg),
        cfg.grid.lambdas,
        cfg.grid.t,
        cfg.grid.T,
        cfg.quadrature.build(),
        threads,
    )
    write_json(os.path.join(out_dir, "bounds.json"), [r.as_dict() for r in reports])

    failed = [r.bound_id for r in reports if r.hard and not r.passed]
    for r in reports:
        mark = "[✓]" if r.passed else "[!]"
        print(f"{mark} {r.bound_id}: max_violation={r.max_violation:.3e} constant={r.fitted_constant:.6g}")
    if failed:
        print(f"[!] hard bounds violated: {', '.join(failed)}")
        return EXIT_BOUND
    return EXIT_OK


def cmd_solve(cfg: RunConfig, out_dir, threads) -> int:
    params, quad = build_params(cfg), cfg.quadrature.build()
    spectrum = build_spectrum(cfg)
    beta = resolve_beta(cfg, spectrum, params, quad)
    phi = build_phi(cfg, spectrum, params, beta, quad)
    forcing = build_forcing(cfg, spectrum, params)
    spec = NonlocalSpec(beta, cfg.problem.t0, cfg.problem.T, phi, forcing, params)

    grid = TimeGrid(spec.T, cfg.solve.steps)
    sol, omega, regime = solve_nonlocal(spec, spectrum, grid, quad, cfg.free_values, cfg.k0_tol, threads)

    nodes = grid.nodes
    U = evaluate_many(sol, omega, nodes, threads)
    rows = [[t, m.index, U[m.index - 1, j]] for m in spectrum.modes for j, t in enumerate(nodes)]
    write_csv(os.path.join(out_dir, "solution.csv"), SOLUTION_HEADER, rows)

    report = verify_solution(sol, omega, spec, spectrum, TimeGrid(spec.T, cfg.oracle.n_steps), threads=threads)
    amp = sol.amplification()
    payload = {
        "beta": beta,
        "t0": spec.t0,
        "T": spec.T,
        "K": spectrum.K,
        "regime": regime.as_dict(),
        "residuals": report.as_dict(),
        "h": sol.h,
        "free_indices": list(sol.free_indices),
        "max_amplification": float(np.nanmax(amp)) if np.any(np.isfinite(amp)) else None,
        "forcing_regularity": forcing_regularity(forcing, spectrum, nodes, cfg.forcing.eps),
    }
    write_json(os.path.join(out_dir, "residuals.json"), payload)

    summary = {
        "regime": regime.tag,
        "nonlocal_residual": f"{report.nonlocal_residual:.3e}",
        "equation_residual": f"{report.equation_residual:.3e}",
        "unstable": sol.unstable,
    }
    print("[INFO] solve summary")
    for k, v in summary.items():
        print(f"  {k}: {v}")
    return EXIT_OK


def cmd_sweep_beta(cfg: RunConfig, out_dir, threads, progress=False) -> int:
    params, quad = build_params(cfg), cfg.quadrature.build()
    spectrum = build_spectrum(cfg)

    rows = []
    for beta in maybe_progress(cfg.beta_list, "beta", progress):
        table = amplification_spectrum(beta, cfg.problem.t0, spectrum, params, quad, cfg.k0_tol, threads)
        rows.extend(table.as_rows())
        slope = "" if table.loglog_slope is None else f" slope={table.loglog_slope:.4f}"
        print(f"[INFO] beta={beta:g}: max amplification={table.max_amplification:.3e}{slope}")

    write_csv(os.path.join(out_dir, "sweep_beta.csv"), CONDITIONING_HEADER, rows)
    return EXIT_OK


def cmd_find_k0(cfg: RunConfig, out_dir, threads) -> int:
    params, quad = build_params(cfg), cfg.quadrature.build()
    spectrum = build_spectrum(cfg)
    beta = resolve_beta(cfg, spectrum, params, quad)
    spec = NonlocalSpec(beta, cfg.problem.t0, cfg.problem.T, CoeffVector.zeros(spectrum.K),
                        Forcing.zero(spectrum.K), params)

    regime = classify(spec, spectrum, quad, cfg.k0_tol, threads)
    payload = dict(regime.as_dict(), beta=beta, t0=spec.t0, B_t0=regime.b_t0)
    write_json(os.path.join(out_dir, "k0.json"), payload)
    print(f"[INFO] {regime.tag}: K0={list(regime.k0_set)} min_gap={regime.min_gap:.3e}")
    return EXIT_OK


def cmd_oracle_compare(cfg: RunConfig, out_dir, threads) -> int:
    oc = cfg.oracle
    alphas = oc.alphas or [cfg.params.alpha]
    gammas = oc.gammas or [cfg.params.gamma]
    params_list = [FracParams(a, g) for a in alphas for g in gammas]

    rows = oracle_comparison(
        params_list, oc.lambdas, oc.times, oc.compare_steps, cfg.quadrature.build(), threads,
        tol=oc.compare_tol, max_halvings=oc.compare_halvings,
    )
    write_csv(os.path.join(out_dir, "oracle_compare.csv"), ORACLE_HEADER, rows)
    print(f"[INFO] max rel_err={max(r[-1] for r in rows):.3e} over {len(rows)} points")
    return EXIT_OK


# -------------------- CLI --------------------

def build_parser():
    parser = argparse.ArgumentParser(description="Fractional Rayleigh-Stokes nonlocal problem toolkit")
    parser.add_argument("command", choices=[
        "eval-kernel", "verify-bounds", "solve", "sweep-beta", "find-k0", "oracle-compare",
    ])
    parser.add_argument("--config", help="Path to JSON run configuration (or RSNL_CONFIG)")
    parser.add_argument("--out", help="Output directory (or RSNL_OUT, default ./out)")
    parser.add_argument("--threads", help="Worker threads (or RSNL_THREADS, default 1)")
    parser.add_argument("--progress", action="store_true", help="Show progress bars")
    parser.add_argument("--verbose", action="store_true")
    return parser


def _write_violation(out_dir, exc: OrthogonalityViolation):
    payload = {"offending": exc.offending, "tolerance": exc.tolerance}
    write_json(os.path.join(out_dir, "violation.json"), payload)
    print(f"[ERROR] {exc}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)

    out_dir = None
    try:
        threads = resolve_threads(args.threads)
        cfg = load_config(resolve_setting(CONFIG_ENV, args.config))
        out_dir = resolve_out_dir(args.out or cfg.outputs.dir)
        os.makedirs(out_dir, exist_ok=True)

        if args.command == "eval-kernel":
            return cmd_eval_kernel(cfg, out_dir, threads, args.progress)
        if args.command == "verify-bounds":
            return cmd_verify_bounds(cfg, out_dir, threads)
        if args.command == "solve":
            return cmd_solve(cfg, out_dir, threads)
        if args.command == "sweep-beta":
            return cmd_sweep_beta(cfg, out_dir, threads, args.progress)
        if args.command == "find-k0":
            return cmd_find_k0(cfg, out_dir, threads)
        return cmd_oracle_compare(cfg, out_dir, threads)

    except OrthogonalityViolation as e:
        _write_violation(out_dir, e)
        return EXIT_ORTHOGONALITY
    except (QuadratureError, FloatingPointError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_QUADRATURE
    except ValidationError as e:
        print(f"[ERROR] invalid config:\n{e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OverflowError, OSError, ProjectionError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
