import math

import numpy as np
import pytest

import analysis
from analysis import (
    BOUND_COERCIVE_HOMOGENEOUS,
    BOUND_COERCIVE_INHOMOGENEOUS,
    BOUND_LOWER,
    CONDITIONING_HEADER,
    ORACLE_HEADER,
    amplification_spectrum,
    coercive_report,
    forcing_coercive_report,
    locate_Lambda0,
    locate_T0,
    oracle_comparison,
    verify_kernel_bounds,
)
from kernel import FracParams, eval_B, eval_dBdlambda
from nonlocal_problem import Forcing, NonlocalSpec, solve_nonlocal
from oracle import TimeGrid
from spectrum import CoeffVector, dirichlet_interval

T0 = 0.5
T_END = 1.0

BOUND_IDS = [
    "kernel_range",
    "kernel_monotone",
    "kernel_integral",
    "kernel_decay_shape",
    "kernel_time_derivative",
    "kernel_lower_bound",
]


@pytest.fixture
def spectrum():
    return dirichlet_interval(math.pi, 3)


def solve(params, spectrum, cfg, beta, phi, forcing=None):
    forcing = Forcing.zero(spectrum.K) if forcing is None else forcing
    spec = NonlocalSpec(beta, T0, T_END, CoeffVector(phi), forcing, params)
    sol, omega, _ = solve_nonlocal(spec, spectrum, TimeGrid(T_END, 8), cfg)
    return sol, omega


# -------------------- kernel bound suite --------------------

def test_bounds_pass_on_small_grid(params, cfg):
    reports = verify_kernel_bounds(params, [1.0, 10.0, 100.0], [0.0, 0.1, 0.5, 1.0], cfg=cfg)
    assert [r.bound_id for r in reports] == BOUND_IDS
    for r in reports:
        assert r.passed, r.as_dict()
        assert r.passed == (r.max_violation <= r.tolerance)


def test_lower_bound_report_carries_constant(params, cfg):
    reports = verify_kernel_bounds(params, [1.0, 4.0, 9.0], [0.0, 0.5, 1.0], cfg=cfg)
    lower = next(r for r in reports if r.bound_id == BOUND_LOWER)
    assert lower.fitted_constant > 0
    assert lower.details["asserted_constant"] == pytest.approx(lower.fitted_constant / math.pi)
    # at alpha = 1/2 the constant holds without the 1/pi factor as well
    assert lower.details["displayed_constant_violation"] == 0.0


def test_bounds_t_zero_column(params, cfg):
    reports = verify_kernel_bounds(params, [2.0, 50.0], [0.0], T=1.0, cfg=cfg)
    assert reports[0].max_violation == 0.0


def test_bounds_reject_empty_or_negative_grids(params, cfg):
    with pytest.raises(ValueError):
        verify_kernel_bounds(params, [], [0.1], cfg=cfg)
    with pytest.raises(ValueError):
        verify_kernel_bounds(params, [1.0], [-0.1, 0.5], cfg=cfg)


def test_bound_report_serializes(params, cfg):
    d = verify_kernel_bounds(params, [1.0], [0.5], cfg=cfg)[0].as_dict()
    assert set(d) == {"bound_id", "grid", "max_violation", "fitted_constant", "tolerance",
                      "hard", "passed", "notes", "details"}
    assert d["grid"]["alpha"] == 0.5


@pytest.mark.slow
@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.7])
@pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0])
def test_bounds_pass_on_default_grid(alpha, gamma, cfg):
    reports = verify_kernel_bounds(FracParams(alpha, gamma), cfg=cfg)
    failed = [r.bound_id for r in reports if r.hard and not r.passed]
    assert failed == []


# -------------------- conditioning --------------------

def test_amplification_bounded_for_beta_above_one(params, cfg):
    s = dirichlet_interval(math.pi, 10)
    table = amplification_spectrum(2.0, 1.0, s, params, cfg)
    assert len(table.rows) == 10
    assert all(r.amplification <= 1.0 for r in table.rows)
    assert not any(r.resonant for r in table.rows)
    assert table.loglog_slope is None

    rows = table.as_rows()
    assert len(rows[0]) == len(CONDITIONING_HEADER)
    assert rows[0][0] == 2.0 and rows[0][1] == 1


def test_amplification_at_beta_one(params, cfg):
    s = dirichlet_interval(math.pi, 6)
    table = amplification_spectrum(1.0, T0, s, params, cfg)
    worst = 1.0 / (1.0 - max(r.b_t0 for r in table.rows))
    assert table.max_amplification <= worst * (1 + 1e-12)


def test_backward_amplification_grows_linearly(params, cfg):
    s = dirichlet_interval(math.pi, 50)
    table = amplification_spectrum(0.0, 1.0, s, params, cfg)
    assert 0.9 <= table.loglog_slope <= 1.1
    assert all(r.amplification >= 1.0 for r in table.rows)


def test_constructed_resonance_is_flagged(params, spectrum, cfg):
    beta = eval_B(params, 1.0, T0, cfg).value
    table = amplification_spectrum(beta, T0, spectrum, params, cfg)
    assert [r.k for r in table.rows if r.resonant] == [1]
    assert math.isinf(table.rows[0].amplification)
    assert math.isfinite(table.max_amplification)


def test_negative_beta_never_resonant(params, spectrum, cfg):
    table = amplification_spectrum(-1.0, T0, spectrum, params, cfg)
    assert not any(r.resonant for r in table.rows)
    assert table.max_amplification <= 1.0


# -------------------- sign scans --------------------

def test_Lambda0_single_point_grid_is_not_found(params, cfg):
    assert locate_Lambda0(params, 1.0, [10.0], cfg) is None


def test_Lambda0_rejects_unsorted_grid(params, cfg):
    with pytest.raises(ValueError):
        locate_Lambda0(params, 1.0, [10.0, 1.0], cfg)


def test_Lambda0_found_on_log_grid(params, cfg):
    grid = np.logspace(0.0, 5.0, 11)
    lam0 = locate_Lambda0(params, 1.0, grid, cfg)
    assert lam0 is not None
    for lam in grid[grid >= lam0]:
        assert eval_dBdlambda(params, float(lam), 1.0, cfg).value < 0


def sign_change_at(crossing, bump=None):
    """dB/dlambda stand-in: positive below `crossing`, negative above, plus an optional positive bump."""
    def fake(params, lam, ts, cfg):
        value = crossing - lam
        if bump is not None and bump[0] < lam < bump[1]:
            value = 1.0
        return np.full(len(ts), value), np.zeros(len(ts))
    return fake


def assert_within_one_coarse_cell(coarse, coarse_lam0, fine_lam0):
    i = int(np.searchsorted(coarse, coarse_lam0))
    assert coarse[i] == coarse_lam0
    lower = coarse[i - 1] if i > 0 else coarse[0]
    assert lower <= fine_lam0 <= coarse_lam0


@pytest.mark.parametrize("crossing,bump", [(3.0, None), (37.0, None), (500.0, None), (2.0, (90.0, 220.0))])
@pytest.mark.parametrize("n", [11, 16])
def test_Lambda0_stable_under_grid_doubling(params, cfg, monkeypatch, crossing, bump, n):
    monkeypatch.setattr(analysis, "eval_dBdlambda_many", sign_change_at(crossing, bump))
    coarse = np.logspace(0.0, 3.0, n)
    fine = np.logspace(0.0, 3.0, 2 * n - 1)

    lam0_coarse = locate_Lambda0(params, 0.5, coarse, cfg)
    lam0_fine = locate_Lambda0(params, 0.5, fine, cfg)
    assert lam0_coarse > coarse[0]
    assert lam0_fine > fine[0]
    assert_within_one_coarse_cell(coarse, lam0_coarse, lam0_fine)


def test_Lambda0_doubling_with_the_kernel(cfg):
    p = FracParams(0.3, 2.0)
    coarse = np.logspace(0.0, 4.0, 9)
    fine = np.logspace(0.0, 4.0, 17)
    lam0_coarse = locate_Lambda0(p, 0.2, coarse, cfg)
    lam0_fine = locate_Lambda0(p, 0.2, fine, cfg)
    assert lam0_coarse is not None and lam0_fine is not None
    assert_within_one_coarse_cell(coarse, lam0_coarse, lam0_fine)


def test_T0_needs_lambda_above_lambda1(params, cfg):
    with pytest.raises(ValueError):
        locate_T0(params, 1.0, [1.0, 2.0], [], cfg)
    with pytest.raises(ValueError):
        locate_T0(params, 5.0, [1.0, 2.0], [1.0, 2.0], cfg)


def test_T0_grid_below_one_is_not_found(params, cfg):
    assert locate_T0(params, 1.0, [0.1, 0.5], [1.0, 10.0], cfg) is None


def test_T0_located_and_Lambda0_collapses(params, cfg):
    lambdas = np.logspace(0.0, 3.0, 7)
    ts = [1.0, 2.0, 4.0, 8.0, 16.0]
    t0 = locate_T0(params, 1.0, ts, lambdas, cfg)
    assert t0 is not None and t0 >= 1.0

    for t in [t for t in ts if t >= t0]:
        for lam in lambdas:
            assert eval_dBdlambda(params, float(lam), t, cfg).value < 0
    assert locate_Lambda0(params, t0, lambdas, cfg) == lambdas[0]


# -------------------- coercive fits --------------------

def test_coercive_zero_data(params, spectrum, cfg):
    sol, omega = solve(params, spectrum, cfg, 2.0, [0.0, 0.0, 0.0])
    r = coercive_report(sol, omega, TimeGrid(T_END, 64))
    assert r.bound_id == BOUND_COERCIVE_HOMOGENEOUS
    assert r.fitted_constant == 0.0
    assert r.details["drift"] == 0.0
    assert r.passed


def test_coercive_single_mode_stable_under_refinement(params, spectrum, cfg):
    sol, omega = solve(params, spectrum, cfg, 2.0, [1.0, 0.0, 0.0])
    r = coercive_report(sol, omega, TimeGrid(T_END, 256))
    assert r.fitted_constant > 0
    assert r.details["drift"] <= 0.1
    assert r.passed
    assert r.details["exponent_tested"] == pytest.approx(-3.0)
    assert r.details["exponent_reported"] == pytest.approx(-1.0)
    assert "u_fitted_constant" not in r.details


def test_coercive_with_forcing_reports_u(params, spectrum, cfg):
    sol, omega = solve(params, spectrum, cfg, 2.0, [1.0, 0.0, 0.0], Forcing.constant([1.0, 0.0, 0.0]))
    r = coercive_report(sol, omega, TimeGrid(T_END, 64))
    assert math.isfinite(r.details["u_fitted_constant"])
    assert math.isfinite(r.details["u_fitted_constant_refined"])


def test_coercive_grid_beyond_horizon(params, spectrum, cfg):
    sol, omega = solve(params, spectrum, cfg, 2.0, [1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        coercive_report(sol, omega, TimeGrid(2.0, 64))


def test_forcing_part_bounded_for_polynomial(params, spectrum, cfg):
    forcing = Forcing.polynomial([[1.0, 1.0], [0.5], [0.0]])
    r = forcing_coercive_report(spectrum, params, forcing, TimeGrid(T_END, 128), cfg)
    assert r.bound_id == BOUND_COERCIVE_INHOMOGENEOUS
    assert 0 < r.fitted_constant < math.inf
    assert r.passed


def test_forcing_part_zero_forcing(params, spectrum, cfg):
    r = forcing_coercive_report(spectrum, params, Forcing.zero(3), TimeGrid(T_END, 32), cfg)
    assert r.fitted_constant == 0.0
    assert r.passed


# -------------------- oracle comparison --------------------

def test_oracle_comparison_small(params, cfg):
    rows = oracle_comparison([params], [1.0, 10.0], [0.25, 0.5, 1.0], n_steps=4096, cfg=cfg)
    assert len(rows) == 6
    assert all(len(row) == len(ORACLE_HEADER) for row in rows)
    assert max(row[-1] for row in rows) <= 1e-3


def test_oracle_comparison_refines_each_job(params, cfg, monkeypatch):
    calls = []
    real = analysis.refine_scalar_ivp

    def spy(p, lam, y0, forcing, grid, tol, max_halvings):
        calls.append((lam, grid.n_steps, tol, max_halvings))
        return real(p, lam, y0, forcing, grid, tol=tol, max_halvings=max_halvings)

    monkeypatch.setattr(analysis, "refine_scalar_ivp", spy)
    rows = oracle_comparison([params], [1.0, 10.0], [0.5, 1.0], n_steps=1024, cfg=cfg, tol=1e-6, max_halvings=2)
    assert sorted(calls) == [(1.0, 1024, 1e-6, 2), (10.0, 1024, 1e-6, 2)]
    assert max(row[-1] for row in rows) <= 1e-3


@pytest.mark.slow
def test_oracle_comparison_acceptance_grid(cfg):
    params_list = [FracParams(a, g) for a in (0.3, 0.5, 0.7) for g in (0.5, 1.0, 2.0)]
    rows = oracle_comparison(params_list, [1.0, 10.0, 100.0], [0.1, 0.25, 0.5, 0.75, 1.0], n_steps=8192, cfg=cfg)
    assert len(rows) == 27 * 5
    assert max(row[-1] for row in rows) <= 1e-3
