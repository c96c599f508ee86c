import csv
import json
import math

import pytest

import rsnl_cli
from rsnl_cli import (
    EXIT_BOUND,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_ORTHOGONALITY,
    EXIT_QUADRATURE,
    RunConfig,
    load_config,
    main,
)

INTERVAL_PI = {"type": "interval", "dims": [math.pi], "K": 3}
PROBLEM = {"beta": 2.0, "t0": 0.5, "T": 1.0}
SMALL_GRID = {"lambdas": [1.0, 4.0], "t": [0.0, 0.5, 1.0]}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    for key in ("RSNL_THREADS", "RSNL_CONFIG", "RSNL_OUT"):
        monkeypatch.delenv(key, raising=False)
    monkeypatch.chdir(tmp_path)


def run(tmp_path, command, config=None, out="out", *extra):
    argv = [command, "--out", str(tmp_path / out)]
    if config is not None:
        path = tmp_path / f"{out}.json"
        path.write_text(json.dumps(config))
        argv += ["--config", str(path)]
    return main(argv + list(extra))


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# -------------------- config --------------------

def test_defaults_load_without_file():
    cfg = load_config(None)
    assert cfg.params.alpha == 0.5
    assert cfg.beta_list == [-1.0, 0.0, 0.5, 1.0, 2.0]


@pytest.mark.parametrize("payload", [
    {"params": {"alpha": 1.5}},
    {"params": {"gamma": 0.0}},
    {"problem": {"t0": 2.0, "T": 1.0}},
    {"beta_list": []},
    {"bogus": 1},
    {"operator": {"type": "rectangle", "dims": [1.0]}},
    {"operator": {"type": "table"}},
    {"oracle": {"compare_halvings": -1}},
    {"oracle": {"compare_tol": 0.0}},
])
def test_invalid_config_exits_2(tmp_path, payload):
    assert run(tmp_path, "verify-bounds", payload) == EXIT_CONFIG


def test_unknown_nested_key_rejected():
    with pytest.raises(ValueError):
        RunConfig.model_validate({"params": {"alpha": 0.5, "delta": 1.0}})


def test_missing_or_broken_config_exits_2(tmp_path):
    assert main(["eval-kernel", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["eval-kernel", "--config", str(broken), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bad_thread_count_exits_2(tmp_path):
    assert run(tmp_path, "eval-kernel", {"grid": SMALL_GRID}, "out", "--threads", "0") == EXIT_CONFIG


def test_domain_error_exits_2(tmp_path):
    # too many coefficients for K
    config = {"operator": INTERVAL_PI, "problem": PROBLEM, "phi": {"kind": "modes", "coeffs": [1, 2, 3, 4]}}
    assert run(tmp_path, "solve", config) == EXIT_CONFIG


# -------------------- eval-kernel --------------------

def test_eval_kernel_csv(tmp_path):
    assert run(tmp_path, "eval-kernel", {"grid": SMALL_GRID}) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "kernel.csv")
    assert rows[0] == ["lambda", "t", "B", "est_error", "dBdt"]
    assert rows[1] == ["1", "0", "1", "0", "-inf"]
    assert len(rows) == 1 + 2 * 3
    for row in rows[1:]:
        assert 0.0 < float(row[2]) <= 1.0


def test_eval_kernel_is_byte_stable(tmp_path):
    config = {"grid": SMALL_GRID}
    assert run(tmp_path, "eval-kernel", config, "a") == EXIT_OK
    assert run(tmp_path, "eval-kernel", config, "b") == EXIT_OK
    assert (tmp_path / "a" / "kernel.csv").read_bytes() == (tmp_path / "b" / "kernel.csv").read_bytes()


def test_eval_kernel_tiny_time_exits_3(tmp_path):
    # B itself is fine at t = 1e-300; dB/dt has no usable truncation radius there
    config = {"grid": {"lambdas": [1.0], "t": [0.0, 1e-300]}}
    assert run(tmp_path, "eval-kernel", config) == EXIT_QUADRATURE


def test_out_dir_from_environment(tmp_path, monkeypatch):
    target = tmp_path / "from_env"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"grid": SMALL_GRID}))
    monkeypatch.setenv("RSNL_OUT", str(target))
    monkeypatch.setenv("RSNL_CONFIG", str(cfg_path))
    assert main(["eval-kernel"]) == EXIT_OK
    assert (target / "kernel.csv").exists()


# -------------------- verify-bounds --------------------

def test_verify_bounds_small_grid(tmp_path):
    config = {"grid": {"lambdas": [1.0, 10.0, 100.0], "t": [0.0, 0.1, 0.5, 1.0]}}
    assert run(tmp_path, "verify-bounds", config) == EXIT_OK
    reports = json.loads((tmp_path / "out" / "bounds.json").read_text(encoding="utf-8"))
    ids = [r["bound_id"] for r in reports]
    assert "kernel_lower_bound" in ids and "kernel_time_derivative" in ids
    assert all(r["passed"] for r in reports)


def test_verify_bounds_failure_exits_4(tmp_path, monkeypatch):
    from analysis import BoundReport

    broken = BoundReport("kernel_range", {}, 1.0, 1.0, 1e-8, True, False)
    monkeypatch.setattr(rsnl_cli, "verify_kernel_bounds", lambda *a, **k: [broken])
    assert run(tmp_path, "verify-bounds", {"grid": SMALL_GRID}) == EXIT_BOUND


@pytest.mark.slow
def test_verify_bounds_default_config(tmp_path):
    assert run(tmp_path, "verify-bounds") == EXIT_OK


# -------------------- solve --------------------

def solve_config(**overrides):
    config = {
        "operator": INTERVAL_PI,
        "problem": dict(PROBLEM),
        "phi": {"kind": "kernel_mode", "mode": 1},
        "solve": {"steps": 8},
        "oracle": {"n_steps": 1024},
    }
    config.update(overrides)
    return config


def test_solve_manufactured_single_mode(tmp_path):
    assert run(tmp_path, "solve", solve_config()) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "solution.csv")
    assert rows[0] == ["t", "k", "u_k"]
    assert len(rows) == 1 + 3 * 9
    # mode-major, t-minor
    assert [r[1] for r in rows[1:10]] == ["1"] * 9
    assert float(rows[1][2]) == pytest.approx(1.0)

    payload = json.loads((tmp_path / "out" / "residuals.json").read_text(encoding="utf-8"))
    assert payload["residuals"]["nonlocal_residual"] <= 1e-8
    assert payload["regime"]["tag"] == "UniquelySolvable"
    assert payload["h"][0] == pytest.approx(1.0, abs=1e-8)


def test_solve_zero_data(tmp_path):
    assert run(tmp_path, "solve", solve_config(phi={"kind": "zero"})) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "solution.csv")
    assert all(float(r[2]) == 0.0 for r in rows[1:])


def test_non_finite_projection_exits_2(tmp_path, capsys):
    config = solve_config(phi={"kind": "parabola", "scale": 1e308})
    assert run(tmp_path, "solve", config) == EXIT_CONFIG
    assert "non-finite projection" in capsys.readouterr().err


def test_solve_resonant_violation_exits_5(tmp_path):
    problem = dict(PROBLEM, resonant_mode=1)
    config = solve_config(problem=problem, phi={"kind": "modes", "coeffs": [0.1]})
    assert run(tmp_path, "solve", config) == EXIT_ORTHOGONALITY
    payload = json.loads((tmp_path / "out" / "violation.json").read_text(encoding="utf-8"))
    assert payload["offending"] == {"1": pytest.approx(0.1)}
    assert payload["tolerance"] > 0


def test_solve_resonant_orthogonal_data(tmp_path):
    problem = dict(PROBLEM, resonant_mode=1)
    config = solve_config(problem=problem, phi={"kind": "modes", "coeffs": [0.0, 0.3]}, free_values={"1": 0.7})
    assert run(tmp_path, "solve", config) == EXIT_OK
    payload = json.loads((tmp_path / "out" / "residuals.json").read_text(encoding="utf-8"))
    assert payload["regime"]["tag"] == "ResonantK0"
    assert payload["free_indices"] == [1]
    assert payload["h"][0] == pytest.approx(0.7)


def test_solve_backward_is_flagged(tmp_path):
    problem = dict(PROBLEM, beta=0.0)
    config = solve_config(problem=problem, phi={"kind": "parabola"})
    assert run(tmp_path, "solve", config) == EXIT_OK
    payload = json.loads((tmp_path / "out" / "residuals.json").read_text(encoding="utf-8"))
    assert payload["regime"]["tag"] == "BackwardIllPosed"
    assert payload["residuals"]["unstable"] is True


def test_solve_independent_of_thread_count(tmp_path):
    config = solve_config(phi={"kind": "random", "decay": 1.0}, forcing={"kind": "constant", "values": [1.0, 0.5]})
    assert run(tmp_path, "solve", config, "one", "--threads", "1") == EXIT_OK
    assert run(tmp_path, "solve", config, "four", "--threads", "4") == EXIT_OK
    for name in ("solution.csv", "residuals.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "four" / name).read_bytes()


# -------------------- sweep-beta / find-k0 --------------------

def test_sweep_beta_default_list(tmp_path):
    config = {"operator": dict(INTERVAL_PI, K=5), "problem": PROBLEM}
    assert run(tmp_path, "sweep-beta", config) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "sweep_beta.csv")
    assert rows[0] == ["beta", "k", "lambda", "B_t0", "gap", "amplification", "resonant"]
    assert len(rows) == 1 + 5 * 5
    beta_two = [r for r in rows[1:] if float(r[0]) == 2.0]
    assert len(beta_two) == 5
    assert all(float(r[5]) <= 1.0 for r in beta_two)


def test_find_k0_constructed_resonance(tmp_path):
    config = {"operator": INTERVAL_PI, "problem": dict(PROBLEM, resonant_mode=1)}
    assert run(tmp_path, "find-k0", config) == EXIT_OK
    payload = json.loads((tmp_path / "out" / "k0.json").read_text(encoding="utf-8"))
    assert payload["k0"] == [1]
    assert payload["tag"] == "ResonantK0"


def test_find_k0_empty_for_large_beta(tmp_path):
    assert run(tmp_path, "find-k0", {"operator": INTERVAL_PI, "problem": PROBLEM}) == EXIT_OK
    payload = json.loads((tmp_path / "out" / "k0.json").read_text(encoding="utf-8"))
    assert payload["k0"] == []


def test_find_k0_near_resonance_warning(tmp_path):
    problem = dict(PROBLEM, resonant_mode=1, beta_offset=5e-9)
    assert run(tmp_path, "find-k0", {"operator": INTERVAL_PI, "problem": problem}) == EXIT_OK
    payload = json.loads((tmp_path / "out" / "k0.json").read_text(encoding="utf-8"))
    assert payload["k0"] == []
    assert len(payload["warnings"]) == 1


# -------------------- oracle-compare --------------------

def test_oracle_compare_csv(tmp_path):
    config = {"oracle": {"lambdas": [1.0], "times": [0.5, 1.0], "compare_steps": 4096}}
    assert run(tmp_path, "oracle-compare", config) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "oracle_compare.csv")
    assert rows[0] == ["alpha", "gamma", "lambda", "t", "B_quad", "B_oracle", "rel_err"]
    assert len(rows) == 3
    assert all(float(r[-1]) <= 1e-3 for r in rows[1:])
