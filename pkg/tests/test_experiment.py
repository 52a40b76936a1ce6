import json

import numpy as np
import pytest

from fbsde_reversal.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from fbsde_reversal.ensemble_stats import moment_schedule
from fbsde_reversal.experiment import (
    PRESETS,
    THREADS_ENV,
    ConfigError,
    ExperimentError,
    compare_oracle,
    gain_report,
    load_config,
    preset_config,
    read_csv,
    run_experiment,
    run_oracle,
    save_config,
    select_samples,
    validate_config,
    worker_count,
)
from fbsde_reversal.lq_model import riccati_solve
from fbsde_reversal.solver import SolverConfig, backward_pass, forward_pass, init


def small_config(**solver):
    data = json.loads(json.dumps(PRESETS["mass-spring"]))
    data["solver"].update({"n_samples": 60, "n_iters": 3, **solver})
    data["n_repeats"] = 2
    data["n_trajectories"] = 5
    return validate_config(data)


def test_preset_values():
    cfg = preset_config("mass-spring")
    prob = cfg.lq_problem()
    np.testing.assert_array_equal(prob.A, [[0, 1], [-1, 0]])
    np.testing.assert_array_equal(prob.B, [[0], [1]])
    for mat in (prob.sigma, prob.Q, prob.Q_f, prob.Sigma0):
        np.testing.assert_array_equal(mat, np.eye(2))
    np.testing.assert_array_equal(prob.R, [[1]])
    np.testing.assert_array_equal(prob.m0, [0, 0])
    s = cfg.solver_config()
    assert (s.n_samples, s.n_iters, s.step_size) == (1000, 75, 0.02)
    assert cfg.time_grid().dt == 0.02 and cfg.time_grid().horizon == 1.0
    assert cfg.n_repeats == 10
    assert cfg.solver_config(3).seed == 3


def test_defaults_applied():
    data = {"problem": PRESETS["mass-spring"]["problem"]}
    cfg = validate_config(data)
    assert cfg.grid.horizon == 1.0 and cfg.n_repeats == 1


def test_missing_field_named():
    data = json.loads(json.dumps(PRESETS["mass-spring"]))
    del data["problem"]["R"]
    with pytest.raises(ConfigError, match=r"problem\.R"):
        validate_config(data)


def test_non_psd_q_rejected():
    data = json.loads(json.dumps(PRESETS["mass-spring"]))
    data["problem"]["Q"] = [[1.0, 0.0], [0.0, -1.0]]
    with pytest.raises(ConfigError, match="Q: must be positive semi-definite"):
        validate_config(data)


@pytest.mark.parametrize(
    "section, key, value",
    [("grid", "dt", 0.03), ("solver", "n_samples", 1), (None, "n_repeats", 0), (None, "bogus", 1)],
)
def test_invalid_fields(section, key, value):
    data = json.loads(json.dumps(PRESETS["mass-spring"]))
    (data[section] if section else data)[key] = value
    with pytest.raises(ConfigError):
        validate_config(data)


def test_dimension_mismatch():
    data = json.loads(json.dumps(PRESETS["mass-spring"]))
    data["problem"]["B"] = [[0.0, 1.0]]
    with pytest.raises(ConfigError, match="B"):
        validate_config(data)


def test_config_round_trip(tmp_path):
    cfg = preset_config("mass-spring", n_repeats=3)
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.digest() == cfg.digest()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")


def test_worker_count(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "2")
    assert worker_count(10) == 2
    assert worker_count(1) == 1
    monkeypatch.setenv(THREADS_ENV, "0")
    assert worker_count(10) >= 1
    monkeypatch.setenv(THREADS_ENV, "x")
    with pytest.raises(ConfigError):
        worker_count(3)


def test_select_samples_deterministic():
    a = select_samples(0, 1000, 20)
    assert len(a) == 20 and len(set(a)) == 20
    assert np.array_equal(a, select_samples(0, 1000, 20))
    assert np.all(np.diff(a) > 0)
    assert len(select_samples(0, 5, 20)) == 5


def test_run_experiment_artifacts(tmp_path):
    cfg = small_config()
    art = run_experiment(cfg, tmp_path)
    header, gains = read_csv(art.gains_csv)
    assert header == ["t", "g11", "g12", "g21", "g22", "ric11", "ric12", "ric21", "ric22"]
    assert gains.shape == (51, 9)
    # the file parses back to the in-memory arrays exactly
    assert np.array_equal(gains[:, 1:5].reshape(51, 2, 2), art.mean_gains)
    assert np.array_equal(gains[:, 5:].reshape(51, 2, 2), art.oracle_gains)
    assert np.array_equal(gains[:, 0], cfg.time_grid().times)
    header, cost = read_csv(art.cost_csv)
    assert header == ["repeat", "iteration", "cost"]
    assert cost.shape == (6, 3)
    assert np.array_equal(cost[:3, 2], art.costs[0]) and np.array_equal(cost[3:, 2], art.costs[1])
    header, traj = read_csv(art.trajectories_csv)
    assert header == ["sample", "t", "x1", "xrev1", "yrev1"]
    assert traj.shape == (5 * 51, 5)
    raw = art.gains_csv.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    summary = json.loads(art.summary_json.read_text())
    assert summary["config_hash"] == cfg.digest()
    assert summary["seeds"] == [0, 1]
    assert summary["gain_error"]["max_rms"] == pytest.approx(art.report.max_rms)


def test_cost_csv_single_row(tmp_path):
    data = json.loads(json.dumps(PRESETS["mass-spring"]))
    data["solver"].update({"n_samples": 20, "n_iters": 1})
    data["n_repeats"] = 1
    art = run_experiment(validate_config(data), tmp_path)
    _, cost = read_csv(art.cost_csv)
    assert cost.tolist() == [[0.0, 1.0, art.costs[0][0]]]


def test_identical_runs_byte_identical(tmp_path, monkeypatch):
    cfg = small_config()
    monkeypatch.setenv(THREADS_ENV, "1")
    run_experiment(cfg, tmp_path / "a")
    monkeypatch.setenv(THREADS_ENV, "0")
    run_experiment(cfg, tmp_path / "b")
    for name in ("gains.csv", "cost.csv", "trajectories.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_all_repeats_failing(tmp_path):
    data = json.loads(json.dumps(PRESETS["mass-spring"]))
    data["problem"]["A"] = [[30.0, 0.0], [0.0, 0.0]]
    data["solver"].update({"n_samples": 10, "n_iters": 1})
    data["n_repeats"] = 2
    with pytest.raises(ExperimentError, match="all 2 repeats failed"):
        run_experiment(validate_config(data), tmp_path)


def test_gain_report_zero_for_identical(grid, mass_spring):
    ric = riccati_solve(mass_spring, grid)
    rep = gain_report(ric, ric, grid)
    assert rep.rms == 0 and rep.max_rms == 0 and np.all(rep.diff == 0)
    assert len(rep.times) == 49 and rep.times[-1] == pytest.approx(1.0 - 2 * 0.02)


def test_compare_oracle_small_noise_exact_feedback(grid):
    cfg = preset_config("mass-spring")
    data = cfg.model_dump(mode="json")
    data["problem"]["sigma"] = [[0.01, 0.0], [0.0, 0.01]]
    cfg = validate_config(data)
    prob = cfg.lq_problem()
    ric = riccati_solve(prob, grid)
    scfg = SolverConfig(n_samples=1000, n_iters=1, seed=0)
    state = init(prob, grid, scfg)
    state.iter = 1
    state.forward_states = forward_pass(state, prob, grid, feedback_gains=ric.g1)
    state.moments = moment_schedule(state.forward_states)
    _, _, gains = backward_pass(state, prob, grid, scfg, feedback_gains=ric.g1)
    assert gain_report(gains, ric, grid).max_rms <= 0.02


def test_compare_oracle_runs(tmp_path):
    rep = compare_oracle(small_config(n_iters=1))
    assert np.isfinite(rep.rms)


def test_run_oracle(tmp_path):
    res = run_oracle(preset_config("mass-spring"), tmp_path)
    header, data = read_csv(res["riccati_csv"])
    assert header == ["t", "ric11", "ric12", "ric21", "ric22"]
    assert data.shape == (51, 5)
    assert res["optimal_cost"] == pytest.approx(2.6845869670175393, rel=1e-12)


def test_cli_success(tmp_path, capsys):
    code = main(["--samples", "30", "--iters", "2", "--repeats", "1", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    assert json.loads(capsys.readouterr().out)["n_repeats"] == 1
    assert (tmp_path / "gains.csv").exists()


def test_cli_oracle_only(tmp_path, capsys):
    assert main(["--oracle-only", "--output-dir", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "riccati.csv").exists()
    assert not (tmp_path / "gains.csv").exists()


def test_cli_print_config(capsys):
    assert main(["--print-config", "--seed", "7", "--dt", "0.01"]) == EXIT_OK
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["solver"]["seed"] == 7 and cfg["grid"]["dt"] == 0.01


def test_cli_config_errors(tmp_path, capsys):
    assert main(["--dt", "0.03"]) == EXIT_CONFIG
    assert "grid" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad = preset_config("mass-spring").model_dump(mode="json")
    bad["problem"]["R"] = [[-1.0]]
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG


def test_cli_numerical_failure(tmp_path):
    data = preset_config("mass-spring").model_dump(mode="json")
    data["problem"]["A"] = [[30.0, 0.0], [0.0, 0.0]]
    data["n_repeats"] = 1
    data["output_dir"] = str(tmp_path)
    (tmp_path / "cfg.json").write_text(json.dumps(data))
    code = main(["--config", str(tmp_path / "cfg.json"), "--samples", "10", "--iters", "1"])
    assert code == EXIT_NUMERICAL
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert "diverged" in diag["error"]


def test_documented_schema_is_current():
    from pathlib import Path

    from fbsde_reversal.experiment import ExperimentConfig

    path = Path(__file__).resolve().parents[1] / "docs" / "config.schema.json"
    assert json.loads(path.read_text()) == ExperimentConfig.model_json_schema()
