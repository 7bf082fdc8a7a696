"""Command-line tests: simulate, fit, predict and evaluate through app.main."""

import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

# Add current directory to path
sys.path.append(str(Path.cwd()))

from app import EXIT_OK, EXIT_VALIDATION, main
from export.exporter import (
    CURVE_FILE,
    DIAGNOSTICS_FILE,
    LOCAL_VALUES_FILE,
    METRICS_FILE,
    PLAN_FILE,
    PREDICTIONS_FILE,
    read_curve,
    read_diagnostics,
    read_metrics,
    read_plan,
    read_report,
    write_curve,
)
from ingest.run_config import RunConfig, list_presets, load_preset, load_run_config

SMALL_COMPOSITE = {"J": 3, "h_oll": 0.3}


def _write_yaml(path: Path, payload: dict) -> Path:
    path.write_text(yaml.safe_dump(payload, sort_keys=False))
    return path


def _simulate_config(tmp_path: Path, m_values) -> Path:
    return _write_yaml(tmp_path / "simulate.yml", {
        "schema_version": 1,
        "mode": "simulate",
        "seed": 3,
        "n_grid": 15,
        "composite": SMALL_COMPOSITE,
        "experiment": {
            "model": "homoscedastic",
            "n": 1000,
            "m_values": m_values,
            "replications": 3,
            "errors": [{"base": "normal", "lam": 0.0}],
        },
    })


@pytest.fixture(scope="module")
def noisy_line_csv(tmp_path_factory):
    rng = np.random.default_rng(12)
    x = rng.uniform(0, 1, 600)
    frame = pd.DataFrame({
        "x": x,
        "y": 1.0 + 2.0 * x + 0.2 * rng.standard_normal(600),
        "batch_id": np.arange(600) % 2,
    })
    path = tmp_path_factory.mktemp("data") / "line.csv"
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


@pytest.fixture(scope="module")
def fitted_dir(tmp_path_factory, noisy_line_csv):
    root = tmp_path_factory.mktemp("fit")
    config = _write_yaml(root / "fit.yml", {
        "mode": "fit",
        "n_grid": 21,
        "estimators": ["composite", "alad", "oracle"],
        "composite": SMALL_COMPOSITE,
    })
    out = root / "out"
    code = main(["fit", "--config", str(config), "--data", str(noisy_line_csv), "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_simulate_writes_report(tmp_path):
    """A minimal study exits 0 with one log row per replication and one table row per pair."""
    out = tmp_path / "sim"
    code = main(["simulate", "--config", str(_simulate_config(tmp_path, [2])), "--out", str(out)])
    assert code == EXIT_OK
    table, log = read_report(out)
    assert len(log) == 3, "one log row per replication"
    assert len(table) == 3, "one table row per estimator pair"
    assert (out / "resolved_config.yml").exists()
    resolved = load_run_config(out / "resolved_config.yml")
    assert resolved.seed == 3 and resolved.output_dir == str(out)


def test_simulate_rejects_non_divisible_split(tmp_path):
    """n = 1000 cannot be split into three equal batches."""
    code = main(["simulate", "--config", str(_simulate_config(tmp_path, [3])), "--out", str(tmp_path / "x")])
    assert code == EXIT_VALIDATION


def test_unknown_config_key_is_a_validation_error(tmp_path):
    """Typos in the configuration stop the run before any work."""
    config = _write_yaml(tmp_path / "bad.yml", {"mode": "simulate", "sead": 4})
    assert main(["simulate", "--config", str(config)]) == EXIT_VALIDATION
    assert main(["simulate", "--preset", "no_such_preset"]) == EXIT_VALIDATION


def test_fit_writes_artifacts(fitted_dir):
    """Plan, local values, curves and diagnostics are written and consistent."""
    for name in (PLAN_FILE, LOCAL_VALUES_FILE, CURVE_FILE, DIAGNOSTICS_FILE):
        assert (fitted_dir / name).exists(), f"missing {name}"

    grid_x, curves = read_curve(fitted_dir / CURVE_FILE)
    assert set(curves) == {"composite", "alad", "oracle"}
    interior = (grid_x > 0.1) & (grid_x < 0.9)
    for name, values in curves.items():
        error = np.max(np.abs(values[interior] - (1.0 + 2.0 * grid_x[interior])))
        assert error < 0.15, f"{name} deviates {error:.3f} from the line"

    plan = read_plan(fitted_dir / PLAN_FILE)
    assert (plan.m, plan.J) == (2, 3)
    assert np.sum(plan.weights) == pytest.approx(1.0, abs=1e-10)
    diagnostics = read_diagnostics(fitted_dir / DIAGNOSTICS_FILE)
    assert diagnostics["h_oll"] == pytest.approx(0.3)
    assert "h_alad" in diagnostics


def test_predict_replays_the_fit(tmp_path, fitted_dir, noisy_line_csv):
    """Re-aggregating the saved plan reproduces the fitted composite bit for bit."""
    out = tmp_path / "predict"
    code = main(["predict", "--plan-dir", str(fitted_dir), "--data", str(noisy_line_csv), "--out", str(out)])
    assert code == EXIT_OK
    _, fitted = read_curve(fitted_dir / CURVE_FILE)
    _, replayed = read_curve(out / CURVE_FILE)
    np.testing.assert_array_equal(replayed["composite"], fitted["composite"])
    predictions = pd.read_csv(out / PREDICTIONS_FILE)
    assert len(predictions) == 600


def test_fit_reports_missing_column(tmp_path):
    """A dataset without a y column exits with the validation code."""
    bad = tmp_path / "bad.csv"
    pd.DataFrame({"x": [0.0, 0.5, 1.0], "z": [1.0, 2.0, 3.0]}).to_csv(bad, index=False)
    assert main(["fit", "--data", str(bad), "--m", "1", "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_invalid_numeric_input_is_a_validation_error(tmp_path, monkeypatch, noisy_line_csv):
    """A ValueError from the numeric layer maps to exit code 2, not a traceback."""
    import app

    def reject(*args, **kwargs):
        raise ValueError("need n > m >= 1, got n=3, m=3")

    monkeypatch.setattr(app, "cmd_fit", reject)
    code = main(["fit", "--data", str(noisy_line_csv), "--m", "3", "--out", str(tmp_path / "o")])
    assert code == EXIT_VALIDATION, f"expected exit code 2, got {code}"


def test_evaluate_perfect_curve(tmp_path):
    """A saved curve that interpolates the test responses scores zero error."""
    fit_dir = tmp_path / "fit"
    fit_dir.mkdir()
    grid = np.linspace(0, 1, 11)
    write_curve(grid, {"composite": 1.0 + 2.0 * grid}, fit_dir)
    test_csv = tmp_path / "test.csv"
    pd.DataFrame({"x": [0.1, 0.5, 0.9], "y": [1.2, 2.0, 2.8]}).to_csv(test_csv, index=False)

    out = tmp_path / "eval"
    code = main(["evaluate", "--fit-dir", str(fit_dir), "--test", str(test_csv), "--out", str(out)])
    assert code == EXIT_OK
    metrics = read_metrics(out / METRICS_FILE)
    assert metrics.loc[0, "rmse"] == pytest.approx(0.0, abs=1e-12)
    assert metrics.loc[0, "c"] == "1"


def test_bundled_presets_load():
    """Every preset parses and validates."""
    names = list_presets()
    assert names, "no presets bundled"
    for name in names:
        config = load_preset(name)
        assert isinstance(config, RunConfig)
    print(f"✅ {len(names)} presets validated")


def test_config_round_trips_through_yaml(tmp_path):
    """The resolved configuration reloads to an equal configuration."""
    config = load_preset("fit_default")
    path = _write_yaml(tmp_path / "resolved.yml", config.to_dict())
    assert load_run_config(path) == config
