"""Artifact writers and readers: plans, local values, curves, reports."""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from dcqr.composite_plan import CompositePlan, QuantileGrid
from dcqr.constants import MODEL_VERSION, REPLAY_FLOAT_FORMAT, REPORT_FLOAT_FORMAT
from dcqr.errors import DatasetError
from dcqr.kernels import get_kernel

logger = logging.getLogger(__name__)

PLAN_FILE = "plan.csv"
LOCAL_VALUES_FILE = "local_values.csv"
CURVE_FILE = "curve.csv"
DIAGNOSTICS_FILE = "diagnostics.json"
RASE_TABLE_FILE = "rase_table.csv"
RASE_TEXT_FILE = "rase_table.txt"
REPLICATIONS_LOG_FILE = "replications_log.csv"
METRICS_FILE = "metrics.csv"
METRICS_TEXT_FILE = "metrics.txt"
PREDICTIONS_FILE = "predictions.csv"

PLAN_COLUMNS = ["i", "j", "tau", "weight", "bandwidth", "quantile_value"]


def _fmt(value: float) -> str:
    return REPLAY_FLOAT_FORMAT % value


def _optional(value: Optional[float]) -> str:
    return "none" if value is None else _fmt(value)


def _parse_optional(text: str) -> Optional[float]:
    return None if text == "none" else float(text)


def _write_with_metadata(path: Path, metadata: Mapping[str, Any], frame: pd.DataFrame, float_format: str) -> Path:
    with open(path, "w", newline="") as f:
        for key, value in metadata.items():
            f.write(f"# {key}: {value}\n")
        frame.to_csv(f, index=False, float_format=float_format)
    return path


def _read_with_metadata(path: Path) -> Tuple[Dict[str, str], pd.DataFrame]:
    """Split leading ``# key: value`` lines from the CSV body."""
    path = Path(path)
    metadata: Dict[str, str] = {}
    skip = 0
    with open(path, "r") as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            metadata[key.strip()] = value.strip()
            skip += 1
    frame = pd.read_csv(path, skiprows=skip, float_precision="round_trip")
    return metadata, frame


def write_plan(plan: CompositePlan, out_dir) -> Path:
    """plan.csv: one record per (i, j) with the plan's metadata as comments."""
    metadata = {
        "model_version": MODEL_VERSION,
        "m": plan.m,
        "J": plan.J,
        "d_tau": _fmt(plan.grid.d_tau),
        "tau_bar": _fmt(plan.grid.tau_bar),
        "tau_bar_mode": plan.tau_bar_mode,
        "bandwidth_mode": plan.bandwidth_mode,
        "nu": _fmt(plan.nu),
        "kernel": plan.kernel.family,
        "batch_sizes": " ".join(_fmt(n) for n in plan.batch_sizes),
        "h_oll": _optional(plan.h_oll),
        "alpha": _optional(plan.alpha),
    }
    frame = pd.DataFrame.from_records(plan.cell_records(), columns=PLAN_COLUMNS)
    path = _write_with_metadata(Path(out_dir) / PLAN_FILE, metadata, frame, REPLAY_FLOAT_FORMAT)
    logger.info("Wrote %s", path)
    return path


def read_plan(path) -> CompositePlan:
    """Rebuild a CompositePlan from plan.csv (levels taken verbatim)."""
    try:
        meta, frame = _read_with_metadata(path)
        m, J = int(meta["m"]), int(meta["J"])
        frame = frame.sort_values(["i", "j"], kind="mergesort")
        if len(frame) != m * J:
            raise DatasetError(f"{path}: expected {m * J} plan records, found {len(frame)}")
        levels = frame["tau"].to_numpy(dtype=float).reshape(m, J)
        grid = QuantileGrid(m=m, J=J, d_tau=float(meta["d_tau"]), tau_bar=float(meta["tau_bar"]), levels=levels)
        return CompositePlan(
            grid=grid,
            weights=frame["weight"].to_numpy(dtype=float).reshape(m, J),
            bandwidths=frame["bandwidth"].to_numpy(dtype=float).reshape(m, J),
            kernel=get_kernel(meta["kernel"]),
            quantile_values=frame["quantile_value"].to_numpy(dtype=float).reshape(m, J),
            nu=float(meta["nu"]),
            batch_sizes=np.array([float(v) for v in meta["batch_sizes"].split()]),
            tau_bar_mode=meta["tau_bar_mode"],
            bandwidth_mode=meta["bandwidth_mode"],
            h_oll=_parse_optional(meta["h_oll"]),
            alpha=_parse_optional(meta["alpha"]),
        )
    except KeyError as err:
        raise DatasetError(f"{path}: missing plan field {err}") from err


def write_local_values(grid_x: np.ndarray, local_values: np.ndarray, out_dir) -> Path:
    """local_values.csv in long format (i, j, x, value), 1-based i and j."""
    m, J, G = local_values.shape
    ii, jj, gg = np.meshgrid(np.arange(m), np.arange(J), np.arange(G), indexing="ij")
    frame = pd.DataFrame({
        "i": ii.ravel() + 1,
        "j": jj.ravel() + 1,
        "x": np.asarray(grid_x, dtype=float)[gg.ravel()],
        "value": local_values.ravel(),
    })
    path = Path(out_dir) / LOCAL_VALUES_FILE
    frame.to_csv(path, index=False, float_format=REPLAY_FLOAT_FORMAT)
    return path


def read_local_values(path) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (grid_x, local values of shape (m, J, G))."""
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = {"i", "j", "x", "value"} - set(frame.columns)
    if missing:
        raise DatasetError(f"{path}: line 1: missing column '{sorted(missing)[0]}'")
    frame = frame.sort_values(["i", "j"], kind="mergesort")
    m, J = int(frame["i"].max()), int(frame["j"].max())
    G = len(frame) // (m * J)
    if G * m * J != len(frame):
        raise DatasetError(f"{path}: local values do not form a full m x J x G table")
    grid_x = frame["x"].to_numpy(dtype=float)[:G]
    return grid_x, frame["value"].to_numpy(dtype=float).reshape(m, J, G)


def write_curve(grid_x: np.ndarray, curves: Mapping[str, np.ndarray], out_dir, name: str = CURVE_FILE) -> Path:
    """curve.csv: x followed by one column per estimator."""
    frame = pd.DataFrame({"x": np.asarray(grid_x, dtype=float)})
    for label, values in curves.items():
        frame[label] = np.asarray(values, dtype=float)
    path = Path(out_dir) / name
    frame.to_csv(path, index=False, float_format=REPLAY_FLOAT_FORMAT)
    logger.info("Wrote %s", path)
    return path


def read_curve(path) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    frame = pd.read_csv(path, float_precision="round_trip")
    if "x" not in frame.columns:
        raise DatasetError(f"{path}: line 1: missing column 'x'")
    curves = {c: frame[c].to_numpy(dtype=float) for c in frame.columns if c != "x"}
    return frame["x"].to_numpy(dtype=float), curves


def write_predictions(xs: np.ndarray, predictions: Mapping[str, np.ndarray], out_dir) -> Path:
    return write_curve(xs, predictions, out_dir, name=PREDICTIONS_FILE)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def write_diagnostics(diagnostics: Mapping[str, Any], out_dir) -> Path:
    payload = {
        "metadata": {
            "export_date": datetime.now().isoformat(),
            "model_version": MODEL_VERSION,
        },
        "diagnostics": dict(diagnostics),
    }
    path = Path(out_dir) / DIAGNOSTICS_FILE
    path.write_text(json.dumps(payload, indent=2, default=_json_default))
    return path


def read_diagnostics(path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text())["diagnostics"]


def format_rase_table(table: pd.DataFrame) -> str:
    """Plain-text rendering of the RASE table, one row per (law, lam, m, pair)."""
    if table.empty:
        return "(no results)\n"
    return table.to_string(index=False, float_format=lambda v: REPORT_FLOAT_FORMAT % v) + "\n"


def write_report(table: pd.DataFrame, log: pd.DataFrame, out_dir) -> Dict[str, Path]:
    """rase_table.csv, rase_table.txt and replications_log.csv."""
    out_dir = Path(out_dir)
    paths = {
        "table": out_dir / RASE_TABLE_FILE,
        "text": out_dir / RASE_TEXT_FILE,
        "log": out_dir / REPLICATIONS_LOG_FILE,
    }
    table.to_csv(paths["table"], index=False, float_format=REPORT_FLOAT_FORMAT)
    paths["text"].write_text(format_rase_table(table))
    log.to_csv(paths["log"], index=False, float_format=REPLAY_FLOAT_FORMAT)
    logger.info("Wrote report to %s", out_dir)
    return paths


def read_report(out_dir) -> Tuple[pd.DataFrame, pd.DataFrame]:
    out_dir = Path(out_dir)
    return (
        pd.read_csv(out_dir / RASE_TABLE_FILE),
        pd.read_csv(out_dir / REPLICATIONS_LOG_FILE, float_precision="round_trip"),
    )


def format_metrics(metrics: pd.DataFrame) -> str:
    """Metrics table with r_ol as a 2-decimal percentage."""
    formatters = {
        "r_ol": lambda v: f"{v:.2f}%",
        "rmse": lambda v: REPORT_FLOAT_FORMAT % v,
        "mae": lambda v: REPORT_FLOAT_FORMAT % v,
        "gamma": lambda v: "inf" if np.isinf(v) else f"{v:g}",
    }
    return metrics.to_string(index=False, formatters=formatters) + "\n"


def write_metrics(metrics: pd.DataFrame, out_dir) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {"table": out_dir / METRICS_FILE, "text": out_dir / METRICS_TEXT_FILE}
    metrics.to_csv(paths["table"], index=False, float_format=REPLAY_FLOAT_FORMAT)
    paths["text"].write_text(format_metrics(metrics))
    logger.info("Wrote metrics to %s", out_dir)
    return paths


def read_metrics(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", dtype={"c": str})
