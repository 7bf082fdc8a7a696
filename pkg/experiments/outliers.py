"""Outlier tagging/scaling and the prediction-robustness protocol."""

import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from dcqr.constants import DEFAULT_GAMMAS, DEFAULT_N_GRID, DEFAULT_SCALES
from dcqr.errors import ConfigError, DatasetError
from dcqr.estimator import (
    CompositeConfig,
    alad_bandwidth,
    fit_alad,
    fit_composite,
    merge_batches,
    plan_composite,
    select_oll_bandwidth,
)
from dcqr.kernels import get_kernel
from dcqr.local_quantile import ObservationBatch, local_linear_ls_curve
from dcqr.pilot import PilotCurves, estimate_error_model, evaluate_pilot, fit_pilot

from .distributions import ErrorDistributionSpec, sample_error
from .harness import ESTIMATORS
from .metrics import rmse_mae
from .models import HOMOSCEDASTIC, RegressionModel

logger = logging.getLogger(__name__)

TrainingData = Union[ObservationBatch, Sequence[ObservationBatch]]

METRIC_COLUMNS = ["c", "gamma", "r_ol", "estimator", "rmse", "mae"]


def format_scale(c: Optional[float]) -> str:
    return "remove" if c is None else f"{c:g}"


def tag_outliers(batch: ObservationBatch, pilot: PilotCurves, gamma: float) -> np.ndarray:
    """Mask of points with |y - m_nw(x)| > gamma * sigma_hat(x)."""
    mean, scale, _ = evaluate_pilot(pilot, batch.xs)
    return np.abs(batch.ys - mean) > gamma * scale


def tag_and_scale_outliers(
    train: TrainingData,
    pilot: PilotCurves,
    gamma: float,
    c: Optional[float],
) -> Tuple[TrainingData, float]:
    """Replace tagged outliers (x, y) by (x, c*y), or drop them when c is None.

    Args:
        train: A batch or a list of batches
        pilot: Pilot curves supplying m_nw and sigma_hat
        gamma: Tagging threshold in pilot standard deviations
        c: Scaling factor; None removes the outliers

    Returns:
        Tuple of (modified data with the same structure, r_ol in percent)
    """
    if not gamma > 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    single = isinstance(train, ObservationBatch)
    batches = [train] if single else list(train)

    modified: List[ObservationBatch] = []
    n_total = 0
    n_outliers = 0
    for batch in batches:
        mask = tag_outliers(batch, pilot, gamma)
        n_total += batch.n
        n_outliers += int(np.count_nonzero(mask))
        if c is None:
            keep = ~mask
            if not np.any(keep):
                raise DatasetError(f"removing outliers empties batch {batch.batch_id}")
            modified.append(ObservationBatch(batch.xs[keep], batch.ys[keep], batch_id=batch.batch_id))
        elif c == 1 or not np.any(mask):
            modified.append(batch)
        else:
            ys = np.where(mask, c * batch.ys, batch.ys)
            modified.append(ObservationBatch(batch.xs, ys, batch_id=batch.batch_id))

    r_ol = 100.0 * n_outliers / n_total
    logger.debug("gamma=%g tagged %d of %d points (%.2f%%)", gamma, n_outliers, n_total, r_ol)
    return (modified[0] if single else modified), r_ol


def planted_outlier_dataset(
    n: int,
    rng: np.random.Generator,
    spec: ErrorDistributionSpec = ErrorDistributionSpec("gamma", (2.0, 1.5)),
    model: RegressionModel = HOMOSCEDASTIC,
    outlier_fraction: float = 0.01,
    outlier_size: float = 10.0,
) -> Tuple[ObservationBatch, ObservationBatch]:
    """Asymmetric-error data with planted outliers in the training half.

    The first n//2 draws form the training set, of which a fraction is
    shifted up by ``outlier_size`` scale units; the test half stays clean.
    """
    if n < 4:
        raise ConfigError("planted outlier data needs at least 4 points")
    xs = model.design(n, rng)
    ys = model.mean_fn(xs) + model.scale_fn(xs) * sample_error(spec, n, rng)
    order = rng.permutation(n)
    train_idx, test_idx = order[: n // 2], order[n // 2:]

    train_y = ys[train_idx].copy()
    n_planted = int(round(outlier_fraction * train_idx.size))
    planted = rng.choice(train_idx.size, size=n_planted, replace=False)
    train_y[planted] += outlier_size * model.scale_fn(xs[train_idx][planted])

    return (
        ObservationBatch(xs[train_idx], train_y, batch_id=0),
        ObservationBatch(xs[test_idx], ys[test_idx], batch_id=0),
    )


def _predict(curve: np.ndarray, grid_x: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.interp(x, grid_x, curve)


def run_outlier_protocol(
    train: Sequence[ObservationBatch],
    test: ObservationBatch,
    config: CompositeConfig,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
    scales: Sequence[Optional[float]] = DEFAULT_SCALES,
    n_grid: int = DEFAULT_N_GRID,
    rng: Optional[np.random.Generator] = None,
    estimators: Sequence[str] = ESTIMATORS,
) -> pd.DataFrame:
    """RMSE/MAE of each estimator on the test set for every (c, gamma).

    The pilot, error model, plan and bandwidths come from the unmodified
    training data and stay fixed while outliers are scaled or removed.
    The first row set is the untouched baseline (c = 1, gamma = inf).
    """
    train = list(train)
    if not train:
        raise DatasetError("training data has no batches")
    k = get_kernel(config.kernel)
    merged = merge_batches(train)
    grid_x = np.linspace(float(np.min(merged.xs)), float(np.max(merged.xs)), n_grid)
    rng = rng if rng is not None else np.random.default_rng(0)

    pilot = fit_pilot(train, k, config.pilot_grid_size)
    em = estimate_error_model(train, pilot, restandardize=config.restandardize_residuals)
    h_oll = config.h_oll if config.h_oll is not None else select_oll_bandwidth(
        merged, grid_x, k, config.oracle_bandwidth, rng)
    plan = None
    if "composite" in estimators:
        plan, _ = plan_composite(train, config, grid_x, h_oll=h_oll, pilot=pilot, error_model=em)
    h_alad = alad_bandwidth(em, h_oll, [b.n for b in train])
    logger.info("Outlier protocol: h_oll=%.4g, h_alad=%.4g, %d training points", h_oll, h_alad, merged.n)

    def score(data: List[ObservationBatch], c_label: str, gamma: float, r_ol: float) -> List[dict]:
        curves = {}
        if "composite" in estimators:
            curves["composite"] = fit_composite(data, config, grid_x, plan=plan).global_values
        if "alad" in estimators:
            curves["alad"] = fit_alad(data, grid_x, h_alad, k)
        if "oracle" in estimators:
            curves["oracle"] = local_linear_ls_curve(merge_batches(data), grid_x, h_oll, k)
        rows = []
        for name, curve in curves.items():
            rmse, mae = rmse_mae(_predict(curve, grid_x, test.xs), test.ys)
            rows.append({"c": c_label, "gamma": gamma, "r_ol": r_ol, "estimator": name,
                         "rmse": rmse, "mae": mae})
        return rows

    rows = score(train, format_scale(1.0), float("inf"), 0.0)
    for c in scales:
        if c is not None and c == 1:
            continue
        for gamma in gammas:
            modified, r_ol = tag_and_scale_outliers(train, pilot, gamma, c)
            rows.extend(score(modified, format_scale(c), float(gamma), r_ol))
    return pd.DataFrame.from_records(rows, columns=METRIC_COLUMNS)


def evaluate_curves(curves: dict, grid_x: np.ndarray, test: ObservationBatch) -> pd.DataFrame:
    """RMSE/MAE of saved curves on a test set (no outlier handling)."""
    rows = []
    for name, curve in curves.items():
        rmse, mae = rmse_mae(_predict(np.asarray(curve, dtype=float), grid_x, test.xs), test.ys)
        rows.append({"c": format_scale(1.0), "gamma": float("inf"), "r_ol": 0.0,
                     "estimator": name, "rmse": rmse, "mae": mae})
    return pd.DataFrame.from_records(rows, columns=METRIC_COLUMNS)
