"""Accuracy metrics for fitted curves and predictions."""

from typing import Tuple

import numpy as np

from dcqr.errors import DivideByZero, LengthMismatch


def compute_ase(fitted: np.ndarray, truth: np.ndarray) -> float:
    """Average squared error over an evaluation grid."""
    fitted = np.asarray(fitted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if fitted.shape != truth.shape:
        raise LengthMismatch(f"fitted has shape {fitted.shape}, truth has {truth.shape}")
    return float(np.mean((fitted - truth) ** 2))


def compute_rase(g1_ase: float, g2_ase: float) -> float:
    """RASE(g1, g2) = ASE(g2) / ASE(g1); above 1 when g1 is more accurate."""
    if g1_ase == 0:
        raise DivideByZero("ASE of the first estimator is zero")
    return float(g2_ase / g1_ase)


def rmse_mae(predicted: np.ndarray, observed: np.ndarray) -> Tuple[float, float]:
    """Root mean squared error and mean absolute error of predictions."""
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if predicted.shape != observed.shape:
        raise LengthMismatch(f"predicted has shape {predicted.shape}, observed has {observed.shape}")
    if observed.size == 0:
        raise ValueError("Test set is empty")
    resid = predicted - observed
    return float(np.sqrt(np.mean(resid ** 2))), float(np.mean(np.abs(resid)))
