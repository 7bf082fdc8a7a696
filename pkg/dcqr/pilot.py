"""Pilot stage: DC Nadaraya-Watson mean/scale curves and the residual error model."""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .constants import (
    DENSITY_FLOOR,
    DENSITY_GRID_PAD,
    DENSITY_GRID_SIZE,
    MAX_WIDENINGS,
    MIN_DENSITY_BANDWIDTH,
    PILOT_GRID_SIZE,
    RULE_OF_THUMB_FACTOR,
    SIGMA_FLOOR_FRACTION,
    WIDENING_FACTOR,
)
from .errors import EmptyNeighborhood
from .kernels import KernelSpec, kernel_window_sums
from .local_quantile import ObservationBatch

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True, eq=False)
class PilotCurves:
    """Pilot mean and scale curves tabulated on a covariate grid."""

    grid_x: np.ndarray
    m_nw: np.ndarray
    sigma_hat: np.ndarray
    h_pilot: float
    kernel: KernelSpec
    design_density: Optional[np.ndarray] = None
    sigma_floor: float = 0.0

    def __post_init__(self):
        if not (len(self.grid_x) == len(self.m_nw) == len(self.sigma_hat)):
            raise ValueError("Pilot curves must share the grid length")
        if np.any(np.diff(self.grid_x) <= 0):
            raise ValueError("Pilot grid must be strictly increasing")
        if np.any(np.asarray(self.sigma_hat) <= 0):
            raise ValueError("Pilot scale curve must be strictly positive")


@dataclass(frozen=True, eq=False)
class ErrorModel:
    """Tabulated density and CDF of the standardized errors."""

    density_grid: np.ndarray
    f_eps: np.ndarray
    F_eps: np.ndarray
    density_floor: float = DENSITY_FLOOR
    clamped: int = 0

    def __post_init__(self):
        grid = np.asarray(self.density_grid, dtype=float)
        f = np.asarray(self.f_eps, dtype=float)
        F = np.asarray(self.F_eps, dtype=float)
        if not (grid.size == f.size == F.size) or grid.size < 2:
            raise ValueError("Error model arrays must share a length of at least 2")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("Density grid must be strictly increasing")
        if np.any(f < 0):
            raise ValueError("Density values must be nonnegative")
        if np.any(np.diff(F) < 0) or F[0] < 0 or F[-1] > 1:
            raise ValueError("CDF values must be nondecreasing within [0, 1]")
        mass = trapezoid(f, grid)
        if not 0.99 <= mass <= 1.01:
            raise ValueError(f"Density integrates to {mass:.4f}, expected 1")
        object.__setattr__(self, "density_grid", grid)
        object.__setattr__(self, "f_eps", f)
        object.__setattr__(self, "F_eps", F)

    @classmethod
    def tabulate(
        cls,
        pdf: Callable[[np.ndarray], np.ndarray],
        cdf: Callable[[np.ndarray], np.ndarray],
        lo: float,
        hi: float,
        n_points: int = DENSITY_GRID_SIZE,
        density_floor: float = DENSITY_FLOOR,
    ) -> "ErrorModel":
        """Build an error model from a known density and CDF on [lo, hi]."""
        grid = np.linspace(lo, hi, n_points)
        f = np.clip(np.asarray(pdf(grid), dtype=float), 0.0, None)
        F = np.maximum.accumulate(np.clip(np.asarray(cdf(grid), dtype=float), 0.0, 1.0))
        return cls(density_grid=grid, f_eps=f, F_eps=F, density_floor=density_floor)

    @property
    def cell_width(self) -> float:
        return float(self.density_grid[1] - self.density_grid[0])


def rule_of_thumb_bandwidth(values: np.ndarray) -> float:
    """Normal-reference bandwidth 1.06 * sd * n^(-1/5)."""
    values = np.asarray(values, dtype=float)
    return float(RULE_OF_THUMB_FACTOR * np.std(values) * values.size ** -0.2)


def nw_partial_sums(
    batch: ObservationBatch,
    values: np.ndarray,
    grid_x: np.ndarray,
    h: ArrayLike,
    k: KernelSpec,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-batch sums S = sum K_h(X - x) v and T = sum K_h(X - x).

    ``values`` is aligned with ``batch.xs`` (original order).
    """
    order = np.argsort(batch.xs, kind="mergesort")
    xs_sorted = batch.xs[order]
    rows = np.vstack([np.asarray(values, dtype=float)[order], np.ones(batch.n)])
    sums = kernel_window_sums(xs_sorted, rows, grid_x, h, k)[0]
    return sums[0], sums[1]


def reduce_partial_sums(parts: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    """Ordered sum-reduce of per-batch (S, T) pairs."""
    s_total = np.zeros_like(parts[0][0])
    t_total = np.zeros_like(parts[0][1])
    for s_part, t_part in parts:
        s_total = s_total + s_part
        t_total = t_total + t_part
    return s_total, t_total


def _dc_nadaraya_watson(
    batches: Sequence[ObservationBatch],
    values: Sequence[np.ndarray],
    grid_x: np.ndarray,
    h_pilot: float,
    k: KernelSpec,
) -> Tuple[np.ndarray, np.ndarray]:
    """Map every batch to (S, T), reduce, widen h where T stays zero."""
    if h_pilot <= 0:
        raise ValueError(f"Pilot bandwidth must be positive, got {h_pilot}")
    grid_x = np.asarray(grid_x, dtype=float)
    h_vec = np.full(grid_x.shape, float(h_pilot))
    ratio = np.full(grid_x.shape, np.nan)
    t_out = np.zeros(grid_x.shape)
    pending = np.arange(grid_x.size)

    for attempt in range(MAX_WIDENINGS + 1):
        parts = [
            nw_partial_sums(batch, vals, grid_x[pending], h_vec[pending], k)
            for batch, vals in zip(batches, values)
        ]
        s_total, t_total = reduce_partial_sums(parts)
        filled = t_total > 0
        ratio[pending[filled]] = s_total[filled] / t_total[filled]
        t_out[pending[filled]] = t_total[filled]
        pending = pending[~filled]
        if pending.size == 0:
            return ratio, t_out
        logger.debug("Widening pilot bandwidth at %d empty grid points", pending.size)
        h_vec[pending] *= WIDENING_FACTOR

    raise EmptyNeighborhood(
        f"no observations within the pilot window at {pending.size} grid points",
        x=float(grid_x[pending[0]]),
    )


def fit_nw_mean(
    batches: Sequence[ObservationBatch], grid_x: np.ndarray, h_pilot: float, k: KernelSpec
) -> np.ndarray:
    """DC Nadaraya-Watson mean: sum_i S_i(x) / sum_i T_i(x)."""
    curve, _ = _dc_nadaraya_watson(batches, [b.ys for b in batches], grid_x, h_pilot, k)
    return curve


def _sigma_floor(batches: Sequence[ObservationBatch]) -> float:
    sd_y = float(np.std(np.concatenate([b.ys for b in batches])))
    return SIGMA_FLOOR_FRACTION * sd_y if sd_y > 0 else SIGMA_FLOOR_FRACTION


def fit_nw_variance(
    batches: Sequence[ObservationBatch],
    m_nw_curve: np.ndarray,
    grid_x: np.ndarray,
    h_pilot: float,
    k: KernelSpec,
) -> np.ndarray:
    """DC Nadaraya-Watson variance of the residuals about the pilot mean.

    Returns sigma^2 floored at (1e-4 * sd(y))^2.
    """
    grid_x = np.asarray(grid_x, dtype=float)
    squared = [(b.ys - np.interp(b.xs, grid_x, m_nw_curve)) ** 2 for b in batches]
    sigma2, _ = _dc_nadaraya_watson(batches, squared, grid_x, h_pilot, k)
    return np.maximum(sigma2, _sigma_floor(batches) ** 2)


def pilot_bandwidth(batches: Sequence[ObservationBatch]) -> float:
    """Average of the per-batch normal-reference bandwidths."""
    pooled = rule_of_thumb_bandwidth(np.concatenate([b.xs for b in batches]))
    per_batch = []
    for batch in batches:
        h = rule_of_thumb_bandwidth(batch.xs)
        per_batch.append(h if h > 0 else pooled)
    h_pilot = float(np.mean(per_batch))
    if h_pilot <= 0:
        raise ValueError("Covariates have zero spread; pilot bandwidth undefined")
    return h_pilot


def fit_pilot(
    batches: Sequence[ObservationBatch],
    k: KernelSpec,
    grid_size: int = PILOT_GRID_SIZE,
    h_pilot: Optional[float] = None,
) -> PilotCurves:
    """Pilot mean and scale curves on an equispaced grid over the pooled x-range."""
    x_min = min(float(np.min(b.xs)) for b in batches)
    x_max = max(float(np.max(b.xs)) for b in batches)
    grid_x = np.linspace(x_min, x_max, grid_size)
    h_pilot = h_pilot if h_pilot is not None else pilot_bandwidth(batches)

    m_nw, t_total = _dc_nadaraya_watson(batches, [b.ys for b in batches], grid_x, h_pilot, k)
    sigma2 = fit_nw_variance(batches, m_nw, grid_x, h_pilot, k)
    n_total = sum(b.n for b in batches)

    logger.info("Pilot curves fitted on %d points (h_pilot=%.4g, %d batches)",
                n_total, h_pilot, len(batches))
    return PilotCurves(
        grid_x=grid_x,
        m_nw=m_nw,
        sigma_hat=np.sqrt(sigma2),
        h_pilot=h_pilot,
        kernel=k,
        design_density=t_total / n_total,
        sigma_floor=_sigma_floor(batches),
    )


def evaluate_pilot(pilot: PilotCurves, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
    """Interpolate (m_nw, sigma_hat) at x, clamping outside the grid.

    Returns:
        Tuple of (mean values, scale values, number of clamped points)
    """
    x = np.asarray(x, dtype=float)
    clamped = int(np.count_nonzero((x < pilot.grid_x[0]) | (x > pilot.grid_x[-1])))
    return (
        np.interp(x, pilot.grid_x, pilot.m_nw),
        np.interp(x, pilot.grid_x, pilot.sigma_hat),
        clamped,
    )


def variance_function(pilot: PilotCurves, x: np.ndarray) -> np.ndarray:
    """a(x) = sigma^2(x) * int K^2 / f_X(x); infinite where f_X vanishes."""
    if pilot.design_density is None:
        raise ValueError("Pilot curves carry no design density")
    x = np.asarray(x, dtype=float)
    sigma = np.interp(x, pilot.grid_x, pilot.sigma_hat)
    density = np.interp(x, pilot.grid_x, pilot.design_density)
    with np.errstate(divide="ignore"):
        return np.where(density > 0, sigma ** 2 * pilot.kernel.rk / density, np.inf)


def standardized_residuals(
    batches: Sequence[ObservationBatch], pilot: PilotCurves
) -> Tuple[List[np.ndarray], int]:
    """eps_ij = (Y_ij - m_nw(X_ij)) / sigma(X_ij) per batch, with clamp count."""
    residuals = []
    clamped = 0
    for batch in batches:
        mean, scale, out_of_range = evaluate_pilot(pilot, batch.xs)
        residuals.append((batch.ys - mean) / scale)
        clamped += out_of_range
    return residuals, clamped


def estimate_error_model(
    batches: Sequence[ObservationBatch],
    pilot: PilotCurves,
    h_density: Optional[float] = None,
    restandardize: bool = False,
    grid_size: int = DENSITY_GRID_SIZE,
) -> ErrorModel:
    """Estimate the standardized error density and CDF.

    Each batch contributes its own kernel density estimate of the
    standardized residuals; the estimates are averaged with weight 1/m. The
    CDF is the cumulative trapezoid of the normalized density.

    Args:
        batches: Data batches
        pilot: Pilot mean/scale curves covering the batches
        h_density: Fixed KDE bandwidth; per-batch rule of thumb when None
        restandardize: Re-center and re-scale the pooled residuals first
        grid_size: Number of density grid points

    Returns:
        ErrorModel
    """
    residuals, clamped = standardized_residuals(batches, pilot)
    if clamped:
        logger.warning("%d observations fell outside the pilot grid and were clamped", clamped)

    if restandardize:
        pooled = np.concatenate(residuals)
        center, spread = float(np.mean(pooled)), float(np.std(pooled))
        if spread > 0:
            residuals = [(r - center) / spread for r in residuals]

    if h_density is not None:
        bandwidths = [max(float(h_density), MIN_DENSITY_BANDWIDTH)] * len(residuals)
    else:
        bandwidths = [max(rule_of_thumb_bandwidth(r), MIN_DENSITY_BANDWIDTH) for r in residuals]

    pad = DENSITY_GRID_PAD * max(bandwidths)
    lo = min(float(np.min(r)) for r in residuals) - pad
    hi = max(float(np.max(r)) for r in residuals) + pad
    grid = np.linspace(lo, hi, grid_size)

    kernel = pilot.kernel
    density = np.zeros(grid_size)
    for eps, h in zip(residuals, bandwidths):
        eps_sorted = np.sort(eps)
        estimate = kernel_window_sums(eps_sorted, np.ones(eps.size), grid, h, kernel)[0, 0] / eps.size
        density = density + estimate
    density /= len(residuals)

    density /= trapezoid(density, grid)
    cdf = cumulative_trapezoid(density, grid, initial=0.0)
    cdf = np.clip(np.maximum.accumulate(cdf / cdf[-1]), 0.0, 1.0)

    return ErrorModel(density_grid=grid, f_eps=density, F_eps=cdf, clamped=clamped)


def quantile_inverse(em: ErrorModel, tau: ArrayLike) -> ArrayLike:
    """Generalized inverse inf{t: F(t) >= tau}, linear between grid nodes."""
    tau_arr = np.asarray(tau, dtype=float)
    if np.any((tau_arr <= 0) | (tau_arr >= 1)):
        raise ValueError("Quantile levels must lie in (0, 1)")

    grid, F = em.density_grid, em.F_eps
    upper = np.clip(np.searchsorted(F, tau_arr, side="left"), 1, F.size - 1)
    lower = upper - 1
    span = F[upper] - F[lower]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(span > 0, (tau_arr - F[lower]) / span, 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    result = grid[lower] + frac * (grid[upper] - grid[lower])
    if result.ndim == 0:
        return float(result)
    return result


def density_at_quantile(em: ErrorModel, tau: ArrayLike) -> ArrayLike:
    """f(F^-1(tau)) by linear interpolation, floored at the model's density floor."""
    q = quantile_inverse(em, tau)
    values = np.maximum(np.interp(q, em.density_grid, em.f_eps), em.density_floor)
    if np.ndim(values) == 0:
        return float(values)
    return values
