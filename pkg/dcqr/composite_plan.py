"""Quantile grids, composite weights, and bandwidth planning."""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from scipy.integrate import trapezoid

from .constants import (
    DELTA_TAU,
    FLAT_CURVATURE_TOLERANCE,
    RIDGE_CONDITION_LIMIT,
    RIDGE_SCALE,
    ROOT_MAX_ITER,
    ROOT_TOLERANCE,
    SINGULAR_PLAN_TOLERANCE,
    WEIGHT_SUPPORT_FRACTION,
)
from .errors import FlatCurvature, InfeasibleGrid, NoRoot, SingularPlan
from .kernels import KernelSpec
from .pilot import ErrorModel, PilotCurves, density_at_quantile, quantile_inverse, variance_function

logger = logging.getLogger(__name__)


def grid_levels(m: int, J: int, d_tau: float, tau_bar: float) -> np.ndarray:
    """Uniformly spaced levels tau_ij, shape (m, J).

    tau_ij = tau_bar + ((i + m*j - m) / (m*J) - (1 + 1/(m*J)) / 2) * d_tau
    with 1-based i (batch) and j (level).
    """
    i = np.arange(1, m + 1, dtype=float)[:, None]
    j = np.arange(1, J + 1, dtype=float)[None, :]
    total = float(m * J)
    return tau_bar + ((i + m * j - m) / total - (1.0 + 1.0 / total) / 2.0) * d_tau


def feasible_tau_bar_interval(d_tau: float) -> Tuple[float, float]:
    """Closed range of tau_bar keeping (tau_bar -/+ d_tau/2) inside the admissible levels."""
    lo, hi = DELTA_TAU + d_tau / 2.0, 1.0 - DELTA_TAU - d_tau / 2.0
    if not 0.0 < d_tau < 1.0 or lo > hi:
        raise InfeasibleGrid(f"d_tau={d_tau} leaves no feasible tau_bar (delta_tau={DELTA_TAU})")
    return lo, hi


@dataclass(frozen=True, eq=False)
class QuantileGrid:
    """Matched quantile levels, one row per batch."""

    m: int
    J: int
    d_tau: float
    tau_bar: float
    levels: np.ndarray

    @property
    def flat_levels(self) -> np.ndarray:
        """Levels flattened with the batch index outermost."""
        return self.levels.ravel()


def build_quantile_grid(m: int, J: int, d_tau: float, tau_bar: float) -> QuantileGrid:
    """Build the (m, J) grid of quantile levels.

    Raises:
        InfeasibleGrid: If m*J < 2 or the levels leave (delta_tau, 1 - delta_tau)
    """
    if m < 1 or J < 1 or m * J < 2:
        raise InfeasibleGrid(f"need m*J >= 2, got m={m}, J={J}")
    lo, hi = feasible_tau_bar_interval(d_tau)
    if not lo - 1e-12 <= tau_bar <= hi + 1e-12:
        raise InfeasibleGrid(
            f"tau_bar={tau_bar:.6g} with d_tau={d_tau} violates "
            f"({DELTA_TAU}, {1 - DELTA_TAU}); feasible tau_bar in [{lo:.4g}, {hi:.4g}]"
        )
    return QuantileGrid(m=m, J=J, d_tau=d_tau, tau_bar=tau_bar,
                        levels=grid_levels(m, J, d_tau, tau_bar))


def root_search_interval(m: int, J: int, d_tau: float) -> Tuple[float, float]:
    """Feasible tau_bar interval shrunk by one level spacing d_tau / (mJ) at each end."""
    lo, hi = feasible_tau_bar_interval(d_tau)
    spacing = d_tau / (m * J)
    return lo + spacing, hi - spacing


def _bisect_root(objective: Callable[[float], float], m: int, J: int, d_tau: float, label: str) -> float:
    lo, hi = root_search_interval(m, J, d_tau)
    if lo >= hi:
        raise NoRoot(f"{label}: feasible tau_bar interval is empty for d_tau={d_tau}")

    f_lo, f_hi = objective(lo), objective(hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise NoRoot(
            f"{label}: objective keeps one sign on [{lo:.4g}, {hi:.4g}] "
            f"(f={f_lo:.3g}, {f_hi:.3g}); consider a smaller d_tau"
        )

    root = optimize.bisect(objective, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                           maxiter=ROOT_MAX_ITER, disp=False)
    residual = objective(root)
    if abs(residual) >= ROOT_TOLERANCE:
        logger.warning("%s root residual %.3g exceeds %.1g", label, residual, ROOT_TOLERANCE)
    return float(root)


def solve_tau_bar_star(em: ErrorModel, m: int, J: int, d_tau: float) -> float:
    """tau_bar* solving sum_ij F^-1(tau_ij(tau_bar)) = 0 by bisection.

    Raises:
        NoRoot: If the objective does not change sign on the feasible interval
    """
    def objective(tau_bar: float) -> float:
        return float(np.sum(quantile_inverse(em, grid_levels(m, J, d_tau, tau_bar))))

    tau_bar = _bisect_root(objective, m, J, d_tau, "tau_bar*")
    logger.info("Solved tau_bar* = %.6f (m=%d, J=%d, d_tau=%.3g)", tau_bar, m, J, d_tau)
    return tau_bar


def build_R_block(taus: np.ndarray, hs: np.ndarray, em: ErrorModel) -> np.ndarray:
    """Covariance block with entries (tau ^ tau' - tau tau') / (sqrt(h h') f(q) f(q'))."""
    taus = np.asarray(taus, dtype=float)
    hs = np.asarray(hs, dtype=float)
    dens = np.atleast_1d(density_at_quantile(em, taus))
    numerator = np.minimum.outer(taus, taus) - np.outer(taus, taus)
    denominator = np.sqrt(np.outer(hs, hs)) * np.outer(dens, dens)
    return numerator / denominator


def _regularized(block: np.ndarray) -> np.ndarray:
    if np.linalg.cond(block) > RIDGE_CONDITION_LIMIT:
        ridge = RIDGE_SCALE * np.trace(block) / block.shape[0]
        logger.warning("Ridge %.3g applied to an ill-conditioned R block", ridge)
        return block + ridge * np.eye(block.shape[0])
    return block


@dataclass(frozen=True, eq=False)
class VarianceModel:
    """Block-diagonal asymptotic covariance: S_i = R_i / n_i."""

    R_blocks: np.ndarray
    batch_sizes: np.ndarray
    a_of_x: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        blocks = np.asarray(self.R_blocks, dtype=float)
        sizes = np.asarray(self.batch_sizes, dtype=float)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise ValueError("R_blocks must have shape (m, J, J)")
        if sizes.shape != (blocks.shape[0],):
            raise ValueError("batch_sizes must have one entry per R block")
        object.__setattr__(self, "R_blocks", blocks)
        object.__setattr__(self, "batch_sizes", sizes)

    @property
    def m(self) -> int:
        return self.R_blocks.shape[0]

    @property
    def J(self) -> int:
        return self.R_blocks.shape[1]

    @property
    def S_blocks(self) -> np.ndarray:
        return self.R_blocks / self.batch_sizes[:, None, None]

    @cached_property
    def _solver_blocks(self) -> List[np.ndarray]:
        return [_regularized(block) for block in self.S_blocks]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """S^-1 rhs for a flattened mJ vector, one J x J block at a time."""
        rhs = np.asarray(rhs, dtype=float).reshape(self.m, self.J)
        return np.concatenate([np.linalg.solve(block, row)
                               for block, row in zip(self._solver_blocks, rhs)])

    def quadratic_form(self, weights: np.ndarray) -> float:
        """omega' S omega, accumulated block by block."""
        w = np.asarray(weights, dtype=float).reshape(self.m, self.J)
        return float(sum(row @ block @ row for block, row in zip(self.S_blocks, w)))


def build_variance_model(
    em: ErrorModel,
    grid: QuantileGrid,
    bandwidths: np.ndarray,
    batch_sizes: Sequence[float],
    a_of_x: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> VarianceModel:
    """R blocks for every batch row of the grid."""
    bandwidths = np.broadcast_to(np.asarray(bandwidths, dtype=float), grid.levels.shape)
    blocks = np.stack([build_R_block(grid.levels[i], bandwidths[i], em) for i in range(grid.m)])
    return VarianceModel(R_blocks=blocks, batch_sizes=np.asarray(batch_sizes, dtype=float),
                         a_of_x=a_of_x)


def unit_exponent_bandwidths(batch_sizes: Sequence[float], J: int, nu: float) -> np.ndarray:
    """h(1, nu): every level of batch i uses n_i^(-nu)."""
    sizes = np.asarray(batch_sizes, dtype=float)
    return np.repeat((sizes ** -nu)[:, None], J, axis=1)


def _project_onto_constraints(weights: np.ndarray, quantile_values: np.ndarray) -> np.ndarray:
    constraints = np.vstack([np.ones_like(quantile_values), quantile_values])
    target = np.array([1.0, 0.0])
    gap = constraints @ weights - target
    return weights - constraints.T @ np.linalg.solve(constraints @ constraints.T, gap)


def optimal_weights(var_model: VarianceModel, quantile_values: np.ndarray) -> np.ndarray:
    """Minimum-variance weights subject to sum(w) = 1 and sum(w * q) = 0.

    w* = (c1 d1 - c2 d2) / (c1 c3 - c2^2) with d1 = S^-1 1, d2 = S^-1 q,
    c1 = d2'q, c2 = d2'1, c3 = d1'1.

    Raises:
        SingularPlan: If c1 c3 - c2^2 vanishes
    """
    q = np.asarray(quantile_values, dtype=float).ravel()
    ones = np.ones_like(q)
    d1 = var_model.solve(ones)
    d2 = var_model.solve(q)
    c1, c2, c3 = float(d2 @ q), float(d2 @ ones), float(d1 @ ones)
    det = c1 * c3 - c2 * c2
    if not det > SINGULAR_PLAN_TOLERANCE * abs(c1 * c3):
        raise SingularPlan(f"weight system is singular (c1*c3 - c2^2 = {det:.3g})")

    weights = (c1 * d1 - c2 * d2) / det
    return _project_onto_constraints(weights, q)


def min_variance_weights(var_model: VarianceModel) -> np.ndarray:
    """w** = S^-1 1 / (1' S^-1 1)."""
    d3 = var_model.solve(np.ones(var_model.m * var_model.J))
    return d3 / np.sum(d3)


def solve_tau_bar_2star_and_weights(
    em: ErrorModel,
    m: int,
    J: int,
    d_tau: float,
    nu: float,
    batch_sizes: Optional[Sequence[float]] = None,
) -> Tuple[float, np.ndarray]:
    """tau_bar** solving 1' S^-1 q = 0 with h(1, nu), and the weights w**.

    Args:
        em: Error model
        m: Number of batches
        J: Levels per batch
        d_tau: Level spread
        nu: Bandwidth exponent
        batch_sizes: Batch sizes n_i (equal when omitted)

    Returns:
        Tuple of (tau_bar**, flattened weights)

    Raises:
        NoRoot: If the objective does not change sign on the feasible interval
    """
    sizes = np.ones(m) if batch_sizes is None else np.asarray(batch_sizes, dtype=float)
    unit_h = unit_exponent_bandwidths(sizes, J, nu)

    def objective(tau_bar: float) -> float:
        grid = QuantileGrid(m=m, J=J, d_tau=d_tau, tau_bar=tau_bar,
                            levels=grid_levels(m, J, d_tau, tau_bar))
        model = build_variance_model(em, grid, unit_h, sizes)
        q = quantile_inverse(em, grid.flat_levels)
        return float(np.sum(model.solve(q)))

    tau_bar = _bisect_root(objective, m, J, d_tau, "tau_bar**")
    grid = build_quantile_grid(m, J, d_tau, tau_bar)
    weights = min_variance_weights(build_variance_model(em, grid, unit_h, sizes))
    logger.info("Solved tau_bar** = %.6f (m=%d, J=%d, nu=%.4f)", tau_bar, m, J, nu)
    return tau_bar, weights


def asymptotic_variance(a_x: float, var_model: VarianceModel, weights: np.ndarray) -> float:
    """a(x) * w' S w."""
    return float(a_x) * var_model.quadratic_form(weights)


def bandwidth_parameters(n: int, m: int) -> float:
    """Optimal bandwidth exponent nu* = ln n / (5 (ln n - ln m))."""
    if not n > m >= 1:
        raise ValueError(f"need n > m >= 1, got n={n}, m={m}")
    return float(np.log(n) / (5.0 * (np.log(n) - np.log(m))))


def shortcut_variance_factor(
    weights: np.ndarray, var_model_unit_h: VarianceModel, batch_sizes: Sequence[float]
) -> float:
    """V(w, tau) = sum_i (n / n_i) w_i' R1_i w_i."""
    sizes = np.asarray(batch_sizes, dtype=float)
    w = np.asarray(weights, dtype=float).reshape(var_model_unit_h.m, var_model_unit_h.J)
    total = float(np.sum(sizes))
    return float(sum((total / size) * (row @ block @ row)
                     for size, row, block in zip(sizes, w, var_model_unit_h.R_blocks)))


def shortcut_bandwidth(
    h_oll: float, weights: np.ndarray, var_model_unit_h: VarianceModel, batch_sizes: Sequence[float]
) -> float:
    """Short-cut bandwidth V^(1/5) * h_oll."""
    if h_oll <= 0:
        raise ValueError(f"h_oll must be positive, got {h_oll}")
    factor = shortcut_variance_factor(weights, var_model_unit_h, batch_sizes)
    if factor <= 0:
        raise ValueError(f"variance factor must be positive, got {factor}")
    return float(factor ** 0.2 * h_oll)


def compute_are(
    weights: np.ndarray, var_model_unit_h: VarianceModel, batch_sizes: Sequence[float]
) -> float:
    """Asymptotic relative efficiency versus the full-data local linear fit: V^(-4/5)."""
    factor = shortcut_variance_factor(weights, var_model_unit_h, batch_sizes)
    if factor <= 0:
        raise ValueError(f"variance factor must be positive, got {factor}")
    return float(factor ** -0.8)


def weight_support(grid_x: np.ndarray, fraction: float = WEIGHT_SUPPORT_FRACTION) -> Tuple[float, float]:
    """Central ``fraction`` of the evaluation interval."""
    lo, hi = float(grid_x[0]), float(grid_x[-1])
    trim = 0.5 * (1.0 - fraction) * (hi - lo)
    return lo + trim, hi - trim


@dataclass(frozen=True, eq=False)
class BandwidthSelection:
    """Outcome of the plug-in bandwidth selector."""

    bandwidths: np.ndarray
    alpha: float
    mode: str
    pointwise_bandwidths: Optional[np.ndarray] = None
    pointwise_alpha: Optional[np.ndarray] = None
    flat_points: int = 0


def optimal_alpha_and_h(
    pilot: PilotCurves,
    beta_hats: np.ndarray,
    weights: np.ndarray,
    var_model_unit_h: VarianceModel,
    grid_x: np.ndarray,
    nu: float,
    mode: str = "constant",
    support: Optional[Tuple[float, float]] = None,
) -> BandwidthSelection:
    """Plug-in bandwidths h_ij = alpha * n_i^(-nu).

    A1(x) = (sum_ij w_ij n_i^(-2 nu) beta_ij(x))^2 and
    A2(x) = a(x) sum_i n_i^(nu - 1) w_i' R1_i w_i give
    alpha = (A2 / (4 A1))^(1/5). Constant mode integrates A1 and A2 against
    a uniform weight on ``support`` (trapezoid over the grid); pointwise mode
    evaluates alpha at every grid point and falls back to the constant value
    where A1 vanishes.

    Args:
        pilot: Pilot curves supplying a(x)
        beta_hats: Curvature terms, shape (m, J, G) over ``grid_x``
        weights: Composite weights, shape (m, J) or flattened
        var_model_unit_h: R blocks with unit bandwidths
        grid_x: Evaluation grid, shape (G,)
        nu: Bandwidth exponent
        mode: "constant" or "pointwise"
        support: Interval carrying the weight function (central 90% by default)

    Returns:
        BandwidthSelection

    Raises:
        FlatCurvature: If the integrated curvature term vanishes
    """
    if mode not in ("constant", "pointwise"):
        raise ValueError(f"mode must be 'constant' or 'pointwise', got {mode}")
    m, J = var_model_unit_h.m, var_model_unit_h.J
    sizes = var_model_unit_h.batch_sizes
    w = np.asarray(weights, dtype=float).reshape(m, J)
    grid_x = np.asarray(grid_x, dtype=float)
    betas = np.asarray(beta_hats, dtype=float).reshape(m, J, grid_x.size)

    bias_sum = np.einsum("ij,ijg->g", w * (sizes ** (-2.0 * nu))[:, None], betas)
    a1 = bias_sum ** 2
    spread = sum(size ** (nu - 1.0) * (row @ block @ row)
                 for size, row, block in zip(sizes, w, var_model_unit_h.R_blocks))
    a2 = variance_function(pilot, grid_x) * spread

    lo, hi = support if support is not None else weight_support(grid_x)
    inside = (grid_x >= lo) & (grid_x <= hi) & np.isfinite(a2)
    if np.count_nonzero(inside) < 2:
        raise FlatCurvature("weight function support holds fewer than two grid points")
    a1_int = trapezoid(a1[inside], grid_x[inside])
    a2_int = trapezoid(a2[inside], grid_x[inside])
    if not a1_int > FLAT_CURVATURE_TOLERANCE * max(a2_int, 1.0):
        raise FlatCurvature(f"integrated curvature term {a1_int:.3g} is numerically zero")

    alpha = float((a2_int / (4.0 * a1_int)) ** 0.2)
    scale = (sizes ** -nu)[:, None]
    bandwidths = np.repeat(alpha * scale, J, axis=1)
    logger.info("Plug-in bandwidth alpha=%.4g (nu=%.4f)", alpha, nu)

    if mode == "constant":
        return BandwidthSelection(bandwidths=bandwidths, alpha=alpha, mode=mode)

    flat = ~(a1 > FLAT_CURVATURE_TOLERANCE * np.max(a1)) | ~np.isfinite(a2)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha_x = np.where(flat, alpha, (a2 / (4.0 * a1)) ** 0.2)
    if np.any(flat):
        logger.warning("%d grid points with flat curvature use the constant alpha", int(np.sum(flat)))
    pointwise = alpha_x[None, None, :] * scale[:, :, None] * np.ones((1, J, 1))
    return BandwidthSelection(
        bandwidths=bandwidths,
        alpha=alpha,
        mode=mode,
        pointwise_bandwidths=pointwise,
        pointwise_alpha=alpha_x,
        flat_points=int(np.sum(flat)),
    )


@dataclass(frozen=True, eq=False)
class CompositePlan:
    """Matched levels, weights and bandwidths for all m*J local fits."""

    grid: QuantileGrid
    weights: np.ndarray
    bandwidths: np.ndarray
    kernel: KernelSpec
    quantile_values: np.ndarray
    nu: float
    batch_sizes: np.ndarray
    tau_bar_mode: str = "star"
    bandwidth_mode: str = "shortcut"
    h_oll: Optional[float] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        shape = (self.grid.m, self.grid.J)
        for name in ("weights", "bandwidths", "quantile_values"):
            value = np.asarray(getattr(self, name), dtype=float).reshape(shape)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "batch_sizes", np.asarray(self.batch_sizes, dtype=float))
        if np.any(self.bandwidths <= 0):
            raise ValueError("All bandwidths must be positive")
        if self.batch_sizes.shape != (self.grid.m,):
            raise ValueError("batch_sizes must have one entry per batch")

    @property
    def m(self) -> int:
        return self.grid.m

    @property
    def J(self) -> int:
        return self.grid.J

    def cell_records(self) -> List[Dict[str, float]]:
        """Audit records (i, j, tau, weight, bandwidth, quantile_value), 1-based."""
        records = []
        for i in range(self.m):
            for j in range(self.J):
                records.append({
                    "i": i + 1,
                    "j": j + 1,
                    "tau": float(self.grid.levels[i, j]),
                    "weight": float(self.weights[i, j]),
                    "bandwidth": float(self.bandwidths[i, j]),
                    "quantile_value": float(self.quantile_values[i, j]),
                })
        return records


def constraint_residuals(plan: CompositePlan) -> Tuple[float, float]:
    """(|sum w - 1|, |sum w q|) of a plan."""
    return (
        abs(float(np.sum(plan.weights)) - 1.0),
        abs(float(np.sum(plan.weights * plan.quantile_values))),
    )
