"""End-to-end composite estimation and the two competitor estimators."""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .composite_plan import (
    BandwidthSelection,
    CompositePlan,
    QuantileGrid,
    build_quantile_grid,
    build_variance_model,
    bandwidth_parameters,
    compute_are,
    optimal_alpha_and_h,
    optimal_weights,
    shortcut_bandwidth,
    shortcut_variance_factor,
    solve_tau_bar_2star_and_weights,
    solve_tau_bar_star,
    unit_exponent_bandwidths,
    weight_support,
)
from .constants import (
    BETA_SUBGRID_SIZE,
    CURVATURE_BANDWIDTH_FACTOR,
    CV_CANDIDATES,
    CV_FOLDS,
    CV_SPAN,
    DEFAULT_D_TAU,
    DEFAULT_J,
    DEFAULT_KERNEL,
    PILOT_GRID_SIZE,
    PLUGIN_CLIP,
)
from .errors import ConfigError, DCQRError, Degenerate
from .kernels import KernelSpec, get_kernel
from .local_quantile import (
    ObservationBatch,
    local_cubic_cqr_beta,
    local_linear_ls_curve,
    local_linear_quantile,
)
from .pilot import (
    ErrorModel,
    PilotCurves,
    estimate_error_model,
    fit_pilot,
    quantile_inverse,
    rule_of_thumb_bandwidth,
)

logger = logging.getLogger(__name__)

TAU_BAR_MODES = ("star", "double_star")
BANDWIDTH_MODES = ("shortcut", "pilot")
ORACLE_BANDWIDTH_MODES = ("cv", "plugin")


@dataclass(frozen=True)
class CompositeConfig:
    """Settings of the composite estimator."""

    J: int = DEFAULT_J
    d_tau: float = DEFAULT_D_TAU
    kernel: str = DEFAULT_KERNEL
    tau_bar_mode: str = "star"
    bandwidth_mode: str = "shortcut"
    oracle_bandwidth: str = "cv"
    h_oll: Optional[float] = None
    restandardize_residuals: bool = False
    pilot_grid_size: int = PILOT_GRID_SIZE
    threads: int = 1

    def __post_init__(self):
        if self.J < 1:
            raise ConfigError(f"J must be at least 1, got {self.J}")
        if not 0.0 < self.d_tau < 1.0:
            raise ConfigError(f"d_tau must lie in (0, 1), got {self.d_tau}")
        if self.tau_bar_mode not in TAU_BAR_MODES:
            raise ConfigError(f"tau_bar_mode must be one of {TAU_BAR_MODES}")
        if self.bandwidth_mode not in BANDWIDTH_MODES:
            raise ConfigError(f"bandwidth_mode must be one of {BANDWIDTH_MODES}")
        if self.oracle_bandwidth not in ORACLE_BANDWIDTH_MODES:
            raise ConfigError(f"oracle_bandwidth must be one of {ORACLE_BANDWIDTH_MODES}")
        if self.h_oll is not None and self.h_oll <= 0:
            raise ConfigError(f"h_oll must be positive, got {self.h_oll}")
        if self.pilot_grid_size < 2:
            raise ConfigError("pilot_grid_size must be at least 2")
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")
        get_kernel(self.kernel)


@dataclass(frozen=True, eq=False)
class PlanningContext:
    """Intermediate products of planning, kept for diagnostics and reuse."""

    pilot: PilotCurves
    error_model: ErrorModel
    h_oll: Optional[float]
    variance_factor: float
    are: float
    selection: Optional[BandwidthSelection] = None


@dataclass(frozen=True, eq=False)
class CompositeFit:
    """Local estimators and their aggregate on an evaluation grid."""

    plan: CompositePlan
    grid_x: np.ndarray
    local_values: np.ndarray
    global_values: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    context: Optional[PlanningContext] = None


def merge_batches(batches: Sequence[ObservationBatch]) -> ObservationBatch:
    """Concatenate batches in order into a single full-data batch."""
    return ObservationBatch(
        xs=np.concatenate([b.xs for b in batches]),
        ys=np.concatenate([b.ys for b in batches]),
        batch_id=0,
    )


def _resolve_kernel(kernel) -> KernelSpec:
    return kernel if isinstance(kernel, KernelSpec) else get_kernel(kernel)


def plugin_oll_bandwidth(merged: ObservationBatch, grid_x: np.ndarray, k: KernelSpec) -> float:
    """Rule-of-thumb bandwidth for the full-data local linear fit.

    Uses a global quartic fit for m'' and the residual variance:
    h = (R(K) sigma^2 |W| / (mu2^2 theta22 n))^(1/5), clipped relative to
    the normal-reference bandwidth.
    """
    x, y, n = merged.xs, merged.ys, merged.n
    reference = rule_of_thumb_bandwidth(x)
    if reference <= 0:
        raise Degenerate("covariates have zero spread")
    if n <= 5:
        return reference

    coefs = np.polyfit(x, y, 4)
    sigma2 = float(np.sum((y - np.polyval(coefs, x)) ** 2) / (n - 5))
    lo, hi = weight_support(np.asarray(grid_x, dtype=float))
    inside = (x >= lo) & (x <= hi)
    theta22 = float(np.mean(np.polyval(np.polyder(coefs, 2), x) ** 2 * inside))

    if not (sigma2 > 0 and theta22 > 0 and np.isfinite(sigma2) and np.isfinite(theta22)):
        return reference
    h = (k.rk * sigma2 * (hi - lo) / (k.mu2 ** 2 * theta22 * n)) ** 0.2
    return float(np.clip(h, PLUGIN_CLIP[0] * reference, PLUGIN_CLIP[1] * reference))


def cross_validate_oll_bandwidth(
    merged: ObservationBatch,
    grid_x: np.ndarray,
    k: KernelSpec,
    rng: np.random.Generator,
    center: Optional[float] = None,
) -> float:
    """5-fold random cross-validation over log-spaced candidates around the plug-in rule.

    Only held-out points inside the evaluation interval are scored.
    """
    center = center if center is not None else plugin_oll_bandwidth(merged, grid_x, k)
    candidates = np.geomspace(center / CV_SPAN, center * CV_SPAN, CV_CANDIDATES)
    folds = np.array_split(rng.permutation(merged.n), CV_FOLDS)
    lo, hi = float(np.min(grid_x)), float(np.max(grid_x))

    sq_errors = [[] for _ in candidates]
    for fold in folds:
        train = np.ones(merged.n, dtype=bool)
        train[fold] = False
        if np.count_nonzero(train) < 2:
            continue
        train_batch = ObservationBatch(merged.xs[train], merged.ys[train])
        x_test, y_test = merged.xs[fold], merged.ys[fold]
        keep = (x_test >= lo) & (x_test <= hi)
        if not np.any(keep):
            continue
        for slot, h in enumerate(candidates):
            pred = local_linear_ls_curve(train_batch, x_test[keep], h, k, strict=False)
            sq_errors[slot].append((pred - y_test[keep]) ** 2)

    scores = np.array([np.nanmean(np.concatenate(errs)) if errs else np.inf for errs in sq_errors])
    if not np.any(np.isfinite(scores)):
        logger.warning("Cross-validation produced no finite scores; using the plug-in bandwidth")
        return float(center)
    best = int(np.nanargmin(np.where(np.isfinite(scores), scores, np.nan)))
    logger.debug("CV bandwidth %.4g (candidate %d of %d)", candidates[best], best + 1, candidates.size)
    return float(candidates[best])


def select_oll_bandwidth(
    merged: ObservationBatch,
    grid_x: np.ndarray,
    k: KernelSpec,
    mode: str = "cv",
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Bandwidth of the full-data local linear estimator ("cv" or "plugin")."""
    if mode == "plugin":
        return plugin_oll_bandwidth(merged, grid_x, k)
    if mode == "cv":
        return cross_validate_oll_bandwidth(merged, grid_x, k, rng if rng is not None else np.random.default_rng(0))
    raise ConfigError(f"Unknown oracle bandwidth mode '{mode}'")


def fit_oracle_ll(
    all_batches_merged,
    grid_x: np.ndarray,
    kernel,
    bandwidth_mode: str = "cv",
    rng: Optional[np.random.Generator] = None,
    h: Optional[float] = None,
) -> Tuple[np.ndarray, float]:
    """Full-data local linear least-squares curve and its bandwidth.

    Args:
        all_batches_merged: Merged batch, or a list of batches to merge
        grid_x: Evaluation grid
        kernel: KernelSpec or kernel name
        bandwidth_mode: "cv" or "plugin"
        rng: Generator used to form the CV folds
        h: Fixed bandwidth overriding the selector

    Returns:
        Tuple of (curve on grid_x, h_oll)
    """
    k = _resolve_kernel(kernel)
    merged = all_batches_merged
    if not isinstance(merged, ObservationBatch):
        merged = merge_batches(list(merged))
    h_oll = h if h is not None else select_oll_bandwidth(merged, grid_x, k, bandwidth_mode, rng)
    return local_linear_ls_curve(merged, grid_x, h_oll, k), h_oll


def alad_bandwidth(em: ErrorModel, h_oll: float, batch_sizes: Sequence[float]) -> float:
    """Short-cut bandwidth for the averaged median fits (uniform weights, tau = 0.5)."""
    sizes = np.asarray(batch_sizes, dtype=float)
    m = sizes.size
    grid = QuantileGrid(m=m, J=1, d_tau=0.0, tau_bar=0.5, levels=np.full((m, 1), 0.5))
    model = build_variance_model(em, grid, np.ones((m, 1)), sizes)
    return shortcut_bandwidth(h_oll, np.full(m, 1.0 / m), model, sizes)


def fit_alad(
    batches: Sequence[ObservationBatch], grid_x: np.ndarray, h: float, kernel
) -> np.ndarray:
    """Uniform average of the per-batch local median fits."""
    k = _resolve_kernel(kernel)
    if h <= 0:
        raise ValueError(f"Bandwidth must be positive, got {h}")
    grid_x = np.asarray(grid_x, dtype=float)
    total = np.zeros(grid_x.size)
    for batch in batches:
        total = total + np.array([local_linear_quantile(batch, x0, 0.5, h, k).a_hat for x0 in grid_x])
    return total / len(batches)


def _curvature_terms(
    batches: Sequence[ObservationBatch],
    grid: QuantileGrid,
    grid_x: np.ndarray,
    pilot: PilotCurves,
    k: KernelSpec,
) -> np.ndarray:
    """beta(x, tau_ij) per batch on a coarse subgrid, interpolated to grid_x."""
    subgrid = np.linspace(grid_x[0], grid_x[-1], min(BETA_SUBGRID_SIZE, grid_x.size))
    h_p = CURVATURE_BANDWIDTH_FACTOR * pilot.h_pilot
    betas = np.empty((grid.m, grid.J, grid_x.size))
    for i, batch in enumerate(batches):
        for j in range(grid.J):
            tau = float(grid.levels[i, j])
            try:
                coarse = [local_cubic_cqr_beta(batch, x0, tau, h_p, k) for x0 in subgrid]
            except DCQRError as err:
                raise err.at(batch=i, level=j)
            betas[i, j] = np.interp(grid_x, subgrid, coarse)
    return betas


def plan_composite(
    batches: Sequence[ObservationBatch],
    config: CompositeConfig,
    grid_x: np.ndarray,
    h_oll: Optional[float] = None,
    pilot: Optional[PilotCurves] = None,
    error_model: Optional[ErrorModel] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[CompositePlan, PlanningContext]:
    """Planning steps: pilot, tau-bar solve, weights, bandwidths.

    Args:
        batches: Data batches
        config: Composite settings
        grid_x: Evaluation grid
        h_oll: Full-data local linear bandwidth for the short-cut rule
        pilot: Precomputed pilot curves
        error_model: Precomputed error model
        rng: Generator for the oracle bandwidth cross-validation

    Returns:
        Tuple of (CompositePlan, PlanningContext)
    """
    if not batches:
        raise ValueError("At least one batch is required")
    k = get_kernel(config.kernel)
    grid_x = np.asarray(grid_x, dtype=float)
    m, J, d_tau = len(batches), config.J, config.d_tau
    sizes = np.array([b.n for b in batches], dtype=float)
    n = int(np.sum(sizes))

    # Step 1: pilot curves and error model
    pilot = pilot if pilot is not None else fit_pilot(batches, k, config.pilot_grid_size)
    em = error_model if error_model is not None else estimate_error_model(
        batches, pilot, restandardize=config.restandardize_residuals)
    nu = bandwidth_parameters(n, m)

    # Steps 2-3: matched levels and weights
    if config.tau_bar_mode == "star":
        tau_bar = solve_tau_bar_star(em, m, J, d_tau)
        grid = build_quantile_grid(m, J, d_tau, tau_bar)
        quantiles = quantile_inverse(em, grid.flat_levels)
        model = build_variance_model(em, grid, unit_exponent_bandwidths(sizes, J, nu), sizes)
        weights = optimal_weights(model, quantiles)
    else:
        tau_bar, weights = solve_tau_bar_2star_and_weights(em, m, J, d_tau, nu, sizes)
        grid = build_quantile_grid(m, J, d_tau, tau_bar)
        quantiles = quantile_inverse(em, grid.flat_levels)

    # Step 4: bandwidths
    unit_model = build_variance_model(em, grid, np.ones((m, J)), sizes)
    factor = shortcut_variance_factor(weights, unit_model, sizes)
    selection = None
    alpha = None
    if config.bandwidth_mode == "shortcut":
        if h_oll is None:
            h_oll = config.h_oll
        if h_oll is None:
            h_oll = select_oll_bandwidth(merge_batches(batches), grid_x, k, config.oracle_bandwidth, rng)
        bandwidths = np.full((m, J), shortcut_bandwidth(h_oll, weights, unit_model, sizes))
    else:
        betas = _curvature_terms(batches, grid, grid_x, pilot, k)
        selection = optimal_alpha_and_h(pilot, betas, weights, unit_model, grid_x, nu, mode="constant")
        bandwidths = selection.bandwidths
        alpha = selection.alpha

    plan = CompositePlan(
        grid=grid,
        weights=np.asarray(weights).reshape(m, J),
        bandwidths=bandwidths,
        kernel=k,
        quantile_values=np.asarray(quantiles).reshape(m, J),
        nu=nu,
        batch_sizes=sizes,
        tau_bar_mode=config.tau_bar_mode,
        bandwidth_mode=config.bandwidth_mode,
        h_oll=h_oll,
        alpha=alpha,
    )
    context = PlanningContext(
        pilot=pilot,
        error_model=em,
        h_oll=h_oll,
        variance_factor=factor,
        are=compute_are(weights, unit_model, sizes),
        selection=selection,
    )
    logger.info("Plan ready: m=%d, J=%d, tau_bar=%.4f, h=%.4g..%.4g, ARE=%.4f",
                m, J, tau_bar, float(np.min(bandwidths)), float(np.max(bandwidths)), context.are)
    return plan, context


def _fit_batch_cells(
    batch: ObservationBatch,
    levels: np.ndarray,
    bandwidths: np.ndarray,
    grid_x: np.ndarray,
    k: KernelSpec,
    row: int,
) -> Tuple[np.ndarray, int, int]:
    """All (level, grid point) fits of one batch; reads nothing but its own batch."""
    values = np.empty((levels.size, grid_x.size))
    widened = 0
    uncertified = 0
    for j, (tau, h) in enumerate(zip(levels, bandwidths)):
        for g, x0 in enumerate(grid_x):
            try:
                fit = local_linear_quantile(batch, float(x0), float(tau), float(h), k)
            except DCQRError as err:
                raise err.at(batch=row, level=j, x=float(x0))
            values[j, g] = fit.a_hat
            widened += fit.widenings > 0
            uncertified += not fit.converged
    return values, widened, uncertified


def fit_local_estimators(
    batches: Sequence[ObservationBatch],
    plan: CompositePlan,
    grid_x: np.ndarray,
    threads: int = 1,
) -> Tuple[np.ndarray, Dict[str, int]]:
    """Every local estimator m_i(x; tau_ij, h_ij), shape (m, J, G).

    Row i depends only on batch i.
    """
    if len(batches) != plan.m:
        raise ValueError(f"Plan expects {plan.m} batches, got {len(batches)}")
    grid_x = np.asarray(grid_x, dtype=float)
    jobs = [(batch, plan.grid.levels[i], plan.bandwidths[i], grid_x, plan.kernel, i)
            for i, batch in enumerate(batches)]

    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_fit_batch_cells, *zip(*jobs)))
    else:
        results = [_fit_batch_cells(*job) for job in jobs]

    local_values = np.stack([values for values, _, _ in results])
    counts = {
        "widened_cells": int(sum(widened for _, widened, _ in results)),
        "uncertified_cells": int(sum(uncertified for _, _, uncertified in results)),
    }
    return local_values, counts


def aggregate_local_values(weights: np.ndarray, local_values: np.ndarray) -> np.ndarray:
    """sum_ij w_ij * local_values[i, j], reduced in (i, j) ascending order."""
    weights = np.asarray(weights, dtype=float)
    m, J = weights.shape
    total = np.zeros(local_values.shape[-1])
    for i in range(m):
        for j in range(J):
            total = total + weights[i, j] * local_values[i, j]
    return total


def fit_composite(
    batches: Sequence[ObservationBatch],
    config: CompositeConfig,
    grid_x: np.ndarray,
    plan: Optional[CompositePlan] = None,
    h_oll: Optional[float] = None,
    pilot: Optional[PilotCurves] = None,
    error_model: Optional[ErrorModel] = None,
    rng: Optional[np.random.Generator] = None,
) -> CompositeFit:
    """Pilot, tau-bar, weights, bandwidths, local fits, aggregation.

    A frozen ``plan`` skips planning entirely; only the local fits and the
    aggregation run.
    """
    if config.J * len(batches) < 2 and plan is None:
        raise ConfigError("the composite needs m*J >= 2 local fits")
    started = time.perf_counter()
    grid_x = np.asarray(grid_x, dtype=float)

    context = None
    if plan is None:
        plan, context = plan_composite(batches, config, grid_x, h_oll=h_oll, pilot=pilot,
                                       error_model=error_model, rng=rng)

    local_values, counts = fit_local_estimators(batches, plan, grid_x, threads=config.threads)
    global_values = aggregate_local_values(plan.weights, local_values)

    diagnostics: Dict[str, Any] = {
        "m": plan.m,
        "J": plan.J,
        "tau_bar": plan.grid.tau_bar,
        "tau_bar_mode": plan.tau_bar_mode,
        "bandwidth_mode": plan.bandwidth_mode,
        "nu": plan.nu,
        "h_oll": plan.h_oll,
        "failed_cells": 0,
        **counts,
    }
    if context is not None:
        diagnostics.update({
            "variance_factor": context.variance_factor,
            "are": context.are,
            "clamped_residuals": context.error_model.clamped,
            "h_pilot": context.pilot.h_pilot,
        })
    diagnostics["seconds"] = round(time.perf_counter() - started, 3)
    if counts["uncertified_cells"]:
        logger.warning("%d local fits failed the optimality certificate", counts["uncertified_cells"])

    return CompositeFit(plan=plan, grid_x=grid_x, local_values=local_values,
                        global_values=global_values, diagnostics=diagnostics, context=context)
