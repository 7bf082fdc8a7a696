"""Local polynomial check-loss and least-squares fits on a single batch."""

import itertools
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numpy as np
from scipy.special import ndtr

from .constants import (
    CERTIFICATE_TOLERANCE,
    COORDINATE_MAX_SWEEPS,
    DELTA_TAU,
    MAX_WIDENINGS,
    MIN_EFFECTIVE_N,
    NEWTON_MAX_ITER,
    POLISH_EXTRA_POINTS,
    RESIDUAL_ZERO_TOLERANCE,
    SMOOTHING_DECAY,
    SMOOTHING_IQR_DIVISOR,
    SMOOTHING_STAGES,
    WIDENING_FACTOR,
)
from .errors import Degenerate, InsufficientLocalData
from .kernels import KernelSpec, eval_kernel, kernel_window_sums

logger = logging.getLogger(__name__)

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class ObservationBatch:
    """One logical machine's sample of (x, y) pairs."""

    xs: np.ndarray
    ys: np.ndarray
    batch_id: int = 0

    def __post_init__(self):
        xs = np.array(self.xs, dtype=float).ravel()
        ys = np.array(self.ys, dtype=float).ravel()
        if xs.size == 0:
            raise ValueError(f"Batch {self.batch_id} is empty")
        if xs.size != ys.size:
            raise ValueError(
                f"Batch {self.batch_id}: xs has {xs.size} values but ys has {ys.size}"
            )
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise ValueError(f"Batch {self.batch_id} contains non-finite values")
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self) -> int:
        return int(self.xs.size)

    @cached_property
    def sorted_view(self) -> Tuple[np.ndarray, np.ndarray]:
        """Covariates sorted ascending with responses carried along."""
        order = np.argsort(self.xs, kind="mergesort")
        return self.xs[order], self.ys[order]


@dataclass(frozen=True)
class LocalFit:
    """Result of one local linear quantile fit."""

    a_hat: float
    b_hat: float
    effective_n: int
    converged: bool
    bandwidth: float
    widenings: int = 0


@dataclass(frozen=True)
class CheckLossSolution:
    coef: np.ndarray
    objective: float
    certified: bool


def check_loss_objective(
    x_centered: np.ndarray, y: np.ndarray, w: np.ndarray, tau: float, coef: np.ndarray
) -> float:
    """Weighted check loss sum_j w_j * rho_tau(y_j - poly(x_j))."""
    design = np.vander(np.asarray(x_centered, dtype=float), len(coef), increasing=True)
    resid = np.asarray(y, dtype=float) - design @ np.asarray(coef, dtype=float)
    return float(np.sum(np.asarray(w, dtype=float) * resid * (tau - (resid < 0))))


def _directional_derivatives(
    design: np.ndarray, y: np.ndarray, w: np.ndarray, tau: float, beta: np.ndarray
) -> np.ndarray:
    """One-sided derivatives along +e_k and -e_k, shape (2, p)."""
    resid = y - design @ beta
    zero_tol = RESIDUAL_ZERO_TOLERANCE * (1.0 + np.max(np.abs(y)))
    pos = resid > zero_tol
    neg = resid < -zero_tol
    kink = ~(pos | neg)

    derivs = np.empty((2, design.shape[1]))
    for row, sign in enumerate((1.0, -1.0)):
        c = sign * design
        contrib = np.where(pos[:, None], -tau * c, 0.0)
        contrib = np.where(neg[:, None], (1.0 - tau) * c, contrib)
        contrib = np.where(kink[:, None], np.maximum((1.0 - tau) * c, -tau * c), contrib)
        derivs[row] = w @ contrib
    return derivs


def subgradient_certificate(
    x_centered: np.ndarray, y: np.ndarray, w: np.ndarray, tau: float, coef: np.ndarray
) -> bool:
    """Check that no coordinate direction decreases the weighted check loss.

    Every one-sided directional derivative along +/- each coefficient axis
    must be at least -CERTIFICATE_TOLERANCE * sum(w).
    """
    w = np.asarray(w, dtype=float)
    design = np.vander(np.asarray(x_centered, dtype=float), len(coef), increasing=True)
    derivs = _directional_derivatives(design, np.asarray(y, dtype=float), w, tau,
                                      np.asarray(coef, dtype=float))
    return bool(np.all(derivs >= -CERTIFICATE_TOLERANCE * np.sum(w)))


def _objective(design, y, w, tau, beta):
    resid = y - design @ beta
    return float(np.sum(w * resid * (tau - (resid < 0))))


def _smoothed(design, y, w, tau, beta, kappa):
    """Gaussian-convolution smoothed check loss with gradient and Hessian."""
    resid = y - design @ beta
    z = resid / kappa
    value = np.sum(w * (resid * (tau - ndtr(-z)) + kappa * np.exp(-0.5 * z * z) / _SQRT_2PI))
    score = w * (tau - ndtr(-z))
    curvature = w * np.exp(-0.5 * z * z) / (_SQRT_2PI * kappa)
    grad = -design.T @ score
    hess = (design * curvature[:, None]).T @ design
    return float(value), grad, hess


def _newton_stage(design, y, w, tau, beta, kappa):
    value, grad, hess = _smoothed(design, y, w, tau, beta, kappa)
    p = design.shape[1]
    for _ in range(NEWTON_MAX_ITER):
        ridge = 1e-10 * np.trace(hess) + 1e-12 * np.sum(w)
        try:
            step = -np.linalg.solve(hess + ridge * np.eye(p), grad)
        except np.linalg.LinAlgError:
            step = -grad
        slope = float(grad @ step)
        if slope >= 0:
            step = -grad
            slope = float(grad @ step)
        if abs(slope) <= 1e-14 * (1.0 + abs(value)):
            break

        # Armijo backtracking
        t = 1.0
        accepted = False
        for _ in range(40):
            trial = beta + t * step
            trial_value, trial_grad, trial_hess = _smoothed(design, y, w, tau, trial, kappa)
            if trial_value <= value + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break

        improvement = value - trial_value
        beta, value, grad, hess = trial, trial_value, trial_grad, trial_hess
        if improvement <= 1e-15 * (1.0 + abs(value)):
            break
    return beta


def _vertex_polish(design, y, w, tau, beta):
    """Best exact-interpolation vertex among points with the smallest residuals."""
    p = design.shape[1]
    resid = np.abs(y - design @ beta)
    pool = np.argsort(resid, kind="mergesort")[:min(y.size, p + POLISH_EXTRA_POINTS)]
    combos = np.array(list(itertools.combinations(pool, p)))
    if combos.size == 0:
        return None

    systems = design[combos]
    dets = np.linalg.det(systems)
    usable = np.abs(dets) > 1e-12
    if not np.any(usable):
        return None

    solutions = np.linalg.solve(systems[usable], y[combos[usable]][..., None])[..., 0]
    resid_all = y[None, :] - solutions @ design.T
    objectives = np.sum(w[None, :] * resid_all * (tau - (resid_all < 0)), axis=1)
    best = int(np.argmin(objectives))
    return solutions[best]


def _coordinate_descent(design, y, w, tau, beta, objective):
    """Exact line minimization along each coefficient axis until none improves."""
    p = design.shape[1]
    for _ in range(COORDINATE_MAX_SWEEPS):
        improved = False
        for col in range(p):
            c = design[:, col]
            active = c != 0
            if not np.any(active):
                continue
            resid = y - design @ beta
            z = resid[active] / c[active]
            a = np.abs(c[active]) * w[active]
            levels = np.where(c[active] > 0, tau, 1.0 - tau)
            target = np.sum(levels * a)

            order = np.argsort(z, kind="mergesort")
            cum = np.cumsum(a[order])
            pick = min(int(np.searchsorted(cum, target, side="left")), order.size - 1)
            shift = z[order[pick]]
            if shift == 0.0:
                continue

            trial = beta.copy()
            trial[col] += shift
            trial_objective = _objective(design, y, w, tau, trial)
            if trial_objective < objective:
                beta, objective = trial, trial_objective
                improved = True
        if not improved:
            break
    return beta, objective


def _validate_design(x, w, degree, tau):
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if degree not in (1, 2):
        raise ValueError(f"degree must be 1 or 2, got {degree}")
    positive = w > 0
    n_pos = int(np.count_nonzero(positive))
    if n_pos < degree + 2:
        raise InsufficientLocalData(
            f"{n_pos} positively weighted points, need at least {degree + 2}"
        )
    n_distinct = np.unique(x[positive]).size
    if n_distinct < degree + 1:
        raise Degenerate(
            f"{n_distinct} distinct covariate values, degree {degree} needs {degree + 1}"
        )
    return positive


def fit_check_loss(
    x_centered: np.ndarray, y: np.ndarray, w: np.ndarray, tau: float, degree: int = 1
) -> CheckLossSolution:
    """Minimize the weighted check loss of a local polynomial.

    Pipeline: weighted least squares start, smoothed-loss continuation by
    damped Newton, exact vertex polish, exact coordinate descent. The best
    exact objective among the candidates is kept, so the result is never
    worse than the least-squares point.

    Args:
        x_centered: Covariates centered at the fitting point
        y: Responses
        w: Nonnegative weights
        tau: Quantile level in (0, 1)
        degree: 1 (local linear) or 2 (local quadratic)

    Returns:
        CheckLossSolution with coefficients in the original covariate scale

    Raises:
        InsufficientLocalData: Fewer than degree + 2 positively weighted points
        Degenerate: Too few distinct covariate values
    """
    x = np.asarray(x_centered, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    positive = _validate_design(x, w, degree, tau)
    x, y, w = x[positive], y[positive], w[positive]

    scale = float(np.max(np.abs(x)))
    design = np.vander(x / scale, degree + 1, increasing=True)
    unscale = scale ** -np.arange(degree + 1, dtype=float)

    root_w = np.sqrt(w)
    beta_ls = np.linalg.lstsq(design * root_w[:, None], y * root_w, rcond=None)[0]
    best_beta = beta_ls
    best_objective = _objective(design, y, w, tau, beta_ls)

    exact_tol = 1e-14 * (1.0 + np.max(np.abs(y))) * np.sum(w)
    if best_objective > exact_tol:
        q75, q25 = np.percentile(y, [75, 25])
        kappa = (q75 - q25) / SMOOTHING_IQR_DIVISOR
        if kappa <= 0:
            kappa = np.std(y) / SMOOTHING_IQR_DIVISOR or 1e-8 * (1.0 + np.max(np.abs(y)))

        beta = beta_ls
        for _ in range(SMOOTHING_STAGES):
            beta = _newton_stage(design, y, w, tau, beta, kappa)
            kappa *= SMOOTHING_DECAY

        candidates = [beta]
        polished = _vertex_polish(design, y, w, tau, beta)
        if polished is not None:
            candidates.append(polished)
        for candidate in candidates:
            value = _objective(design, y, w, tau, candidate)
            if value < best_objective:
                best_beta, best_objective = candidate, value

        best_beta, best_objective = _coordinate_descent(
            design, y, w, tau, np.array(best_beta, dtype=float), best_objective
        )

    derivs = _directional_derivatives(design, y, w, tau, best_beta)
    certified = bool(np.all(derivs >= -CERTIFICATE_TOLERANCE * np.sum(w)))
    if not certified:
        logger.warning(
            "Check-loss solution failed the subgradient certificate (tau=%.4f, n=%d)",
            tau, y.size,
        )
    return CheckLossSolution(coef=best_beta * unscale, objective=best_objective, certified=certified)


def solve_weighted_check_loss(
    x_centered: np.ndarray, y: np.ndarray, w: np.ndarray, tau: float, degree: int = 1
) -> np.ndarray:
    """Coefficients (a, b) or (a, b1, b2) minimizing the weighted check loss."""
    return fit_check_loss(x_centered, y, w, tau, degree).coef


def _local_window(
    batch: ObservationBatch, x0: float, h: float, k: KernelSpec, min_points: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float, int]:
    """Kernel window around x0, widening h until enough points carry weight."""
    if h <= 0:
        raise ValueError(f"Bandwidth must be positive, got {h}")
    xs, ys = batch.sorted_view
    bandwidth = h
    for widenings in range(MAX_WIDENINGS + 1):
        lo = np.searchsorted(xs, x0 - k.support_radius * bandwidth, side="left")
        hi = np.searchsorted(xs, x0 + k.support_radius * bandwidth, side="right")
        dist = xs[lo:hi] - x0
        weights = eval_kernel(k, dist / bandwidth) / bandwidth
        keep = weights > 0
        if np.count_nonzero(keep) >= min_points:
            if widenings:
                logger.debug("Widened bandwidth %d times at x=%.4g (batch %s)",
                             widenings, x0, batch.batch_id)
            return dist[keep], ys[lo:hi][keep], weights[keep], bandwidth, widenings
        bandwidth *= WIDENING_FACTOR

    raise InsufficientLocalData(
        f"fewer than {min_points} points in the kernel window after {MAX_WIDENINGS} widenings",
        batch=batch.batch_id, x=x0,
    )


def local_linear_quantile(
    batch: ObservationBatch, x0: float, tau: float, h: float, k: KernelSpec
) -> LocalFit:
    """Local linear quantile fit at x0 with kernel weights K((x - x0)/h)/h."""
    if not DELTA_TAU < tau < 1.0 - DELTA_TAU:
        raise ValueError(f"tau={tau} outside ({DELTA_TAU}, {1 - DELTA_TAU})")

    dist, ys, weights, bandwidth, widenings = _local_window(batch, x0, h, k, MIN_EFFECTIVE_N)
    try:
        solution = fit_check_loss(dist, ys, weights, tau, degree=1)
    except (InsufficientLocalData, Degenerate) as err:
        raise err.at(batch=batch.batch_id, x=x0)

    return LocalFit(
        a_hat=float(solution.coef[0]),
        b_hat=float(solution.coef[1]),
        effective_n=int(weights.size),
        converged=solution.certified,
        bandwidth=bandwidth,
        widenings=widenings,
    )


def local_cubic_cqr_beta(
    batch: ObservationBatch, x0: float, tau: float, h_p: float, k: KernelSpec
) -> float:
    """Curvature term beta(x0, tau) = mu2 * b2 from a local quadratic quantile fit."""
    dist, ys, weights, _, _ = _local_window(batch, x0, h_p, k, MIN_EFFECTIVE_N)
    try:
        coef = solve_weighted_check_loss(dist, ys, weights, tau, degree=2)
    except (InsufficientLocalData, Degenerate) as err:
        raise err.at(batch=batch.batch_id, x=x0)
    return float(k.mu2 * coef[2])


def _ls_intercept(s0, s1, s2, t0, t1):
    det = s0 * s2 - s1 * s1
    with np.errstate(divide="ignore", invalid="ignore"):
        intercept = (s2 * t0 - s1 * t1) / det
    ok = det > 1e-12 * s0 * s2
    return np.where(ok, intercept, np.nan)


def local_linear_ls(batch: ObservationBatch, x0: float, h: float, k: KernelSpec) -> float:
    """Weighted least-squares local linear intercept at x0."""
    dist, ys, weights, _, _ = _local_window(batch, x0, h, k, 2)
    s0, s1, s2 = np.sum(weights), np.sum(weights * dist), np.sum(weights * dist * dist)
    t0, t1 = np.sum(weights * ys), np.sum(weights * dist * ys)
    value = float(_ls_intercept(s0, s1, s2, t0, t1))
    if not np.isfinite(value):
        raise Degenerate("weighted design has a single distinct covariate value",
                         batch=batch.batch_id, x=x0)
    return value


def local_linear_ls_curve(
    batch: ObservationBatch, grid_x: np.ndarray, h: float, k: KernelSpec, strict: bool = True
) -> np.ndarray:
    """Local linear least-squares intercepts over a grid.

    Points where the window is too sparse fall back to the widening scalar
    fit; with ``strict=False`` they are left as NaN instead.
    """
    xs, ys = batch.sorted_view
    grid_x = np.asarray(grid_x, dtype=float)
    sums = kernel_window_sums(xs, np.vstack([np.ones_like(ys), ys]), grid_x, h, k, powers=(0, 1, 2))
    curve = _ls_intercept(sums[0, 0], sums[1, 0], sums[2, 0], sums[0, 1], sums[1, 1])

    missing = np.flatnonzero(~np.isfinite(curve))
    if missing.size and strict:
        for g in missing:
            curve[g] = local_linear_ls(batch, float(grid_x[g]), h, k)
    return curve
