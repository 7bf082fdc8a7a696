"""Tests for the weighted check-loss solver and the local fits built on it."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add current directory to path
sys.path.append(str(Path.cwd()))

from dcqr.errors import Degenerate, InsufficientLocalData
from dcqr.kernels import get_kernel
from dcqr.local_quantile import (
    ObservationBatch,
    check_loss_objective,
    fit_check_loss,
    local_cubic_cqr_beta,
    local_linear_ls,
    local_linear_ls_curve,
    local_linear_quantile,
    solve_weighted_check_loss,
    subgradient_certificate,
)

EPAN = get_kernel("epanechnikov")


def _random_instance(seed, n=20, tau=0.5):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    y = 2.0 + 3.0 * x + rng.standard_t(3, n) * 0.5
    w = rng.uniform(0.1, 1.0, n)
    return x, y, w, tau


def test_exact_interpolation():
    """Three collinear points are fitted with zero loss."""
    coef = solve_weighted_check_loss(np.array([-1.0, 0.0, 1.0]), np.array([-1.0, 0.0, 1.0]), np.ones(3), 0.5)
    np.testing.assert_allclose(coef, [0.0, 1.0], atol=1e-10)


def test_solver_beats_grid_search():
    """The certified solution is at least as good as a fine grid search around it."""
    for seed in range(5):
        x, y, w, tau = _random_instance(seed, tau=0.3 + 0.1 * seed)
        solution = fit_check_loss(x, y, w, tau)
        assert solution.certified, f"seed {seed}: solution not certified"

        a_grid = solution.coef[0] + np.arange(-100, 101) * 1e-3
        b_grid = solution.coef[1] + np.arange(-100, 101) * 1e-3
        resid = y[None, None, :] - a_grid[:, None, None] - b_grid[None, :, None] * x[None, None, :]
        grid_obj = np.sum(w * resid * (tau - (resid < 0)), axis=2)
        assert solution.objective <= grid_obj.min() + 1e-9, f"seed {seed}: grid search found a lower objective"
        assert solution.objective == pytest.approx(check_loss_objective(x, y, w, tau, solution.coef), rel=1e-10)


def test_certificate_on_many_random_instances():
    """1000 random instances: every returned solution passes the subgradient optimality test."""
    rng = np.random.default_rng(11)
    certified = 0
    for trial in range(1000):
        n = int(rng.integers(4, 60))
        x = rng.uniform(-1, 1, n)
        y = rng.normal(size=n) + x * rng.normal()
        w = rng.uniform(0.0, 1.0, n)
        w[:4] = rng.uniform(0.5, 1.0, 4)
        tau = float(rng.uniform(0.05, 0.95))
        degree = 1 if trial % 4 else 2
        if np.count_nonzero(w > 0) < degree + 2:
            continue
        solution = fit_check_loss(x, y, w, tau, degree)
        assert solution.certified, f"trial {trial} failed the certificate"
        assert subgradient_certificate(x, y, w, tau, solution.coef), f"trial {trial}: external check disagrees"
        certified += 1
    assert certified == 1000, f"only {certified} instances were solved"


def test_solver_matches_fine_grid_search_on_fifty_lines():
    """Noisy lines y = 2 + 3x: the grid minimiser at step 1e-3 lies within 2e-3 of the solver."""
    steps = np.arange(-100, 101) * 1e-3
    for seed in range(50):
        x, y, w, _ = _random_instance(1000 + seed)
        tau = float(np.random.default_rng(seed).uniform(0.1, 0.9))
        solution = fit_check_loss(x, y, w, tau)

        a_grid = solution.coef[0] + steps
        b_grid = solution.coef[1] + steps
        resid = y[None, None, :] - a_grid[:, None, None] - b_grid[None, :, None] * x[None, None, :]
        grid_obj = np.sum(w * resid * (tau - (resid < 0)), axis=2)
        ia, ib = np.unravel_index(np.argmin(grid_obj), grid_obj.shape)
        gap = max(abs(a_grid[ia] - solution.coef[0]), abs(b_grid[ib] - solution.coef[1]))
        assert gap <= 2e-3, f"seed {seed}: grid minimiser {gap:.4g} away from the solver"
        assert solution.objective <= grid_obj.min() + 1e-9


def test_quantile_monotone_in_tau():
    """Higher levels give higher intercepts on the same design."""
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, 200)
    y = x + rng.normal(size=200)
    w = 0.75 * (1 - x ** 2)
    low = solve_weighted_check_loss(x, y, w, 0.1)[0]
    high = solve_weighted_check_loss(x, y, w, 0.9)[0]
    assert high >= low, f"a(0.9)={high} should not be below a(0.1)={low}"


def test_shift_and_scale_equivariance():
    """Fitting y + c shifts the intercept by c; fitting c*y scales both coefficients."""
    x, y, w, tau = _random_instance(42, n=40, tau=0.7)
    base = solve_weighted_check_loss(x, y, w, tau)
    shifted = solve_weighted_check_loss(x, y + 5.0, w, tau)
    scaled = solve_weighted_check_loss(x, 3.0 * y, w, tau)
    np.testing.assert_allclose(shifted, base + np.array([5.0, 0.0]), atol=1e-8)
    np.testing.assert_allclose(scaled, 3.0 * base, atol=1e-8)


def test_objective_not_worse_than_least_squares():
    """The check-loss objective never exceeds its value at the weighted LS point."""
    x, y, w, tau = _random_instance(7, n=50, tau=0.25)
    design = np.vander(x, 2, increasing=True)
    root_w = np.sqrt(w)
    ls = np.linalg.lstsq(design * root_w[:, None], y * root_w, rcond=None)[0]
    solution = fit_check_loss(x, y, w, tau)
    assert solution.objective <= check_loss_objective(x, y, w, tau, ls) + 1e-12


def test_degree_two_on_linear_data():
    """Linear data leaves the quadratic coefficient at zero."""
    x = np.linspace(-1, 1, 15)
    coef = solve_weighted_check_loss(x, 1.0 + 2.0 * x, np.ones_like(x), 0.4, degree=2)
    assert abs(coef[2]) < 1e-6, f"quadratic coefficient should vanish, got {coef[2]}"
    np.testing.assert_allclose(coef[:2], [1.0, 2.0], atol=1e-8)


def test_solver_errors():
    """Too few weighted points and identical covariates are rejected."""
    with pytest.raises(InsufficientLocalData):
        solve_weighted_check_loss(np.array([0.0, 1.0, 2.0]), np.zeros(3), np.array([1.0, 1.0, 0.0]), 0.5)
    with pytest.raises(Degenerate):
        solve_weighted_check_loss(np.zeros(5), np.arange(5.0), np.ones(5), 0.5)
    with pytest.raises(ValueError):
        solve_weighted_check_loss(np.arange(5.0), np.arange(5.0), np.ones(5), 1.0)


def test_local_linear_quantile_constant_data():
    """Constant responses are reproduced at any level."""
    batch = ObservationBatch(np.linspace(0, 1, 100), np.full(100, 4.2))
    for tau in (0.1, 0.5, 0.9):
        fit = local_linear_quantile(batch, 0.4, tau, 0.2, EPAN)
        assert fit.a_hat == pytest.approx(4.2, abs=1e-10), f"tau={tau}: intercept {fit.a_hat}"
        assert fit.converged


def test_local_linear_quantile_widens_sparse_windows():
    """A window with too few points is widened by 1.5 until it holds ten."""
    batch = ObservationBatch(np.linspace(0, 1, 30), np.linspace(0, 1, 30))
    fit = local_linear_quantile(batch, 0.5, 0.5, 0.1, EPAN)
    assert fit.widenings == 2, f"expected two widenings, got {fit.widenings}"
    assert fit.bandwidth == pytest.approx(0.225)
    assert fit.a_hat == pytest.approx(0.5, abs=1e-9)

    with pytest.raises(InsufficientLocalData):
        local_linear_quantile(batch, 0.5, 0.5, 0.01, EPAN)
    with pytest.raises(ValueError):
        local_linear_quantile(batch, 0.5, 0.005, 0.2, EPAN)


def test_local_median_monte_carlo():
    """Averaged local medians at x=0 approach m(0) = 2 on the homoscedastic design."""
    rng = np.random.default_rng(2024)
    estimates = []
    for _ in range(40):
        x = rng.standard_normal(500)
        y = np.sin(2 * x) + 2 * np.exp(-16 * x ** 2) + 0.5 * rng.standard_normal(500)
        estimates.append(local_linear_quantile(ObservationBatch(x, y), 0.0, 0.5, 0.1, EPAN).a_hat)
    assert abs(np.mean(estimates) - 2.0) < 0.15, f"mean local median {np.mean(estimates):.3f} far from 2"


def test_curvature_term():
    """beta = mu2 * b2: mu2 on y = x^2, zero on constant data."""
    x = np.linspace(-1, 1, 201)
    quadratic = ObservationBatch(x, x ** 2)
    constant = ObservationBatch(x, np.full_like(x, 3.0))
    assert local_cubic_cqr_beta(quadratic, 0.0, 0.5, 0.5, EPAN) == pytest.approx(EPAN.mu2, abs=1e-8)
    assert local_cubic_cqr_beta(constant, 0.1, 0.3, 0.5, EPAN) == pytest.approx(0.0, abs=1e-10)


def test_local_linear_least_squares():
    """Lines are reproduced and the 2x2 normal equations agree."""
    x = np.linspace(-2, 2, 81)
    line = ObservationBatch(x, 1.5 - 0.5 * x)
    assert local_linear_ls(line, 0.3, 0.5, EPAN) == pytest.approx(1.5 - 0.15, abs=1e-12)

    rng = np.random.default_rng(9)
    xs = rng.uniform(-1, 1, 300)
    ys = np.cos(3 * xs) + rng.normal(scale=0.2, size=300)
    batch = ObservationBatch(xs, ys)
    x0, h = 0.2, 0.3
    d = xs - x0
    w = np.where(np.abs(d / h) <= 1, 0.75 * (1 - (d / h) ** 2), 0.0) / h
    gram = np.array([[w.sum(), (w * d).sum()], [(w * d).sum(), (w * d * d).sum()]])
    rhs = np.array([(w * ys).sum(), (w * d * ys).sum()])
    oracle = np.linalg.inv(gram) @ rhs
    assert local_linear_ls(batch, x0, h, EPAN) == pytest.approx(oracle[0], abs=1e-10)

    grid = np.linspace(-0.8, 0.8, 9)
    curve = local_linear_ls_curve(batch, grid, h, EPAN)
    scalar = [local_linear_ls(batch, g, h, EPAN) for g in grid]
    np.testing.assert_allclose(curve, scalar, atol=1e-10)


def test_observation_batch_validation():
    """Batches reject mismatched lengths, non-finite values and emptiness."""
    with pytest.raises(ValueError):
        ObservationBatch(np.arange(3.0), np.arange(4.0))
    with pytest.raises(ValueError):
        ObservationBatch(np.array([0.0, np.nan]), np.zeros(2))
    with pytest.raises(ValueError):
        ObservationBatch(np.array([]), np.array([]))
    batch = ObservationBatch([3.0, 1.0, 2.0], [30.0, 10.0, 20.0], batch_id=7)
    xs, ys = batch.sorted_view
    np.testing.assert_array_equal(xs, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ys, [10.0, 20.0, 30.0])
    assert batch.n == 3
