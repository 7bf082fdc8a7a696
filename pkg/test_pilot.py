"""Tests for the pilot curves and the standardized error model."""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

# Add current directory to path
sys.path.append(str(Path.cwd()))

from dcqr.errors import EmptyNeighborhood
from dcqr.kernels import get_kernel
from dcqr.local_quantile import ObservationBatch
from dcqr.pilot import (
    ErrorModel,
    PilotCurves,
    density_at_quantile,
    estimate_error_model,
    evaluate_pilot,
    fit_nw_mean,
    fit_nw_variance,
    fit_pilot,
    pilot_bandwidth,
    quantile_inverse,
    rule_of_thumb_bandwidth,
    standardized_residuals,
    variance_function,
)

EPAN = get_kernel("epanechnikov")


def _flat_pilot(lo=-1.0, hi=1.0, sigma=1.0, density=None):
    grid = np.linspace(lo, hi, 21)
    return PilotCurves(
        grid_x=grid,
        m_nw=np.zeros_like(grid),
        sigma_hat=np.full_like(grid, sigma),
        h_pilot=0.2,
        kernel=EPAN,
        design_density=density if density is None else np.full_like(grid, density),
    )


def test_rule_of_thumb_bandwidth():
    """1.06 * sd * n^(-1/5) on a sample with unit spread."""
    values = np.tile([-1.0, 1.0], 50)
    assert rule_of_thumb_bandwidth(values) == pytest.approx(1.06 * 100 ** -0.2)


def test_constant_responses():
    """Constant y gives a constant pilot mean and the floored scale."""
    batches = [ObservationBatch(np.linspace(0, 1, 50), np.full(50, 3.0), batch_id=i) for i in range(2)]
    pilot = fit_pilot(batches, EPAN, grid_size=41)
    np.testing.assert_allclose(pilot.m_nw, 3.0, atol=1e-12)
    np.testing.assert_allclose(pilot.sigma_hat, pilot.sigma_floor)
    assert pilot.sigma_floor > 0


def test_divide_and_conquer_mean_ignores_the_split():
    """Summing per-batch (S, T) gives the pooled Nadaraya-Watson estimate."""
    rng = np.random.default_rng(1)
    xs = rng.uniform(0, 1, 400)
    ys = np.sin(4 * xs) + rng.normal(scale=0.3, size=400)
    grid = np.linspace(0.05, 0.95, 31)
    pooled = fit_nw_mean([ObservationBatch(xs, ys)], grid, 0.1, EPAN)
    split = fit_nw_mean(
        [ObservationBatch(xs[i::4], ys[i::4], batch_id=i) for i in range(4)], grid, 0.1, EPAN
    )
    np.testing.assert_allclose(split, pooled, rtol=1e-12, atol=1e-12)


def test_pilot_recovers_mean_and_scale():
    """Large sample: mean, scale and design density are close to the truth mid-range."""
    rng = np.random.default_rng(8)
    xs = rng.uniform(0, 1, 4000)
    ys = 1.0 + 2.0 * xs + 0.5 * rng.standard_normal(4000)
    batches = [ObservationBatch(xs[i::4], ys[i::4], batch_id=i) for i in range(4)]
    pilot = fit_pilot(batches, EPAN)
    mean, scale, clamped = evaluate_pilot(pilot, np.array([0.5]))
    assert clamped == 0
    assert mean[0] == pytest.approx(2.0, abs=0.1), f"m_nw(0.5) = {mean[0]:.3f}"
    assert scale[0] == pytest.approx(0.5, abs=0.1), f"sigma(0.5) = {scale[0]:.3f}"
    density = np.interp(0.5, pilot.grid_x, pilot.design_density)
    assert density == pytest.approx(1.0, abs=0.2), f"f_X(0.5) = {density:.3f}"


def test_empty_neighborhood_after_widening():
    """A grid point far from every observation cannot be covered."""
    batch = ObservationBatch(np.linspace(0, 0.1, 20), np.zeros(20))
    with pytest.raises(EmptyNeighborhood):
        fit_nw_mean([batch], np.array([10.0]), 0.01, EPAN)


def test_evaluate_pilot_counts_clamps():
    """Points outside the pilot grid are clamped and counted."""
    pilot = _flat_pilot(sigma=2.0)
    mean, scale, clamped = evaluate_pilot(pilot, np.array([-5.0, 0.0, 5.0]))
    assert clamped == 2
    np.testing.assert_allclose(scale, 2.0)
    np.testing.assert_allclose(mean, 0.0)


def test_standardized_residuals():
    """eps = (y - m) / sigma per batch."""
    pilot = _flat_pilot(sigma=2.0)
    batch = ObservationBatch(np.array([-0.5, 0.0, 0.5]), np.array([2.0, -4.0, 1.0]))
    residuals, clamped = standardized_residuals([batch], pilot)
    np.testing.assert_allclose(residuals[0], [1.0, -2.0, 0.5])
    assert clamped == 0


def test_symmetric_residuals_center_the_cdf():
    """Residuals of +-1 in equal numbers put F(0) at one half."""
    pilot = _flat_pilot()
    xs = np.linspace(-0.9, 0.9, 200)
    ys = np.tile([-1.0, 1.0], 100)
    batches = [ObservationBatch(xs[:100], ys[:100], 0), ObservationBatch(xs[100:], ys[100:], 1)]
    em = estimate_error_model(batches, pilot, h_density=1.5)
    assert quantile_inverse(em, 0.5) == pytest.approx(0.0, abs=1e-3)
    assert np.interp(0.0, em.density_grid, em.F_eps) == pytest.approx(0.5, abs=1e-3)
    assert em.F_eps[0] == 0.0 and em.F_eps[-1] == pytest.approx(1.0)

    restandardized = estimate_error_model(batches, pilot, h_density=1.5, restandardize=True)
    assert quantile_inverse(restandardized, 0.5) == pytest.approx(0.0, abs=1e-3)


def test_estimated_normal_errors():
    """The averaged KDE of normal residuals is close to the standard normal."""
    rng = np.random.default_rng(21)
    pilot = _flat_pilot()
    batches = [
        ObservationBatch(rng.uniform(-1, 1, 2000), rng.standard_normal(2000), batch_id=i)
        for i in range(3)
    ]
    em = estimate_error_model(batches, pilot)
    assert quantile_inverse(em, 0.5) == pytest.approx(0.0, abs=0.1)
    assert density_at_quantile(em, 0.5) == pytest.approx(stats.norm.pdf(0), abs=0.05)


def test_tabulated_normal_quantiles():
    """Tabulated N(0, 1): F^-1(0.975) = 1.96 and f(F^-1(0.5)) = 0.3989."""
    em = ErrorModel.tabulate(stats.norm.pdf, stats.norm.cdf, -8.0, 8.0, n_points=4001)
    assert quantile_inverse(em, 0.975) == pytest.approx(1.959964, abs=1e-4)
    assert density_at_quantile(em, 0.5) == pytest.approx(0.398942, abs=1e-5)
    taus = np.array([0.1, 0.25, 0.75, 0.9])
    np.testing.assert_allclose(quantile_inverse(em, taus), stats.norm.ppf(taus), atol=1e-4)


def test_uniform_density_and_floor():
    """Uniform(-1, 1) has density 1/2; a higher floor wins."""
    law = stats.uniform(loc=-1.0, scale=2.0)
    em = ErrorModel.tabulate(law.pdf, law.cdf, -1.0, 1.0, n_points=2001)
    assert density_at_quantile(em, 0.3) == pytest.approx(0.5, abs=1e-9)
    floored = ErrorModel.tabulate(law.pdf, law.cdf, -1.0, 1.0, n_points=2001, density_floor=0.6)
    assert density_at_quantile(floored, 0.3) == pytest.approx(0.6)


def test_quantile_inverse_rejects_boundary_levels():
    """Levels 0 and 1 have no finite quantile."""
    em = ErrorModel.tabulate(stats.norm.pdf, stats.norm.cdf, -8.0, 8.0)
    for tau in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            quantile_inverse(em, tau)


def test_error_model_validation():
    """Densities that do not integrate to one are rejected."""
    grid = np.linspace(-1, 1, 11)
    with pytest.raises(ValueError):
        ErrorModel(density_grid=grid, f_eps=np.full(11, 2.0), F_eps=np.linspace(0, 1, 11))
    with pytest.raises(ValueError):
        ErrorModel(density_grid=grid, f_eps=np.full(11, 0.5), F_eps=np.linspace(1, 0, 11))


def test_variance_function():
    """a(x) = sigma^2 R(K) / f_X(x), infinite where the design density vanishes."""
    pilot = _flat_pilot(sigma=2.0, density=0.5)
    np.testing.assert_allclose(variance_function(pilot, np.array([0.0, 0.7])), 4.0 * 0.6 / 0.5)

    grid = np.linspace(0, 1, 5)
    sparse = PilotCurves(
        grid_x=grid, m_nw=np.zeros(5), sigma_hat=np.ones(5), h_pilot=0.1, kernel=EPAN,
        design_density=np.array([0.0, 1.0, 1.0, 1.0, 0.0]),
    )
    values = variance_function(sparse, np.array([0.0, 0.5]))
    assert np.isinf(values[0]) and np.isfinite(values[1])


def _smooth_batches(sigma, n=8000, m=4, seed=21):
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-1, 1, n)
    ys = np.sin(2 * xs) + sigma * rng.standard_normal(n)
    return [ObservationBatch(xs[i::m], ys[i::m], batch_id=i) for i in range(m)]


def test_variance_of_noiseless_data_is_smoothing_bias_only():
    """Without noise the residual variance is only the squared pilot bias."""
    batches = _smooth_batches(0.0)
    grid = np.linspace(-1, 1, 41)
    h = pilot_bandwidth(batches)
    sigma2 = fit_nw_variance(batches, fit_nw_mean(batches, grid, h, EPAN), grid, h, EPAN)
    assert np.max(sigma2) < 1e-2, f"max sigma^2 {np.max(sigma2):.4g}"


def test_variance_recovers_a_constant_scale():
    """Noise with sd 0.5 gives a grid-averaged sigma close to 0.5."""
    batches = _smooth_batches(0.5)
    grid = np.linspace(-0.9, 0.9, 37)
    h = pilot_bandwidth(batches)
    sigma = np.sqrt(fit_nw_variance(batches, fit_nw_mean(batches, grid, h, EPAN), grid, h, EPAN))
    assert np.mean(sigma) == pytest.approx(0.5, abs=0.03), f"mean sigma {np.mean(sigma):.4f}"


def test_variance_ignores_the_split():
    """Per-batch sums of squared residuals reduce to the pooled estimate."""
    batches = _smooth_batches(0.5, n=1200, m=3)
    pooled = [ObservationBatch(np.concatenate([b.xs for b in batches]),
                               np.concatenate([b.ys for b in batches]))]
    grid = np.linspace(-0.9, 0.9, 25)
    curve = fit_nw_mean(pooled, grid, 0.15, EPAN)
    split = fit_nw_variance(batches, curve, grid, 0.15, EPAN)
    whole = fit_nw_variance(pooled, curve, grid, 0.15, EPAN)
    np.testing.assert_allclose(split, whole, rtol=1e-12, atol=1e-14)
