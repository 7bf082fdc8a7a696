"""Tests for smoothing kernels, their moments and windowed sums."""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

# Add current directory to path
sys.path.append(str(Path.cwd()))

from dcqr.errors import ConfigError
from dcqr.kernels import KERNEL_FAMILIES, eval_kernel, get_kernel, kernel_moments, kernel_window_sums


def test_epanechnikov_values():
    """K(0) = 3/4, K(0.5) = 0.5625, zero outside the support."""
    k = get_kernel("epanechnikov")
    assert eval_kernel(k, 0.0) == pytest.approx(0.75), "Epanechnikov peak should be 3/4"
    assert eval_kernel(k, 0.5) == pytest.approx(0.5625), "K(0.5) should be 0.75 * (1 - 0.25)"
    assert eval_kernel(k, 1.5) == 0.0, "Kernel should vanish outside [-1, 1]"
    assert isinstance(eval_kernel(k, 0.2), float), "Scalar input should give a float"


def test_known_moments():
    """Closed-form moments of the compact kernels."""
    mu2, rk = kernel_moments(get_kernel("epanechnikov"))
    assert mu2 == pytest.approx(0.2, abs=1e-12), f"Epanechnikov mu2 should be 0.2, got {mu2}"
    assert rk == pytest.approx(0.6, abs=1e-12), f"Epanechnikov R(K) should be 0.6, got {rk}"
    mu2_u, rk_u = kernel_moments(get_kernel("uniform"))
    assert mu2_u == pytest.approx(1.0 / 3.0, abs=1e-12), "Uniform mu2 should be 1/3"
    assert rk_u == pytest.approx(0.5, abs=1e-12), "Uniform R(K) should be 1/2"


@pytest.mark.parametrize("name", sorted(KERNEL_FAMILIES))
def test_kernel_integrates_to_one_and_is_symmetric(name):
    """Unit mass, zero first moment and moments agreeing with quadrature."""
    k = get_kernel(name)
    r = k.support_radius
    mass, _ = integrate.quad(lambda u: eval_kernel(k, u), -r, r, epsabs=1e-13)
    first, _ = integrate.quad(lambda u: u * eval_kernel(k, u), -r, r, epsabs=1e-13)
    mu2, _ = integrate.quad(lambda u: u * u * eval_kernel(k, u), -r, r, epsabs=1e-13)
    rk, _ = integrate.quad(lambda u: eval_kernel(k, u) ** 2, -r, r, epsabs=1e-13)

    assert abs(mass - 1.0) < 1e-8, f"{name}: kernel mass is {mass}"
    assert abs(first) < 1e-10, f"{name}: first moment is {first}"
    assert k.mu2 == pytest.approx(mu2, abs=1e-8), f"{name}: mu2 disagrees with quadrature"
    assert k.rk == pytest.approx(rk, abs=1e-8), f"{name}: R(K) disagrees with quadrature"

    u = np.linspace(-1.2 * r, 1.2 * r, 101)
    np.testing.assert_array_equal(eval_kernel(k, u), eval_kernel(k, -u))
    assert np.all(eval_kernel(k, u) >= 0), f"{name}: kernel must be nonnegative"


def test_get_kernel_normalizes_and_caches():
    """Lookup ignores case, spaces and hyphens and returns the cached spec."""
    assert get_kernel("Gaussian-Truncated") is get_kernel("gaussian_truncated")
    assert get_kernel("gaussian_truncated").support_radius == 4.0
    with pytest.raises(ConfigError):
        get_kernel("triweight")


def test_window_sums_match_brute_force():
    """Windowed sums equal the dense double loop for scalar and per-point h."""
    rng = np.random.default_rng(3)
    xs = np.sort(rng.uniform(-2, 2, 300))
    values = np.vstack([np.ones_like(xs), rng.normal(size=xs.size)])
    eval_x = rng.uniform(-2.2, 2.2, 37)
    k = get_kernel("epanechnikov")

    for h in (0.3, rng.uniform(0.1, 0.6, eval_x.size)):
        sums = kernel_window_sums(xs, values, eval_x, h, k, powers=(0, 1, 2))
        h_vec = np.broadcast_to(h, eval_x.shape)
        for g, (x0, hg) in enumerate(zip(eval_x, h_vec)):
            d = xs - x0
            w = eval_kernel(k, d / hg) / hg
            for slot, p in enumerate((0, 1, 2)):
                expected = values @ (w * d ** p)
                np.testing.assert_allclose(sums[slot, :, g], expected, rtol=1e-12, atol=1e-12)
