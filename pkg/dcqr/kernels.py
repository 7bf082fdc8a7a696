"""Smoothing kernels, their moments, and windowed kernel-weighted sums."""

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .errors import ConfigError

ArrayLike = Union[float, np.ndarray]

# Kernel families: compact support radius and closed-form moments (None = quadrature)
KERNEL_FAMILIES = {
    "epanechnikov": {"support_radius": 1.0, "mu2": 0.2, "rk": 0.6},
    "uniform": {"support_radius": 1.0, "mu2": 1.0 / 3.0, "rk": 0.5},
    "gaussian_truncated": {"support_radius": 4.0, "mu2": None, "rk": None},
}

_GAUSSIAN_MASS_CACHE = {}


def normalize_kernel_name(name: str) -> str:
    """Normalize a kernel name for table lookup."""
    return name.strip().lower().replace(" ", "_").replace("-", "_")


@dataclass(frozen=True)
class KernelSpec:
    """Immutable kernel description; moments are computed once and cached."""

    family: str
    support_radius: float

    def __call__(self, u: ArrayLike) -> ArrayLike:
        return eval_kernel(self, u)

    @cached_property
    def moments(self) -> Tuple[float, float]:
        return _compute_moments(self)

    @property
    def mu2(self) -> float:
        return self.moments[0]

    @property
    def rk(self) -> float:
        return self.moments[1]


@lru_cache(maxsize=None)
def get_kernel(name: str) -> KernelSpec:
    """Look up a kernel by name.

    Args:
        name: Kernel family, e.g. "epanechnikov" or "Gaussian-Truncated"

    Returns:
        Cached KernelSpec

    Raises:
        ConfigError: If the family is unknown
    """
    key = normalize_kernel_name(name)
    if key not in KERNEL_FAMILIES:
        known = ", ".join(sorted(KERNEL_FAMILIES))
        raise ConfigError(f"Unknown kernel '{name}' (known: {known})")
    return KernelSpec(family=key, support_radius=KERNEL_FAMILIES[key]["support_radius"])


def _gaussian_mass(radius: float) -> float:
    if radius not in _GAUSSIAN_MASS_CACHE:
        _GAUSSIAN_MASS_CACHE[radius] = float(ndtr(radius) - ndtr(-radius))
    return _GAUSSIAN_MASS_CACHE[radius]


def eval_kernel(k: KernelSpec, u: ArrayLike) -> ArrayLike:
    """Evaluate K(u); vectorized over arrays, zero outside the support."""
    arr = np.asarray(u, dtype=float)
    inside = np.abs(arr) <= k.support_radius

    if k.family == "epanechnikov":
        values = 0.75 * (1.0 - arr * arr)
    elif k.family == "uniform":
        values = np.full_like(arr, 0.5)
    elif k.family == "gaussian_truncated":
        values = np.exp(-0.5 * arr * arr) / np.sqrt(2.0 * np.pi) / _gaussian_mass(k.support_radius)
    else:
        raise ConfigError(f"Unknown kernel family '{k.family}'")

    values = np.where(inside, values, 0.0)
    if values.ndim == 0:
        return float(values)
    return values


def _compute_moments(k: KernelSpec) -> Tuple[float, float]:
    table = KERNEL_FAMILIES.get(k.family, {})
    if table.get("mu2") is not None and table.get("rk") is not None:
        return float(table["mu2"]), float(table["rk"])

    radius = k.support_radius
    mu2, _ = integrate.quad(lambda v: v * v * eval_kernel(k, v), -radius, radius,
                            epsabs=1e-14, epsrel=1e-12, limit=200)
    rk, _ = integrate.quad(lambda v: eval_kernel(k, v) ** 2, -radius, radius,
                           epsabs=1e-14, epsrel=1e-12, limit=200)
    return float(mu2), float(rk)


def kernel_moments(k: KernelSpec) -> Tuple[float, float]:
    """Return (mu2, integral of K squared) for a kernel."""
    return k.moments


def kernel_window_sums(
    xs_sorted: np.ndarray,
    value_rows: np.ndarray,
    eval_x: np.ndarray,
    h: ArrayLike,
    k: KernelSpec,
    powers: Sequence[int] = (0,),
    block_size: int = 64,
) -> np.ndarray:
    """Kernel-weighted sums over a sorted sample.

    For every evaluation point x and power p computes
    sum_j K_h(x_j - x) * (x_j - x)**p * v_j for each row v of ``value_rows``,
    where K_h(d) = K(d / h) / h. Only the points inside the kernel window are
    visited (located with ``searchsorted``), blockwise over the evaluation
    points.

    Args:
        xs_sorted: Covariates sorted ascending, shape (n,)
        value_rows: Values aligned with ``xs_sorted``, shape (q, n) or (n,)
        eval_x: Evaluation points, shape (G,)
        h: Bandwidth, scalar or one per evaluation point
        k: Kernel
        powers: Powers of the distance to accumulate
        block_size: Evaluation points processed per block

    Returns:
        Array of shape (len(powers), q, G)
    """
    xs_sorted = np.asarray(xs_sorted, dtype=float)
    rows = np.atleast_2d(np.asarray(value_rows, dtype=float))
    eval_x = np.asarray(eval_x, dtype=float).ravel()
    h_all = np.broadcast_to(np.asarray(h, dtype=float), eval_x.shape)

    out = np.zeros((len(powers), rows.shape[0], eval_x.size))
    if eval_x.size == 0 or xs_sorted.size == 0:
        return out

    order = np.argsort(eval_x, kind="mergesort")
    radius = k.support_radius

    for start in range(0, order.size, block_size):
        idx = order[start:start + block_size]
        xb = eval_x[idx]
        hb = h_all[idx]
        lo = np.searchsorted(xs_sorted, np.min(xb - radius * hb), side="left")
        hi = np.searchsorted(xs_sorted, np.max(xb + radius * hb), side="right")
        if hi <= lo:
            continue

        dist = xs_sorted[lo:hi][None, :] - xb[:, None]
        weights = eval_kernel(k, dist / hb[:, None]) / hb[:, None]
        window = rows[:, lo:hi]
        for slot, power in enumerate(powers):
            weighted = weights if power == 0 else weights * dist ** power
            out[slot][:, idx] = window @ weighted.T

    return out
