"""The two simulation designs: homoscedastic and heteroscedastic regression."""

from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from dcqr.constants import DEFAULT_N_GRID, HETEROSCEDASTIC_INTERVAL, HOMOSCEDASTIC_INTERVAL
from dcqr.errors import ConfigError
from dcqr.local_quantile import ObservationBatch

from .distributions import ErrorDistributionSpec, sample_error


def homoscedastic_mean(x: np.ndarray) -> np.ndarray:
    return np.sin(2.0 * x) + 2.0 * np.exp(-16.0 * x ** 2)


def homoscedastic_scale(x: np.ndarray) -> np.ndarray:
    return np.full_like(np.asarray(x, dtype=float), 0.5)


def heteroscedastic_mean(x: np.ndarray) -> np.ndarray:
    return x * np.sin(2.0 * np.pi * x)


def heteroscedastic_scale(x: np.ndarray) -> np.ndarray:
    return 2.0 + np.cos(2.0 * np.pi * x)


def _normal_design(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def _uniform_design(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, n)


@dataclass(frozen=True)
class RegressionModel:
    """Y = m(X) + sigma(X) * eps with a known design law and evaluation interval."""

    name: str
    mean_fn: Callable[[np.ndarray], np.ndarray]
    scale_fn: Callable[[np.ndarray], np.ndarray]
    design: Callable[[int, np.random.Generator], np.ndarray]
    interval: Tuple[float, float]

    def evaluation_grid(self, n_grid: int = DEFAULT_N_GRID) -> np.ndarray:
        return np.linspace(self.interval[0], self.interval[1], n_grid)

    def generate(self, n: int, spec: ErrorDistributionSpec, rng: np.random.Generator) -> ObservationBatch:
        xs = self.design(n, rng)
        eps = sample_error(spec, n, rng)
        return ObservationBatch(xs=xs, ys=self.mean_fn(xs) + self.scale_fn(xs) * eps, batch_id=0)


HOMOSCEDASTIC = RegressionModel(
    name="homoscedastic",
    mean_fn=homoscedastic_mean,
    scale_fn=homoscedastic_scale,
    design=_normal_design,
    interval=HOMOSCEDASTIC_INTERVAL,
)

HETEROSCEDASTIC = RegressionModel(
    name="heteroscedastic",
    mean_fn=heteroscedastic_mean,
    scale_fn=heteroscedastic_scale,
    design=_uniform_design,
    interval=HETEROSCEDASTIC_INTERVAL,
)

MODELS = {model.name: model for model in (HOMOSCEDASTIC, HETEROSCEDASTIC)}


def get_model(name: str) -> RegressionModel:
    key = name.strip().lower()
    if key not in MODELS:
        raise ConfigError(f"Unknown regression model '{name}' (known: {', '.join(MODELS)})")
    return MODELS[key]


def generate_homoscedastic(n: int, spec: ErrorDistributionSpec, rng: np.random.Generator) -> ObservationBatch:
    """m(x) = sin(2x) + 2 exp(-16 x^2), sigma = 0.5, X ~ N(0, 1)."""
    return HOMOSCEDASTIC.generate(n, spec, rng)


def generate_heteroscedastic(n: int, spec: ErrorDistributionSpec, rng: np.random.Generator) -> ObservationBatch:
    """m(x) = x sin(2 pi x), sigma(x) = 2 + cos(2 pi x), X ~ U(0, 1)."""
    return HETEROSCEDASTIC.generate(n, spec, rng)


def split_batches(batch: ObservationBatch, m: int, equal: bool = True) -> List[ObservationBatch]:
    """Split a full sample into m contiguous batches.

    Raises:
        ConfigError: If ``equal`` and n is not divisible by m
    """
    if m < 1 or m > batch.n:
        raise ConfigError(f"cannot split {batch.n} observations into {m} batches")
    if equal and batch.n % m:
        raise ConfigError(f"n={batch.n} is not divisible by m={m} (equal split required)")
    pieces = np.array_split(np.arange(batch.n), m)
    return [ObservationBatch(batch.xs[idx], batch.ys[idx], batch_id=i) for i, idx in enumerate(pieces)]


def split_equally(batch: ObservationBatch, m: int) -> List[ObservationBatch]:
    return split_batches(batch, m, equal=True)
