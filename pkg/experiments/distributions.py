"""Centered error distributions and their contamination mixtures."""

from dataclasses import dataclass
from typing import Any, Dict, Tuple, Union

import numpy as np
from scipy import optimize, stats

from dcqr.constants import MIXTURE_SCALE
from dcqr.errors import ConfigError

ArrayLike = Union[float, np.ndarray]

# Base families: default parameters and display label
BASE_DISTRIBUTIONS = {
    "normal": {"params": (), "label": "N(0,1)"},
    "laplace": {"params": (), "label": "Laplace"},
    "t": {"params": (3.0,), "label": "t({0:g})"},
    "uniform": {"params": (), "label": "U(-1,1)"},
    "f": {"params": (10.0, 6.0), "label": "F({0:g},{1:g})"},
    "gamma": {"params": (2.0, 1.5), "label": "Gamma({0:g},{1:g})"},
    "lognormal": {"params": (0.0, 1.0), "label": "Lognorm({0:g},{1:g})"},
    "degenerate": {"params": (), "label": "zero"},
}


def normalize_distribution_name(name: str) -> str:
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    aliases = {"gaussian": "normal", "student_t": "t", "lognorm": "lognormal", "zero": "degenerate"}
    return aliases.get(key, key)


@dataclass(frozen=True)
class ErrorDistributionSpec:
    """Centered error law, optionally contaminated: (1 - lam) F + lam F(./sqrt(10))."""

    base: str = "normal"
    params: Tuple[float, ...] = ()
    lam: float = 0.0
    centered: bool = True

    def __post_init__(self):
        key = normalize_distribution_name(self.base)
        if key not in BASE_DISTRIBUTIONS:
            known = ", ".join(sorted(BASE_DISTRIBUTIONS))
            raise ConfigError(f"Unknown error distribution '{self.base}' (known: {known})")
        params = tuple(float(p) for p in self.params) or BASE_DISTRIBUTIONS[key]["params"]
        expected = len(BASE_DISTRIBUTIONS[key]["params"])
        if len(params) != expected:
            raise ConfigError(f"{key} takes {expected} parameters, got {len(params)}")
        if not 0.0 <= self.lam < 1.0:
            raise ConfigError(f"mixture proportion must lie in [0, 1), got {self.lam}")
        if key == "f" and params[1] <= 2:
            raise ConfigError("F distribution needs d2 > 2 for a finite mean")
        if key == "t" and params[0] <= 1:
            raise ConfigError("t distribution needs df > 1 for a finite mean")
        if key == "gamma" and min(params) <= 0:
            raise ConfigError("gamma shape and scale must be positive")
        if key == "lognormal" and params[1] <= 0:
            raise ConfigError("lognormal sigma must be positive")
        object.__setattr__(self, "base", key)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "lam", float(self.lam))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ErrorDistributionSpec":
        unknown = set(data) - {"base", "params", "lam"}
        if unknown:
            raise ConfigError(f"Unknown error distribution keys: {sorted(unknown)}")
        return cls(base=data.get("base", "normal"), params=tuple(data.get("params") or ()),
                   lam=float(data.get("lam", 0.0)))

    def to_dict(self) -> Dict[str, Any]:
        return {"base": self.base, "params": list(self.params), "lam": self.lam}

    @property
    def label(self) -> str:
        return BASE_DISTRIBUTIONS[self.base]["label"].format(*self.params)

    @property
    def is_degenerate(self) -> bool:
        return self.base == "degenerate"

    def frozen(self):
        """scipy.stats frozen base distribution (uncentered)."""
        p = self.params
        if self.base == "normal":
            return stats.norm()
        if self.base == "laplace":
            return stats.laplace()
        if self.base == "t":
            return stats.t(p[0])
        if self.base == "uniform":
            return stats.uniform(loc=-1.0, scale=2.0)
        if self.base == "f":
            return stats.f(p[0], p[1])
        if self.base == "gamma":
            return stats.gamma(p[0], scale=p[1])
        if self.base == "lognormal":
            return stats.lognorm(s=p[1], scale=np.exp(p[0]))
        raise ConfigError("the degenerate distribution has no density")

    @property
    def base_mean(self) -> float:
        """Analytic mean of the uncentered base law."""
        p = self.params
        if self.base == "f":
            return p[1] / (p[1] - 2.0)
        if self.base == "gamma":
            return p[0] * p[1]
        if self.base == "lognormal":
            return float(np.exp(p[0] + p[1] ** 2 / 2.0))
        return 0.0

    @property
    def shift(self) -> float:
        return self.base_mean if self.centered else 0.0

    def cdf(self, e: ArrayLike) -> ArrayLike:
        base = self.frozen()
        e = np.asarray(e, dtype=float)
        clean = base.cdf(e + self.shift)
        if self.lam == 0.0:
            return clean
        return (1.0 - self.lam) * clean + self.lam * base.cdf(e / MIXTURE_SCALE + self.shift)

    def pdf(self, e: ArrayLike) -> ArrayLike:
        base = self.frozen()
        e = np.asarray(e, dtype=float)
        clean = base.pdf(e + self.shift)
        if self.lam == 0.0:
            return clean
        return (1.0 - self.lam) * clean + self.lam * base.pdf(e / MIXTURE_SCALE + self.shift) / MIXTURE_SCALE

    def quantile(self, tau: float) -> float:
        """Quantile of the centered mixture."""
        if self.is_degenerate:
            return 0.0
        q_clean = float(self.frozen().ppf(tau) - self.shift)
        if self.lam == 0.0:
            return q_clean
        q_wide = MIXTURE_SCALE * q_clean
        lo, hi = min(q_clean, q_wide), max(q_clean, q_wide)
        if hi - lo < 1e-14:
            return q_clean
        return float(optimize.brentq(lambda e: self.cdf(e) - tau, lo - 1e-12, hi + 1e-12, xtol=1e-14))

    def variance(self) -> float:
        """Variance of the centered mixture."""
        if self.is_degenerate:
            return 0.0
        base_var = float(self.frozen().var())
        return (1.0 - self.lam) * base_var + self.lam * MIXTURE_SCALE ** 2 * base_var


def _base_draws(spec: ErrorDistributionSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    p = spec.params
    if spec.base == "normal":
        return rng.standard_normal(count)
    if spec.base == "laplace":
        return rng.laplace(0.0, 1.0, count)
    if spec.base == "t":
        return rng.standard_t(p[0], count)
    if spec.base == "uniform":
        return rng.uniform(-1.0, 1.0, count)
    if spec.base == "f":
        return rng.f(p[0], p[1], count)
    if spec.base == "gamma":
        return rng.gamma(p[0], p[1], count)
    if spec.base == "lognormal":
        return rng.lognormal(p[0], p[1], count)
    return np.zeros(count)


def sample_error(spec: ErrorDistributionSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. draws from the centered (contaminated) error law.

    The analytic base mean is subtracted before mixing, so the mixture is
    centered as well; a draw is scaled by sqrt(10) with probability lam.
    """
    draws = _base_draws(spec, count, rng) - spec.shift
    if spec.lam > 0.0:
        wide = rng.random(count) < spec.lam
        draws = np.where(wide, MIXTURE_SCALE * draws, draws)
    return draws
