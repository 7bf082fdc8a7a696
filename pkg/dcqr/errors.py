"""Exception hierarchy for estimation, planning and validation failures."""

from typing import Optional


class DCQRError(Exception):
    """Base error. Optional cell coordinates are rendered into the message."""

    def __init__(
        self,
        message: str,
        batch: Optional[int] = None,
        level: Optional[int] = None,
        x: Optional[float] = None,
    ):
        self.batch = batch
        self.level = level
        self.x = x
        self.detail = message
        super().__init__(self._render())

    def _render(self) -> str:
        coords = []
        if self.batch is not None:
            coords.append(f"batch={self.batch}")
        if self.level is not None:
            coords.append(f"level={self.level}")
        if self.x is not None:
            coords.append(f"x={self.x:.6g}")
        if not coords:
            return self.detail
        return f"{self.detail} [{', '.join(coords)}]"

    def at(
        self,
        batch: Optional[int] = None,
        level: Optional[int] = None,
        x: Optional[float] = None,
    ) -> "DCQRError":
        """Attach (missing) cell coordinates and return self for re-raising."""
        if batch is not None and self.batch is None:
            self.batch = batch
        if level is not None and self.level is None:
            self.level = level
        if x is not None and self.x is None:
            self.x = x
        self.args = (self._render(),)
        return self


class InsufficientLocalData(DCQRError):
    """Too few positively weighted points for a local fit."""


class Degenerate(DCQRError):
    """Design does not identify the local polynomial (e.g. identical x)."""


class EmptyNeighborhood(DCQRError):
    """A Nadaraya-Watson denominator stayed zero after widening."""


class InfeasibleGrid(DCQRError):
    """Quantile grid leaves the admissible level range."""


class NoRoot(DCQRError):
    """A tau-bar objective does not change sign on the feasible interval."""


class SingularPlan(DCQRError):
    """Weight system is singular (all quantile values coincide)."""


class FlatCurvature(DCQRError):
    """Aggregated curvature vanishes so no bias-variance balance exists."""


class LengthMismatch(DCQRError, ValueError):
    """Two vectors that must be aligned have different lengths."""


class DivideByZero(DCQRError, ZeroDivisionError):
    """A ratio metric has a zero denominator."""


class ConfigError(DCQRError, ValueError):
    """Invalid run configuration."""


class DatasetError(DCQRError, ValueError):
    """Invalid or unreadable dataset file."""
