"""Monte Carlo replication harness: ASE/RASE tables, bias and rate studies."""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from dcqr.constants import DEFAULT_N_GRID, DEFAULT_REPLICATIONS
from dcqr.errors import ConfigError, DCQRError, DivideByZero
from dcqr.estimator import (
    CompositeConfig,
    alad_bandwidth,
    fit_alad,
    fit_composite,
    plan_composite,
    select_oll_bandwidth,
)
from dcqr.kernels import get_kernel
from dcqr.local_quantile import ObservationBatch, local_linear_ls_curve
from dcqr.pilot import estimate_error_model, fit_pilot

from .distributions import ErrorDistributionSpec
from .metrics import compute_ase, compute_rase
from .models import get_model, split_batches

logger = logging.getLogger(__name__)

ESTIMATORS = ("composite", "alad", "oracle")

# (first, second): RASE = ASE(second) / ASE(first)
ESTIMATOR_PAIRS = (("composite", "oracle"), ("alad", "oracle"), ("composite", "alad"))

# Substream stages
STAGE_DATA = 0
STAGE_CV = 1


def rng_stream(seed: int, replication: int, error_index: int, stage: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, replication, error, stage).

    The stream a replication sees does not depend on which worker runs it.
    """
    key = np.random.SeedSequence([int(seed), int(replication), int(error_index), int(stage)])
    return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True)
class ExperimentConfig:
    """Simulation design and replication policy."""

    model: str = "homoscedastic"
    n: int = 10000
    m_values: Tuple[int, ...] = (5,)
    errors: Tuple[ErrorDistributionSpec, ...] = (ErrorDistributionSpec(),)
    replications: int = DEFAULT_REPLICATIONS
    seed: int = 0
    estimators: Tuple[str, ...] = ESTIMATORS
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    n_grid: int = DEFAULT_N_GRID
    threads: int = 1
    equal_split: bool = True

    def __post_init__(self):
        get_model(self.model)
        if isinstance(self.errors, ErrorDistributionSpec):
            object.__setattr__(self, "errors", (self.errors,))
        object.__setattr__(self, "m_values", tuple(int(m) for m in self.m_values))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.replications < 1:
            raise ConfigError(f"replications must be at least 1, got {self.replications}")
        if self.n < 2:
            raise ConfigError(f"n must be at least 2, got {self.n}")
        if not self.m_values:
            raise ConfigError("m_values must not be empty")
        if not self.errors:
            raise ConfigError("at least one error distribution is required")
        for m in self.m_values:
            if m < 1 or m > self.n:
                raise ConfigError(f"m={m} must lie in [1, n={self.n}]")
            if self.equal_split and self.n % m:
                raise ConfigError(f"n={self.n} must be divisible by m={m} (batches are split equally)")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown or not self.estimators:
            raise ConfigError(f"estimators must be a nonempty subset of {ESTIMATORS}, got {self.estimators}")
        if self.n_grid < 2:
            raise ConfigError("n_grid must be at least 2")
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")

    @property
    def error(self) -> ErrorDistributionSpec:
        return self.errors[0]


@dataclass(frozen=True, eq=False)
class ReplicationReport:
    """Per-replication log and the aggregated RASE table."""

    table: pd.DataFrame
    log: pd.DataFrame
    config: ExperimentConfig

    @property
    def failures(self) -> int:
        return int((self.log["status"] != "ok").sum())


@dataclass(frozen=True, eq=False)
class BiasStudy:
    """Monte Carlo bias curves of the composite and ALAD estimators."""

    grid_x: np.ndarray
    bias_composite: np.ndarray
    bias_alad: np.ndarray
    mean_abs_bias_composite: float
    mean_abs_bias_alad: float
    analytic_alad_bias: float
    replications_ok: int


@dataclass(frozen=True, eq=False)
class RateStudy:
    """Mean composite ASE against n and the fitted log-log slope."""

    ns: Tuple[int, ...]
    m_values: Tuple[int, ...]
    mean_ase: np.ndarray
    slope: float


def _needs_h_oll(config: ExperimentConfig) -> bool:
    return "oracle" in config.estimators or (
        config.composite.bandwidth_mode == "shortcut" and config.composite.h_oll is None
        and bool({"composite", "alad"} & set(config.estimators)))


def _fit_replication_cell(
    config: ExperimentConfig,
    batches: List[ObservationBatch],
    grid_x: np.ndarray,
    h_oll: Optional[float],
) -> Dict[str, Any]:
    """Composite and ALAD fits for one (replication, error, m) cell."""
    out: Dict[str, Any] = {}
    if not {"composite", "alad"} & set(config.estimators):
        return out
    settings = config.composite
    k = get_kernel(settings.kernel)
    pilot = fit_pilot(batches, k, settings.pilot_grid_size)
    em = estimate_error_model(batches, pilot, restandardize=settings.restandardize_residuals)
    if "composite" in config.estimators:
        plan, context = plan_composite(batches, settings, grid_x, h_oll=h_oll, pilot=pilot, error_model=em)
        fit = fit_composite(batches, settings, grid_x, plan=plan)
        out["composite"] = fit.global_values
        out["tau_bar"] = plan.grid.tau_bar
    if "alad" in config.estimators:
        h_ref = h_oll if h_oll is not None else settings.h_oll
        if h_ref is None:
            raise ConfigError("ALAD needs a full-data bandwidth (enable the oracle or set h_oll)")
        h_alad = alad_bandwidth(em, h_ref, [b.n for b in batches])
        out["alad"] = fit_alad(batches, grid_x, h_alad, k)
    return out


def run_single_replication(config: ExperimentConfig, replication: int) -> List[Dict[str, Any]]:
    """Generate, split, fit and score one replication for every error law and m.

    Returns:
        One row per (error distribution, m); failed cells carry NaN ASEs and
        the error message in ``status``
    """
    model = get_model(config.model)
    grid_x = model.evaluation_grid(config.n_grid)
    truth = model.mean_fn(grid_x)
    k = get_kernel(config.composite.kernel)
    rows = []

    for e, spec in enumerate(config.errors):
        full = model.generate(config.n, spec, rng_stream(config.seed, replication, e, STAGE_DATA))
        h_oll = config.composite.h_oll
        ase_oracle = np.nan
        status = "ok"
        try:
            if _needs_h_oll(config) and h_oll is None:
                cv_rng = rng_stream(config.seed, replication, e, STAGE_CV)
                h_oll = select_oll_bandwidth(full, grid_x, k, config.composite.oracle_bandwidth, cv_rng)
            if "oracle" in config.estimators:
                ase_oracle = compute_ase(local_linear_ls_curve(full, grid_x, h_oll, k), truth)
        except DCQRError as err:
            logger.warning("Replication %d (%s): oracle failed: %s", replication, spec.label, err)
            status = f"oracle: {err}"

        for m in config.m_values:
            row = {
                "replication": replication,
                "distribution": spec.label,
                "lam": spec.lam,
                "m": m,
                "ase_composite": np.nan,
                "ase_alad": np.nan,
                "ase_oracle": ase_oracle,
                "h_oll": h_oll if h_oll is not None else np.nan,
                "tau_bar": np.nan,
                "status": status,
            }
            if status == "ok":
                try:
                    batches = split_batches(full, m, equal=config.equal_split)
                    fitted = _fit_replication_cell(config, batches, grid_x, h_oll)
                    for name in ("composite", "alad"):
                        if name in fitted:
                            row[f"ase_{name}"] = compute_ase(fitted[name], truth)
                    row["tau_bar"] = fitted.get("tau_bar", np.nan)
                except DCQRError as err:
                    logger.warning("Replication %d (%s, m=%d) failed: %s", replication, spec.label, m, err)
                    row["status"] = str(err)
            rows.append(row)

    logger.info("Replication %d finished", replication)
    return rows


def _map_replications(fn: Callable, config: ExperimentConfig, args: Sequence[Tuple]) -> List:
    """Map fn over argument tuples, in a process pool when threads > 1, in order."""
    if config.threads > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(fn, *zip(*args)))
    return [fn(*a) for a in args]


def _single_threaded(config: ExperimentConfig) -> ExperimentConfig:
    return replace(config, composite=replace(config.composite, threads=1))


def summarize_rase(log: pd.DataFrame, estimators: Sequence[str]) -> pd.DataFrame:
    """Mean and standard deviation of RASE per (distribution, lam, m, pair)."""
    records = []
    for (dist, lam, m), group in log.groupby(["distribution", "lam", "m"], sort=False):
        ok = group[group["status"] == "ok"]
        for first, second in ESTIMATOR_PAIRS:
            if first not in estimators or second not in estimators:
                continue
            ratios = []
            for g1, g2 in zip(ok[f"ase_{first}"], ok[f"ase_{second}"]):
                try:
                    ratios.append(compute_rase(g1, g2))
                except DivideByZero:
                    ratios.append(np.nan)
            ratios = np.asarray(ratios, dtype=float)
            finite = ratios[np.isfinite(ratios)]
            records.append({
                "distribution": dist,
                "lam": lam,
                "m": m,
                "pair": f"{first}/{second}",
                "mean_rase": float(np.mean(finite)) if finite.size else np.nan,
                "std_rase": float(np.std(finite, ddof=1)) if finite.size > 1 else 0.0 if finite.size else np.nan,
                "replications_ok": int(finite.size),
                "replications_failed": int(len(group) - finite.size),
            })
    return pd.DataFrame.from_records(
        records,
        columns=["distribution", "lam", "m", "pair", "mean_rase", "std_rase",
                 "replications_ok", "replications_failed"],
    )


def run_replications(config: ExperimentConfig) -> ReplicationReport:
    """Run every replication and reduce the results in replication order.

    Args:
        config: Simulation design

    Returns:
        ReplicationReport with the RASE table and the per-replication log
    """
    logger.info("Running %d replications of the %s model (n=%d, m=%s, %d error laws)",
                config.replications, config.model, config.n, list(config.m_values), len(config.errors))
    worker_config = _single_threaded(config)
    per_rep = _map_replications(
        run_single_replication, config, [(worker_config, r) for r in range(config.replications)])
    log = pd.DataFrame.from_records([row for rows in per_rep for row in rows])
    table = summarize_rase(log, config.estimators)
    failed = int((log["status"] != "ok").sum())
    if failed:
        logger.warning("%d of %d replication cells failed", failed, len(log))
    return ReplicationReport(table=table, log=log, config=config)


def _bias_replication(config: ExperimentConfig, m: int, replication: int) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    model = get_model(config.model)
    grid_x = model.evaluation_grid(config.n_grid)
    spec = config.error
    k = get_kernel(config.composite.kernel)
    full = model.generate(config.n, spec, rng_stream(config.seed, replication, 0, STAGE_DATA))
    try:
        h_oll = config.composite.h_oll
        if h_oll is None:
            h_oll = select_oll_bandwidth(full, grid_x, k, config.composite.oracle_bandwidth,
                                         rng_stream(config.seed, replication, 0, STAGE_CV))
        batches = split_batches(full, m, equal=config.equal_split)
        fitted = _fit_replication_cell(replace(config, estimators=("composite", "alad")), batches, grid_x, h_oll)
    except DCQRError as err:
        logger.warning("Bias replication %d failed: %s", replication, err)
        return None
    return fitted["composite"], fitted["alad"]


def run_bias_study(config: ExperimentConfig, m: int) -> BiasStudy:
    """Monte Carlo bias of the composite and ALAD curves under the first error law.

    ALAD targets the conditional median, so its bias approaches
    sigma(x) * F^{-1}(0.5); the composite cancels the quantile bias.
    """
    if config.equal_split and config.n % m:
        raise ConfigError(f"n={config.n} must be divisible by m={m}")
    model = get_model(config.model)
    grid_x = model.evaluation_grid(config.n_grid)
    truth = model.mean_fn(grid_x)

    worker_config = _single_threaded(config)
    results = _map_replications(
        _bias_replication, config, [(worker_config, m, r) for r in range(config.replications)])
    ok = [r for r in results if r is not None]
    if not ok:
        raise DCQRError("every bias replication failed")

    bias_composite = np.mean([c for c, _ in ok], axis=0) - truth
    bias_alad = np.mean([a for _, a in ok], axis=0) - truth
    analytic = float(np.mean(np.abs(model.scale_fn(grid_x) * config.error.quantile(0.5))))
    logger.info("Bias study: |bias| composite %.4g, ALAD %.4g (analytic ALAD %.4g)",
                float(np.mean(np.abs(bias_composite))), float(np.mean(np.abs(bias_alad))), analytic)
    return BiasStudy(
        grid_x=grid_x,
        bias_composite=bias_composite,
        bias_alad=bias_alad,
        mean_abs_bias_composite=float(np.mean(np.abs(bias_composite))),
        mean_abs_bias_alad=float(np.mean(np.abs(bias_alad))),
        analytic_alad_bias=analytic,
        replications_ok=len(ok),
    )


def rate_study_batches(n: int) -> int:
    """m = ceil(n^0.2)."""
    return int(math.ceil(n ** 0.2 - 1e-12))


def run_rate_study(config: ExperimentConfig, ns: Sequence[int]) -> RateStudy:
    """Mean composite ASE for each n with m = ceil(n^0.2) and its log-log slope.

    Batches are split as equally as possible since n is rarely divisible by m.
    """
    if len(ns) < 2:
        raise ConfigError("the rate study needs at least two sample sizes")
    m_values, mean_ase = [], []
    for n in ns:
        m = rate_study_batches(n)
        sub = replace(config, n=int(n), m_values=(m,), equal_split=False,
                      estimators=("composite",))
        report = run_replications(sub)
        ases = report.log.loc[report.log["status"] == "ok", "ase_composite"].to_numpy(dtype=float)
        if ases.size == 0:
            raise DCQRError(f"every replication failed at n={n}")
        m_values.append(m)
        mean_ase.append(float(np.mean(ases)))
        logger.info("Rate study: n=%d m=%d mean ASE %.4g", n, m, mean_ase[-1])

    slope = float(np.polyfit(np.log(np.asarray(ns, dtype=float)), np.log(mean_ase), 1)[0])
    return RateStudy(ns=tuple(int(n) for n in ns), m_values=tuple(m_values),
                     mean_ase=np.asarray(mean_ase), slope=slope)
