"""Versioned YAML run configuration, presets and CLI overrides."""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from dcqr.constants import DEFAULT_GAMMAS, DEFAULT_N_GRID, DEFAULT_REPLICATIONS, DEFAULT_SCALES
from dcqr.errors import ConfigError
from dcqr.estimator import CompositeConfig
from experiments.distributions import ErrorDistributionSpec
from experiments.harness import ESTIMATORS, ExperimentConfig

from .dataset import BATCHING_MODES

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("simulate", "fit", "predict", "evaluate")
PRESET_DIR = Path(__file__).parent.parent / "presets"


@dataclass(frozen=True)
class ExperimentSettings:
    model: str = "homoscedastic"
    n: int = 10000
    m_values: Tuple[int, ...] = (5,)
    replications: int = DEFAULT_REPLICATIONS
    errors: Tuple[ErrorDistributionSpec, ...] = (ErrorDistributionSpec(),)
    equal_split: bool = True


@dataclass(frozen=True)
class DataSettings:
    path: Optional[str] = None
    test_path: Optional[str] = None
    delimiter: str = ","
    header: bool = True
    m: Optional[int] = None
    batching: str = "contiguous"

    def __post_init__(self):
        if self.batching not in BATCHING_MODES:
            raise ConfigError(f"data.batching must be one of {BATCHING_MODES}, got '{self.batching}'")
        if self.m is not None and self.m < 1:
            raise ConfigError(f"data.m must be positive, got {self.m}")


@dataclass(frozen=True)
class EvaluateSettings:
    gammas: Tuple[float, ...] = DEFAULT_GAMMAS
    scales: Tuple[Optional[float], ...] = DEFAULT_SCALES

    def __post_init__(self):
        if any(g <= 0 for g in self.gammas):
            raise ConfigError(f"evaluate.gammas must be positive, got {list(self.gammas)}")
        if any(c is not None and c <= 0 for c in self.scales):
            raise ConfigError("evaluate.scales must be positive or null (remove)")


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs; validated on construction."""

    mode: str = "simulate"
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    threads: int = 1
    output_dir: str = "out"
    n_grid: int = DEFAULT_N_GRID
    estimators: Tuple[str, ...] = ESTIMATORS
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    data: DataSettings = field(default_factory=DataSettings)
    evaluate: EvaluateSettings = field(default_factory=EvaluateSettings)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"Unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")
        if self.n_grid < 2:
            raise ConfigError(f"n_grid must be at least 2, got {self.n_grid}")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown or not self.estimators:
            raise ConfigError(f"estimators must be a nonempty subset of {ESTIMATORS}")
        if self.mode == "simulate":
            to_experiment_config(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """Build from parsed YAML; unknown keys at any level are rejected."""
        if not isinstance(data, dict):
            raise ConfigError("Configuration must be a mapping")
        _check_keys("", data, {f.name for f in fields(cls)})
        try:
            kwargs = {k: v for k, v in data.items()
                      if k not in ("composite", "experiment", "data", "evaluate")}
            if "estimators" in kwargs:
                kwargs["estimators"] = tuple(kwargs["estimators"])
            kwargs["composite"] = _section(CompositeConfig, data.get("composite"), "composite",
                                           exclude={"threads"})
            kwargs["experiment"] = _experiment_section(data.get("experiment"))
            kwargs["data"] = _section(DataSettings, data.get("data"), "data")
            kwargs["evaluate"] = _evaluate_section(data.get("evaluate"))
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as err:
            raise ConfigError(f"Invalid configuration: {err}") from err

    def to_dict(self) -> Dict[str, Any]:
        """Plain mapping for YAML emission (the resolved configuration)."""
        composite = asdict(self.composite)
        composite.pop("threads")
        experiment = asdict(self.experiment)
        experiment["m_values"] = list(self.experiment.m_values)
        experiment["errors"] = [spec.to_dict() for spec in self.experiment.errors]
        return {
            "schema_version": self.schema_version,
            "mode": self.mode,
            "seed": self.seed,
            "threads": self.threads,
            "output_dir": self.output_dir,
            "n_grid": self.n_grid,
            "estimators": list(self.estimators),
            "composite": composite,
            "experiment": experiment,
            "data": asdict(self.data),
            "evaluate": {"gammas": list(self.evaluate.gammas), "scales": list(self.evaluate.scales)},
        }

    @property
    def composite_settings(self) -> CompositeConfig:
        """Composite settings with the run's thread count."""
        return replace(self.composite, threads=self.threads)


def _check_keys(section: str, data: Dict[str, Any], allowed: set) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        prefix = f"{section}." if section else ""
        raise ConfigError(f"Unknown configuration key '{prefix}{unknown[0]}'")


def _section(cls, data: Optional[Dict[str, Any]], name: str, exclude: frozenset = frozenset()):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    _check_keys(name, data, {f.name for f in fields(cls)} - set(exclude))
    return cls(**data)


def _experiment_section(data: Optional[Dict[str, Any]]) -> ExperimentSettings:
    if data is None:
        return ExperimentSettings()
    if not isinstance(data, dict):
        raise ConfigError("'experiment' must be a mapping")
    _check_keys("experiment", data, {f.name for f in fields(ExperimentSettings)})
    values = dict(data)
    if "m_values" in values:
        values["m_values"] = tuple(int(m) for m in values["m_values"])
    if "errors" in values:
        raw = values["errors"]
        if isinstance(raw, dict):
            raw = [raw]
        values["errors"] = tuple(ErrorDistributionSpec.from_dict(entry) for entry in raw)
    return ExperimentSettings(**values)


def _evaluate_section(data: Optional[Dict[str, Any]]) -> EvaluateSettings:
    if data is None:
        return EvaluateSettings()
    if not isinstance(data, dict):
        raise ConfigError("'evaluate' must be a mapping")
    _check_keys("evaluate", data, {"gammas", "scales"})
    values = {}
    if "gammas" in data:
        values["gammas"] = tuple(float(g) for g in data["gammas"])
    if "scales" in data:
        values["scales"] = tuple(None if c is None else float(c) for c in data["scales"])
    return EvaluateSettings(**values)


def to_experiment_config(config: RunConfig) -> ExperimentConfig:
    """Simulation design from a run configuration."""
    exp = config.experiment
    return ExperimentConfig(
        model=exp.model,
        n=exp.n,
        m_values=exp.m_values,
        errors=exp.errors,
        replications=exp.replications,
        seed=config.seed,
        estimators=config.estimators,
        composite=config.composite,
        n_grid=config.n_grid,
        threads=config.threads,
        equal_split=exp.equal_split,
    )


def load_run_config(path) -> RunConfig:
    """Parse and validate a YAML run configuration.

    Raises:
        ConfigError: Malformed YAML, unknown keys or invalid values
        FileNotFoundError: If the file does not exist
    """
    path = Path(path)
    with open(path, "r") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: invalid YAML: {err}") from err
    config = RunConfig.from_dict(data or {})
    logger.info("Loaded %s configuration from %s", config.mode, path)
    return config


def list_presets() -> List[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yml"))


def load_preset(name: str) -> RunConfig:
    """Load a bundled preset by name, e.g. ``load_preset("homoscedastic_normal")``."""
    preset_path = PRESET_DIR / f"{name.lower()}.yml"
    if not preset_path.exists():
        raise ConfigError(f"Unknown preset '{name}' (available: {', '.join(list_presets())})")
    return load_run_config(preset_path)


def apply_overrides(
    config: RunConfig,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    out: Optional[str] = None,
) -> RunConfig:
    """Apply --seed/--threads/--out on top of a loaded configuration."""
    changes: Dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = int(seed)
    if threads is not None:
        changes["threads"] = int(threads)
    if out is not None:
        changes["output_dir"] = str(out)
    return replace(config, **changes) if changes else config


def write_resolved_config(config: RunConfig, path) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
    return path
