"""dcqr command-line entry point: simulate, fit, predict and evaluate."""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from dcqr.errors import ConfigError, DatasetError, DCQRError
from dcqr.estimator import (
    aggregate_local_values,
    alad_bandwidth,
    fit_alad,
    fit_composite,
    merge_batches,
    select_oll_bandwidth,
)
from dcqr.kernels import get_kernel
from dcqr.local_quantile import local_linear_ls_curve
from experiments.harness import STAGE_CV, rng_stream, run_replications
from experiments.outliers import evaluate_curves, run_outlier_protocol
from export.charts import create_fit_chart, create_rase_chart, save_figure
from export.exporter import (
    CURVE_FILE,
    LOCAL_VALUES_FILE,
    PLAN_FILE,
    format_metrics,
    format_rase_table,
    read_curve,
    read_local_values,
    read_plan,
    write_curve,
    write_diagnostics,
    write_local_values,
    write_metrics,
    write_plan,
    write_predictions,
    write_report,
)
from ingest.dataset import DatasetFile, load_batches, load_dataset
from ingest.run_config import (
    RunConfig,
    apply_overrides,
    load_preset,
    load_run_config,
    to_experiment_config,
    write_resolved_config,
)

logger = logging.getLogger("dcqr")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--preset", help="Bundled preset name (see presets/)")
    common.add_argument("--seed", type=int, help="Override the configured seed")
    common.add_argument("--threads", type=int, help="Worker processes")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--svg", action="store_true", help="Also write a plotly figure")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="dcqr",
        description="Divide-and-conquer composite quantile regression for the conditional mean",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="Run the Monte Carlo replication harness")

    fit = sub.add_parser("fit", parents=[common], help="Fit the composite estimator to a CSV dataset")
    fit.add_argument("--data", help="Training CSV (x, y[, batch_id])")
    fit.add_argument("--m", type=int, help="Number of batches when the data has no batch_id")

    predict = sub.add_parser("predict", parents=[common], help="Re-aggregate a saved plan and local values")
    predict.add_argument("--plan-dir", required=True, help="Directory holding plan.csv and local_values.csv")
    predict.add_argument("--data", help="CSV with x column to predict at")

    evaluate = sub.add_parser("evaluate", parents=[common], help="RMSE/MAE on a test set")
    evaluate.add_argument("--fit-dir", help="Directory holding curve.csv")
    evaluate.add_argument("--train", help="Training CSV for the outlier protocol")
    evaluate.add_argument("--test", help="Test CSV (x, y)")
    evaluate.add_argument("--m", type=int, help="Number of training batches")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file or preset, forced to the subcommand's mode, then CLI overrides."""
    if args.config and args.preset:
        raise ConfigError("use either --config or --preset, not both")
    if args.config:
        config = load_run_config(args.config)
    elif args.preset:
        config = load_preset(args.preset)
    else:
        config = RunConfig(mode=args.command)
    if config.mode != args.command:
        config = replace(config, mode=args.command)
    return apply_overrides(config, seed=args.seed, threads=args.threads, out=args.out)


def _output_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(config: RunConfig, path: Optional[str]) -> DatasetFile:
    if not path:
        raise ConfigError("no dataset given (pass --data/--train/--test or set data.path)")
    return DatasetFile(Path(path), delimiter=config.data.delimiter, header=config.data.header)


def cmd_simulate(config: RunConfig, svg: bool = False) -> int:
    """Run the replication harness and write the RASE report."""
    experiment = to_experiment_config(config)
    out = _output_dir(config)
    write_resolved_config(config, out / "resolved_config.yml")

    report = run_replications(experiment)
    write_report(report.table, report.log, out)
    print(format_rase_table(report.table), end="")
    if svg and not report.table.empty:
        save_figure(create_rase_chart(report.table), out / "rase_table.svg")
    if report.failures:
        logger.warning("%d replication cells failed; see replications_log.csv", report.failures)
    return EXIT_OK


def cmd_fit(config: RunConfig, data: Optional[str], m: Optional[int], svg: bool = False) -> int:
    """Fit the composite (and requested competitors) and write the fit artifacts."""
    dataset = _dataset(config, data or config.data.path)
    m = m if m is not None else config.data.m
    if m is None:
        m = 1
    batches = load_batches(dataset, m, config.data.batching)
    merged = merge_batches(batches)
    grid_x = np.linspace(float(np.min(merged.xs)), float(np.max(merged.xs)), config.n_grid)
    settings = config.composite_settings
    k = get_kernel(settings.kernel)
    cv_rng = rng_stream(config.seed, 0, 0, STAGE_CV)

    out = _output_dir(config)
    write_resolved_config(config, out / "resolved_config.yml")

    fit = fit_composite(batches, settings, grid_x, rng=cv_rng)
    curves: Dict[str, np.ndarray] = {"composite": fit.global_values}
    diagnostics = dict(fit.diagnostics)

    competitors = {"alad", "oracle"} & set(config.estimators)
    if competitors:
        h_oll = fit.plan.h_oll
        if h_oll is None:
            h_oll = settings.h_oll or select_oll_bandwidth(merged, grid_x, k, settings.oracle_bandwidth, cv_rng)
        if "alad" in competitors:
            h_alad = alad_bandwidth(fit.context.error_model, h_oll, [b.n for b in batches])
            curves["alad"] = fit_alad(batches, grid_x, h_alad, k)
            diagnostics["h_alad"] = h_alad
        if "oracle" in competitors:
            curves["oracle"] = local_linear_ls_curve(merged, grid_x, h_oll, k)
        diagnostics["h_oll"] = h_oll

    write_plan(fit.plan, out)
    write_local_values(grid_x, fit.local_values, out)
    write_curve(grid_x, curves, out)
    write_diagnostics(diagnostics, out)
    if svg:
        save_figure(create_fit_chart(merged.xs, merged.ys, grid_x, curves), out / "curve.svg")
    logger.info("Fit artifacts written to %s", out)
    return EXIT_OK


def cmd_predict(config: RunConfig, plan_dir: str, data: Optional[str]) -> int:
    """Re-aggregate saved local values; optionally interpolate at new covariates."""
    plan_dir = Path(plan_dir)
    plan = read_plan(plan_dir / PLAN_FILE)
    grid_x, local_values = read_local_values(plan_dir / LOCAL_VALUES_FILE)
    if local_values.shape[:2] != (plan.m, plan.J):
        raise DatasetError(
            f"local values have shape {local_values.shape[:2]}, plan expects {(plan.m, plan.J)}")
    curve = aggregate_local_values(plan.weights, local_values)

    out = _output_dir(config)
    write_curve(grid_x, {"composite": curve}, out)
    if data:
        frame = load_dataset(DatasetFile(Path(data), delimiter=config.data.delimiter,
                                         header=config.data.header))
        xs = frame["x"].to_numpy(dtype=float)
        write_predictions(xs, {"composite": np.interp(xs, grid_x, curve)}, out)
    return EXIT_OK


def cmd_evaluate(
    config: RunConfig,
    fit_dir: Optional[str],
    train: Optional[str],
    test: Optional[str],
    m: Optional[int],
) -> int:
    """RMSE/MAE of saved curves, or the full outlier tagging/scaling protocol."""
    test_set = merge_batches(load_batches(_dataset(config, test or config.data.test_path), 1))
    out = _output_dir(config)
    write_resolved_config(config, out / "resolved_config.yml")

    if fit_dir:
        grid_x, curves = read_curve(Path(fit_dir) / CURVE_FILE)
        metrics = evaluate_curves(curves, grid_x, test_set)
    else:
        m = m if m is not None else (config.data.m or 1)
        train_batches = load_batches(_dataset(config, train or config.data.path), m, config.data.batching)
        metrics = run_outlier_protocol(
            train_batches,
            test_set,
            config.composite_settings,
            gammas=config.evaluate.gammas,
            scales=config.evaluate.scales,
            n_grid=config.n_grid,
            rng=rng_stream(config.seed, 0, 0, STAGE_CV),
            estimators=config.estimators,
        )
    write_metrics(metrics, out)
    print(format_metrics(metrics), end="")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)

    try:
        config = resolve_config(args)
        if args.command == "simulate":
            return cmd_simulate(config, svg=args.svg)
        if args.command == "fit":
            return cmd_fit(config, args.data, args.m, svg=args.svg)
        if args.command == "predict":
            return cmd_predict(config, args.plan_dir, args.data)
        return cmd_evaluate(config, args.fit_dir, args.train, args.test, args.m)
    except (ConfigError, DatasetError, FileNotFoundError) as err:
        logger.error("%s", err)
        return EXIT_VALIDATION
    except DCQRError as err:
        logger.error("Estimation failed: %s", err)
        return EXIT_ESTIMATION
    except ValueError as err:
        logger.error("Invalid input: %s", err)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
