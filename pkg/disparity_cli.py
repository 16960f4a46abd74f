#!/usr/bin/env python3
"""
Disparity decomposition command line

Subcommands:
    decompose    tau / delta / zeta table with bootstrap intervals
    sensitivity  partial R^2 grid, contours, covariate benchmarks and crossing summary
    simulate     data set drawn from a structural model file
    oracle       true tau / delta / zeta of a structural model
    validate     config against data, positivity diagnostics

Exit codes: 0 success, 2 configuration or input error, 3 estimation error,
4 positivity violation, 1 anything unexpected.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

# Try to load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

from decomposition_pipeline import ESTIMATOR_CHOICES, DisparityDecompositionPipeline
from utils.analysis_config import load_analysis_config, validate_config
from utils.data_table import load_table
from utils.errors import ConfigurationError, DisparityError
from utils.oracle import DEFAULT_N_MC, OracleMethod, oracle_truth
from utils.result_writer import ResultWriter, RunManifest, print_decomposition_table, print_sensitivity_summary
from utils.sensitivity import (DEFAULT_R2_MAX, DEFAULT_RESOLUTION, DEFAULT_VALUE_CONTOURS, SensitivityInputs,
                               sensitivity_grid)
from utils.structural_model import generate, load_structural_model

logger = logging.getLogger("disparity_cli")


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or value == "":
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"Environment variable {name}={value!r} is not an integer")


def _options(args: argparse.Namespace, *names: str) -> dict:
    return {name: getattr(args, name) for name in names if hasattr(args, name)}


def _load_pipeline(args: argparse.Namespace) -> DisparityDecompositionPipeline:
    pipeline = DisparityDecompositionPipeline.from_files(args.config, args.data, seed=args.seed,
                                                         n_jobs=args.n_jobs)
    pipeline.apply_options(trim_pct=args.trim_pct)
    pipeline.validate(strict=args.strict)
    pipeline.run_estimators(args.estimator, args.differential)
    return pipeline


def cmd_decompose(args: argparse.Namespace) -> int:
    logger.info("=== Disparity Decomposition ===")
    pipeline = _load_pipeline(args)
    pipeline.run_bootstrap(args.bootstrap, level=args.level, stratified=not args.unstratified)

    writer = ResultWriter(args.out_dir)
    frame = pipeline.write_decomposition(writer, level=args.level)
    writer.write_json({"warnings": pipeline.warnings,
                       "diagnostics": [d.model_dump() for d in pipeline.binding.diagnostics]},
                      "warnings.json")
    writer.write_manifest(RunManifest.create(
        "decompose", config_path=str(args.config), data_path=str(args.data), seed=args.seed,
        bootstrap_B=args.bootstrap,
        options=_options(args, "estimator", "differential", "level", "strict", "trim_pct", "unstratified")))

    print_decomposition_table(frame, pipeline.config.reference_level, level=args.level)
    summary = pipeline.get_summary()
    logger.info(f"✅ Decomposition finished: {summary['estimates_written']} rows, "
                f"{summary['warnings']} warning(s)")
    return 0


def cmd_sensitivity(args: argparse.Namespace) -> int:
    logger.info("=== Sensitivity Analysis ===")
    writer = ResultWriter(args.out_dir)
    contours = args.value_contours if args.value_contours is not None else list(DEFAULT_VALUE_CONTOURS)

    if args.inputs:
        try:
            with open(args.inputs, "r", encoding="utf-8") as f:
                inputs = SensitivityInputs(**json.load(f))
        except (OSError, TypeError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Could not read sensitivity inputs {args.inputs}: {e}") from e
        grid = sensitivity_grid(inputs, resolution=args.grid_n, r2_max=args.r2_max, value_contours=contours)
        frame = grid.to_frame()
        frame.insert(0, "group", inputs.group or "")
        writer.write_table(frame, "sensitivity_grid")
        summaries = [grid.summary()]
        writer.write_json({"groups": summaries, "warnings": []}, "sensitivity_summary.json")
        writer.write_manifest(RunManifest.create(
            "sensitivity", seed=args.seed,
            options={**_options(args, "r2_max", "grid_n"), "inputs": str(args.inputs),
                     "value_contours": contours}))
        print_sensitivity_summary(summaries)
        return 0

    if not (args.config and args.data):
        raise ConfigurationError("sensitivity needs --config and --data, or --inputs")
    pipeline = _load_pipeline(args)
    pipeline.run_bootstrap(args.bootstrap, level=args.level, stratified=not args.unstratified)
    mediator_weights = None
    if args.mediator_weights:
        try:
            mediator_weights = {str(k): float(v) for k, v in json.loads(args.mediator_weights).items()}
        except (json.JSONDecodeError, AttributeError, TypeError, ValueError) as e:
            raise ConfigurationError(f"--mediator-weights is not a JSON object of numbers: {e}") from e
    pipeline.run_sensitivity(r2_max=args.r2_max, grid_n=args.grid_n, value_contours=contours,
                             mediator_weights=mediator_weights)
    pipeline.write_sensitivity(writer)
    writer.write_manifest(RunManifest.create(
        "sensitivity", config_path=str(args.config), data_path=str(args.data), seed=args.seed,
        bootstrap_B=args.bootstrap,
        options={**_options(args, "estimator", "differential", "level", "strict", "trim_pct", "r2_max",
                            "grid_n", "unstratified", "mediator_weights"), "value_contours": contours}))
    print_sensitivity_summary(pipeline.sensitivity_summaries)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    logger.info("=== Simulating Data ===")
    model = load_structural_model(args.model)
    table = generate(model, args.n, seed=args.seed, expose_unobserved=args.expose_unobserved)
    writer = ResultWriter(args.out_dir)
    writer.write_csv(table.to_frame(), args.output)
    writer.write_manifest(RunManifest.create(
        "simulate", model_path=str(args.model), seed=args.seed,
        options=_options(args, "n", "expose_unobserved", "output")))
    logger.info(f"✅ Wrote {table.n_rows} simulated rows to {Path(args.out_dir) / args.output}")
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    logger.info("=== Oracle Truth ===")
    model = load_structural_model(args.model)
    if args.method == "auto":
        method = OracleMethod.EXACT_SUM if model.is_fully_discrete else OracleMethod.MC_INTERVENTIONAL
    else:
        method = OracleMethod.EXACT_SUM if args.method == "exact" else OracleMethod.MC_INTERVENTIONAL
    results = oracle_truth(model, method, groups=args.group, n_mc=args.n_mc, seed=args.seed)

    writer = ResultWriter(args.out_dir)
    writer.write_json({"model": model.spec.name, "reference": model.reference, "method": method.value,
                       "results": [result.to_dict() for result in results]}, "oracle.json")
    writer.write_manifest(RunManifest.create(
        "oracle", model_path=str(args.model), seed=args.seed,
        options={**_options(args, "n_mc", "group"), "method": method.value}))
    for result in results:
        logger.info(f"✅ group {result.group}: tau={result.tau:.6g} delta={result.delta:.6g} "
                    f"zeta={result.zeta:.6g} ({result.method.value})")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    logger.info("=== Validating Config ===")
    config = load_analysis_config(args.config)
    table = load_table(args.data, config.table_schema())
    binding = validate_config(config, table, strict=args.strict)
    writer = ResultWriter(args.out_dir)
    writer.write_json({
        "valid": binding.is_valid,
        "n_rows": table.n_rows,
        "dropped_rows": table.dropped_rows,
        "group_counts": binding.group_counts,
        "diagnostics": [d.model_dump() for d in binding.diagnostics],
    }, "validation.json")
    writer.write_manifest(RunManifest.create(
        "validate", config_path=str(args.config), data_path=str(args.data),
        options=_options(args, "strict")))
    status = "✅ valid" if binding.is_valid else f"⚠️ {len(binding.diagnostics)} diagnostic(s)"
    logger.info(f"Validation result: {status}")
    return 0


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=_env_int("DISPARITY_SEED", 0), help="Master random seed.")
    parser.add_argument("--out-dir", type=Path, default=Path(os.getenv("DISPARITY_OUT_DIR", "outputs")),
                        help="Directory for output files.")
    parser.add_argument("--log-level", default=os.getenv("DISPARITY_LOG_LEVEL", "INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level.")


def _add_analysis(parser: argparse.ArgumentParser, data_required: bool = True):
    parser.add_argument("--config", type=Path, required=data_required, help="Analysis config JSON.")
    parser.add_argument("--data", type=Path, required=data_required, help="Input CSV with a header row.")
    parser.add_argument("--bootstrap", type=int, default=_env_int("DISPARITY_BOOTSTRAP_B", 1000),
                        help="Bootstrap replicates B (0 disables intervals).")
    parser.add_argument("--level", type=float, default=0.95, help="Confidence level of percentile intervals.")
    parser.add_argument("--differential", action="store_true",
                        help="Also run the weighting estimator with group x mediator interactions.")
    parser.add_argument("--estimator", choices=ESTIMATOR_CHOICES, default="weighting", help="Estimator variant(s).")
    parser.add_argument("--strict", action="store_true", help="Positivity diagnostics become errors (exit 4).")
    parser.add_argument("--trim-pct", type=float, default=None, help="Cap weights at this percentile.")
    parser.add_argument("--unstratified", action="store_true", help="Resample rows without group strata.")
    parser.add_argument("--n-jobs", type=int, default=_env_int("DISPARITY_N_JOBS", 1),
                        help="Worker threads for bootstrap replicates.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disparity", description="Causal decomposition of group disparities.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    decompose = sub.add_parser("decompose", help="Estimate tau, delta and zeta with bootstrap intervals.")
    _add_analysis(decompose)
    _add_common(decompose)
    decompose.set_defaults(handler=cmd_decompose)

    sensitivity = sub.add_parser("sensitivity", help="Partial R^2 sensitivity grid and benchmarks.")
    _add_analysis(sensitivity, data_required=False)
    _add_common(sensitivity)
    sensitivity.add_argument("--r2-max", type=float, default=DEFAULT_R2_MAX, help="Upper end of both R^2 axes.")
    sensitivity.add_argument("--grid-n", type=int, default=DEFAULT_RESOLUTION, help="Grid points per axis.")
    sensitivity.add_argument("--value-contours", type=float, nargs="*", default=None,
                             help="Adjusted-delta values to trace as contours.")
    sensitivity.add_argument("--mediator-weights", default=None,
                             help='JSON object of mediator score weights, e.g. \'{"d": 1, "m": 0}\'.')
    sensitivity.add_argument("--inputs", type=Path, default=None,
                             help="JSON with se_gamma_dm, df, mediator_gap, delta, zeta (skips data).")
    sensitivity.set_defaults(handler=cmd_sensitivity)

    simulate = sub.add_parser("simulate", help="Draw a data set from a structural model file.")
    simulate.add_argument("--model", type=Path, required=True, help="Structural model JSON.")
    simulate.add_argument("--n", type=int, required=True, help="Number of rows.")
    simulate.add_argument("--output", default="simulated_data.csv", help="Output CSV file name.")
    simulate.add_argument("--expose-unobserved", action="store_true", help="Include unobserved variables.")
    _add_common(simulate)
    simulate.set_defaults(handler=cmd_simulate)

    oracle = sub.add_parser("oracle", help="True tau, delta and zeta of a structural model.")
    oracle.add_argument("--model", type=Path, required=True, help="Structural model JSON.")
    oracle.add_argument("--method", choices=["auto", "exact", "mc"], default="auto",
                        help="Exact summation (discrete models) or interventional Monte Carlo.")
    oracle.add_argument("--n-mc", type=int, default=DEFAULT_N_MC, help="Monte Carlo units per group.")
    oracle.add_argument("--group", action="append", default=None,
                        help="Comparison group (repeatable; default every non-reference level).")
    _add_common(oracle)
    oracle.set_defaults(handler=cmd_oracle)

    validate = sub.add_parser("validate", help="Check a config against data.")
    validate.add_argument("--config", type=Path, required=True, help="Analysis config JSON.")
    validate.add_argument("--data", type=Path, required=True, help="Input CSV with a header row.")
    validate.add_argument("--strict", action="store_true", help="Positivity diagnostics become errors.")
    _add_common(validate)
    validate.set_defaults(handler=cmd_validate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        parser = build_parser()
    except ConfigurationError as e:
        logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        logger.error(f"❌ {e}")
        return e.exit_code
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr
    )
    try:
        return args.handler(args)
    except DisparityError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Unexpected error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
