"""Command-line entry point: ``labelbias <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from . import experiments
from .artifacts import ArtifactWriter
from .config import ExperimentConfig, load

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


def _parse_share(text: str) -> tuple[str, float]:
    group, sep, value = text.partition("=")
    if not sep or not group:
        raise argparse.ArgumentTypeError(f"expected GROUP=SHARE, got {text!r}")
    try:
        return group, float(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"share for {group} is not a number: {value!r}") from exc


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML/JSON config merged over the defaults")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--n", type=int, help="sample size for this command")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labelbias",
        description="Label bias in proxy-outcome regression and measurement-model corrections",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    common = _common()

    props = commands.add_parser(
        "verify-props", parents=[common], help="check the proxy-regression identities"
    )
    props.set_defaults(func=cmd_verify_props)

    sweep = commands.add_parser(
        "beta-sweep", parents=[common], help="accuracy and disparity across beta"
    )
    sweep.add_argument("--mode", choices=["filtering", "smoothing"])
    sweep.set_defaults(func=cmd_beta_sweep)

    misspec = commands.add_parser(
        "misspec-sweep", parents=[common], help="prior misspecification sweep"
    )
    misspec.add_argument("--which", choices=["beta", "gamma"])
    misspec.add_argument("--mode", choices=["filtering", "smoothing"])
    misspec.set_defaults(func=cmd_misspec_sweep)

    diabetes = commands.add_parser(
        "diabetes", parents=[common], help="threshold model vs logistic regression"
    )
    diabetes.add_argument("--threshold", type=float, help="decision threshold for accuracy/PPV/NPV")
    diabetes.add_argument("--synthetic", action="store_true", help="simulate the diagnosis data")
    diabetes.add_argument("--data", type=Path, help="CSV with covariates, diagnosis and group")
    diabetes.add_argument("--schema", type=Path, help="JSON schema sidecar for --data")
    diabetes.add_argument("--spec", type=Path, help="threshold spec JSON from 'calibrate'")
    diabetes.set_defaults(func=cmd_diabetes)

    calibrate = commands.add_parser(
        "calibrate", parents=[common], help="solve base rate and thresholds"
    )
    calibrate.add_argument("--total-rate", type=float, help="overall true prevalence")
    calibrate.add_argument(
        "--share",
        type=_parse_share,
        action="append",
        metavar="GROUP=SHARE",
        help="undiagnosed share for a group (repeatable)",
    )
    calibrate.set_defaults(func=cmd_calibrate)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    section = {
        "verify-props": "props",
        "beta-sweep": "sweep",
        "misspec-sweep": "misspec",
        "diabetes": "diabetes",
    }.get(args.command)
    if args.n is not None and section:
        overrides.setdefault(section, {})["n"] = args.n
    if getattr(args, "which", None):
        overrides.setdefault("misspec", {})["which"] = args.which

    diabetes: Dict[str, Any] = {}
    if getattr(args, "threshold", None) is not None:
        diabetes["decision_threshold"] = args.threshold
    if getattr(args, "spec", None) is not None:
        diabetes["spec_path"] = str(args.spec)
    if getattr(args, "data", None) is not None:
        diabetes.update(synthetic=False, data_path=str(args.data))
    if getattr(args, "schema", None) is not None:
        diabetes["schema_path"] = str(args.schema)
    if getattr(args, "synthetic", False):
        diabetes["synthetic"] = True
    if getattr(args, "total_rate", None) is not None:
        diabetes["total_rate"] = args.total_rate
    if getattr(args, "share", None):
        diabetes["shares"] = dict(args.share)
    if diabetes:
        overrides.setdefault("diabetes", {}).update(diabetes)
    return overrides


def cmd_verify_props(
    config: ExperimentConfig, writer: ArtifactWriter, args: argparse.Namespace
) -> int:
    report = experiments.verify_props(config)
    writer.write_table("props.csv", report.rows)
    if len(report.skipped):
        writer.write_table("props_skipped.csv", report.skipped)
    if not report.passed:
        failed = report.rows[~report.rows["passed"]]
        for row in failed.itertuples():
            log.error(
                "%s (%s) failed at beta=%s gamma=%s alpha=%s: delta %.3g > %.3g",
                row.proposition,
                row.check,
                row.beta,
                row.gamma,
                row.alpha,
                row.delta,
                row.tolerance,
            )
        return EXIT_CHECK_FAILED
    log.info("All proposition checks passed")
    return EXIT_OK


def cmd_beta_sweep(
    config: ExperimentConfig, writer: ArtifactWriter, args: argparse.Namespace
) -> int:
    result = experiments.beta_sweep(config)
    writer.write_table("beta_sweep.csv", result.metrics)
    writer.write_table("beta_sweep_posterior.csv", result.posterior)
    return EXIT_OK


def cmd_misspec_sweep(
    config: ExperimentConfig, writer: ArtifactWriter, args: argparse.Namespace
) -> int:
    result = experiments.misspec_sweep(config)
    which = config.misspec.which
    writer.write_table(f"misspec_{which}.csv", result.metrics)
    writer.write_table(f"misspec_{which}_posterior.csv", result.posterior)
    return EXIT_OK


def cmd_diabetes(
    config: ExperimentConfig, writer: ArtifactWriter, args: argparse.Namespace
) -> int:
    result = experiments.diabetes(config)
    writer.write_json("threshold_spec.json", result.spec.to_dict())
    writer.write_table("diabetes_table.csv", result.table, index=True)
    writer.write_table("diabetes_calibration.csv", result.calibration_frame())
    writer.write_table("diabetes_predictions.csv", result.predictions)
    writer.write_table("diabetes_posterior.csv", result.posterior)
    log.info("Diabetes metrics evaluated against the %s column", result.evaluated_on)
    return EXIT_OK


def cmd_calibrate(
    config: ExperimentConfig, writer: ArtifactWriter, args: argparse.Namespace
) -> int:
    settings = config.diabetes
    spec, check = experiments.calibrate(
        settings.total_rate,
        settings.shares,
        e_scale=settings.e_scale,
        n=args.n or experiments.CALIBRATION_CHECK_N,
        seed=config.seed,
    )
    writer.write_json("threshold_spec.json", spec.to_dict())
    writer.write_table("calibration_check.csv", check)
    print(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


Command = Callable[[ExperimentConfig, ArtifactWriter, argparse.Namespace], int]


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )

    try:
        config = load(args.config, _overrides(args))
        writer = ArtifactWriter(config.out_dir, config)
        writer.echo_config()
        command: Command = args.func
        return command(config, writer, args)
    except (ValueError, RuntimeError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
