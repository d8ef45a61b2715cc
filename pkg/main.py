"""Command-line entry point for the MULTIFAC toolkit.

Subcommands:
- fit: penalized CP decomposition of one complete tensor
- multifit: linked decomposition of tensors sharing their first mode
- impute: EM-ALS imputation of missing entries
- cv: two-step cross-validation of ranks and penalty
- simulate: generate simulated data or run a named experiment
- reconstruct: full, shared or individual reconstructions of a saved model
- report: structure and variance explained of a saved model

Configuration:
- MULTIFAC_THREADS: default for --threads (default: 1)
- MULTIFAC_LOG_LEVEL: logging level (default: INFO)
- SENTRY_DSN: error reporting, disabled when empty

Exit codes: 0 success, 1 input error, 2 no convergence (output still written).
"""

import argparse
import logging
import sys
from typing import Callable, List, Optional

import sentry_sdk
from pydantic import ValidationError

from config import settings
from multifac.cli import commands
from multifac.exceptions import MultifacError
from multifac.simulation import experiment_names

logger = logging.getLogger("multifac")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the input-error code."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(commands.EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    value = float(text)
    if not value >= 0.0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rank", type=_positive_int, required=True, help="rank budget R")
    p.add_argument("--sigma", type=_non_negative_float, default=0.0)
    p.add_argument("--tol", type=float, default=settings.tolerance)
    p.add_argument("--max-iters", type=_positive_int, default=settings.max_iterations)
    p.add_argument("--starts", type=_positive_int, default=settings.n_starts)
    p.add_argument("--temper-steps", type=int, default=settings.temper_steps)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--threshold",
        type=float,
        default=settings.zero_threshold,
        help="activity threshold relative to the largest component weight",
    )
    p.add_argument(
        "--allow-pinv",
        action="store_true",
        help="pseudo-inverse fallback for singular systems at sigma 0",
    )
    p.add_argument("--out", default=".", help="output directory")


def _add_impute_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--em-rounds", type=_positive_int, default=settings.em_max_rounds)
    p.add_argument("--em-tol", type=float, default=settings.em_tolerance)
    p.add_argument(
        "--entry-only",
        action="store_true",
        help="impute missing slabs from the full model instead of shared parts",
    )
    p.add_argument(
        "--no-preprocess",
        action="store_true",
        help="skip centering and scaling each tensor",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="multifac",
        description="Penalized factorization of single and linked tensors",
    )
    parser.add_argument(
        "--threads",
        type=_positive_int,
        default=settings.threads,
        help="worker threads (default: MULTIFAC_THREADS)",
    )
    parser.add_argument("--log-level", default=settings.log_level)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="CP decomposition of one complete tensor")
    fit.add_argument("tensor", help="tensor manifest (.json) or long CSV")
    _add_solver_flags(fit)
    fit.set_defaults(handler=commands.cmd_fit)

    multifit = sub.add_parser("multifit", help="linked decomposition")
    multifit.add_argument("manifest", help="linked manifest or single tensor file")
    _add_solver_flags(multifit)
    multifit.set_defaults(handler=commands.cmd_multifit)

    impute = sub.add_parser("impute", help="EM-ALS imputation of NaN entries")
    impute.add_argument("manifest")
    _add_solver_flags(impute)
    _add_impute_flags(impute)
    impute.set_defaults(handler=commands.cmd_impute)

    cv = sub.add_parser("cv", help="two-step cross-validation")
    cv.add_argument("manifest")
    _add_solver_flags(cv)
    _add_impute_flags(cv)
    cv.add_argument("--folds", type=int, default=settings.cv_folds)
    cv.add_argument("--holdout", type=float, default=settings.cv_holdout_fraction)
    cv.add_argument("--holdout-kind", choices=["entry", "mixed"], default="entry")
    cv.add_argument("--tensorwise-holdout", type=float, default=0.0)
    cv.add_argument("--grid-points", type=int, default=settings.grid_points)
    cv.set_defaults(handler=commands.cmd_cv)

    simulate = sub.add_parser("simulate", help="simulated data and experiments")
    simulate.add_argument("--experiment", required=True, choices=experiment_names())
    simulate.add_argument(
        "--spec",
        default=None,
        help="JSON simulation settings used instead of the experiment preset",
    )
    simulate.add_argument("--snr", type=float, default=None, help="default: 1")
    simulate.add_argument("--reps", type=_positive_int, default=None)
    simulate.add_argument("--seed", type=int, default=None, help="default: 0")
    simulate.add_argument("--out-dir", default="simulation")
    simulate.add_argument(
        "--generate-only",
        action="store_true",
        help="write data and ground truth without fitting",
    )
    simulate.set_defaults(handler=commands.cmd_simulate)

    reconstruct = sub.add_parser("reconstruct", help="tensors from a saved model")
    reconstruct.add_argument("model")
    reconstruct.add_argument(
        "--structure", choices=["full", "shared", "individual"], default="full"
    )
    reconstruct.add_argument(
        "--preprocessed",
        action="store_true",
        help="keep the centered and scaled working scale",
    )
    reconstruct.add_argument("--out", default=".")
    reconstruct.set_defaults(handler=commands.cmd_reconstruct)

    report = sub.add_parser("report", help="structure and variance explained")
    report.add_argument("model")
    report.add_argument("manifest")
    report.add_argument(
        "--preprocessed",
        action="store_true",
        help="the model was fitted on centered and scaled data",
    )
    report.add_argument("--out", default=None, help="CSV path for the table")
    report.set_defaults(handler=commands.cmd_report)
    return parser


def _init_sentry() -> None:
    if not settings.sentry_dsn:
        return
    sentry_sdk.init(
        dsn=settings.sentry_dsn,
        environment=settings.sentry_environment,
        traces_sample_rate=settings.sentry_traces_sample_rate,
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    _init_sentry()

    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (MultifacError, ValidationError, ValueError) as error:
        logger.error(f"❌ {args.command}: {error}")
        print(f"error: {error}", file=sys.stderr)
        return commands.EXIT_INPUT
    except Exception as error:
        sentry_sdk.capture_exception(error)
        logger.exception(f"❌ {args.command} failed unexpectedly")
        return commands.EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
