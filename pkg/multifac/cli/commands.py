"""Subcommand implementations; each returns the process exit code."""

import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

from ..cp_model import (
    MultifacModel,
    classify_structure,
    component_weights,
    reconstruct_structure,
    variance_explained,
)
from ..exceptions import MissingDataError
from ..imputation import ImputeConfig, Preprocessor, em_als, imputation_summary
from ..selection import CvPlan, cross_validate
from ..simulation import (
    GroundTruth,
    SimulationSpec,
    experiment_spec,
    gen_linked,
    run_experiment,
)
from ..solver import (
    FitReport,
    SolverConfig,
    fit_cp,
    fit_multifac,
    penalized_objective,
    unpenalized_objective,
)
from ..tensor import LinkedTensorSet
from .models import (
    FitDocument,
    PreprocessingRecord,
    SimulationManifest,
    VarianceRow,
)
from .storage import (
    read_document,
    read_linked,
    read_model_document,
    read_tensor,
    write_document,
    write_linked,
    write_model,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2


def solver_config(args: argparse.Namespace) -> SolverConfig:
    return SolverConfig(
        rank=args.rank,
        sigma=args.sigma,
        tolerance=args.tol,
        max_iterations=args.max_iters,
        n_starts=args.starts,
        temper_steps=args.temper_steps,
        seed=args.seed,
        zero_threshold=args.threshold,
        allow_pinv=args.allow_pinv,
        threads=args.threads,
    )


def _exit_code(report: FitReport) -> int:
    if report.converged:
        return EXIT_OK
    logger.warning(
        f"⚠️  no convergence after {report.n_sweeps} sweeps; output was written"
    )
    return EXIT_NOT_CONVERGED


def _variance_rows(
    model: MultifacModel, data: LinkedTensorSet, threshold: float
) -> List[VarianceRow]:
    table = variance_explained(model, data, threshold).reset_index()
    return [VarianceRow(**row) for row in table.to_dict(orient="records")]


def cmd_fit(args: argparse.Namespace) -> int:
    """Penalized CP fit of one complete tensor."""
    x = read_tensor(args.tensor)
    if np.isnan(x).any():
        raise MissingDataError(
            f"{args.tensor} has missing entries; run 'impute' instead of 'fit'"
        )
    cfg = solver_config(args)
    factors, report = fit_cp(x, cfg)
    out = Path(args.out)
    model = MultifacModel.from_cp(factors, report.sigma)
    write_model(out / "model.json", model, kind="cp", threshold=cfg.zero_threshold)
    write_document(
        out / "report.json",
        FitDocument(
            command="fit",
            report=report,
            structure=report.effective_ranks,
            outputs=["model.json"],
        ),
    )
    print(f"✅ rank {report.effective_ranks.total_rank} model written to {out}")
    return _exit_code(report)


def cmd_multifit(args: argparse.Namespace) -> int:
    """Linked fit of complete tensors with a variance-explained table."""
    data = read_linked(args.manifest)
    if data.has_missing:
        raise MissingDataError(
            f"{args.manifest} has missing entries; run 'impute' instead"
        )
    cfg = solver_config(args)
    model, report = fit_multifac(data, cfg)
    out = Path(args.out)
    write_model(out / "model.json", model, threshold=cfg.zero_threshold)
    rows = _variance_rows(model, data, cfg.zero_threshold)
    write_document(
        out / "report.json",
        FitDocument(
            command="multifit",
            report=report,
            structure=report.effective_ranks,
            variance_explained=rows,
            outputs=["model.json"],
        ),
    )
    print(f"✅ structure ranks {report.effective_ranks.ranks} written to {out}")
    return _exit_code(report)


def impute_config(args: argparse.Namespace) -> ImputeConfig:
    return ImputeConfig(
        solver=solver_config(args),
        em_tolerance=args.em_tol,
        em_max_rounds=args.em_rounds,
        shared_only_for_tensorwise=not args.entry_only,
        preprocess=not args.no_preprocess,
    )


def cmd_impute(args: argparse.Namespace) -> int:
    """EM-ALS imputation; writes completed tensors, the model and a report."""
    data = read_linked(args.manifest)
    out = Path(args.out)
    if not data.has_missing:
        logger.warning("⚠️  no missing entries found; copying the input unchanged")
        write_linked(out, data.tensors, prefix="completed")
        return EXIT_OK

    cfg = impute_config(args)
    result = em_als(data, cfg)
    record = PreprocessingRecord.from_preprocessor(result.preprocessor)
    manifest = write_linked(out, result.completed.tensors, prefix="completed")
    write_model(
        out / "model.json",
        result.model,
        threshold=cfg.solver.zero_threshold,
        preprocessing=record,
    )
    write_document(
        out / "report.json",
        FitDocument(
            command="impute",
            report=result.report,
            structure=result.report.effective_ranks,
            imputation=imputation_summary(result),
            preprocessing=record,
            outputs=[manifest.name, "model.json"],
        ),
    )
    counts = result.counts
    print(
        f"✅ imputed {sum(e for e, _ in counts)} entry-wise and "
        f"{sum(t for _, t in counts)} tensor-wise entries into {out}"
    )
    return _exit_code(result.report)


def cmd_cv(args: argparse.Namespace) -> int:
    """Two-step cross-validation; writes cv.json and the grid traces."""
    data = read_linked(args.manifest)
    plan = CvPlan(
        n_folds=args.folds,
        holdout_fraction=args.holdout,
        holdout_kind=args.holdout_kind,
        tensorwise_fraction=args.tensorwise_holdout,
        grid_points=args.grid_points,
        seed=args.seed,
        threads=args.threads,
    )
    template = impute_config(args)
    result = cross_validate(data, plan, template)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_document(out / "cv.json", result.summary())
    if result.step1 is not None:
        result.step1.trace.to_csv(out / "cv_trace.csv", index=False)
    if result.step2 is not None:
        result.step2.trace.to_csv(out / "cv_step2_trace.csv", index=False)
    if result.step2_fit is not None:
        write_model(
            out / "model.json",
            result.step2_fit.model,
            threshold=template.solver.zero_threshold,
            preprocessing=PreprocessingRecord.from_preprocessor(
                result.step2_fit.preprocessor
            ),
        )
    print(
        f"✅ ranks {result.selected_pattern.ranks}, "
        f"sigma_1se={result.selected_sigma_1se:.4g}, sigma*={result.step2_sigma:.4g}"
    )
    return EXIT_OK


def _write_replicate(
    directory: Path, data: LinkedTensorSet, truth: GroundTruth
) -> List[str]:
    files = [write_linked(directory, data.as_nan_arrays(), prefix="data").name]
    for name, arrays in (
        ("signal", truth.signals),
        ("shared", truth.shared_signals),
        ("individual", truth.individual_signals),
    ):
        files.append(write_linked(directory, arrays, prefix=name).name)
    write_model(directory / "truth_model.json", truth.model)
    files.append("truth_model.json")
    return files


def _simulation_spec(args: argparse.Namespace) -> SimulationSpec:
    if args.spec is None:
        snr = 1.0 if args.snr is None else args.snr
        seed = 0 if args.seed is None else args.seed
        return experiment_spec(args.experiment, snr, args.reps, seed)
    spec = read_document(args.spec, SimulationSpec)
    overrides: Dict[str, Any] = {}
    if args.snr is not None:
        overrides["snr"] = args.snr
    if args.reps is not None:
        overrides["n_replicates"] = args.reps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        spec = SimulationSpec.model_validate({**spec.model_dump(), **overrides})
    logger.info(f"📄 simulation settings read from {args.spec}")
    return spec


def cmd_simulate(args: argparse.Namespace) -> int:
    """Generate replicate data sets, or run the named experiment end to end."""
    spec = _simulation_spec(args)
    out = Path(args.out_dir)
    replicates = list(range(spec.n_replicates))
    outputs: List[str] = []
    if args.generate_only:
        for r in replicates:
            directory = out / f"replicate_{r + 1:03d}"
            data, truth = gen_linked(spec, r)
            files = _write_replicate(directory, data, truth)
            outputs += [f"{directory.name}/{f}" for f in files]
        mode = "generate"
    else:
        table = run_experiment(args.experiment, spec, threads=args.threads)
        out.mkdir(parents=True, exist_ok=True)
        table_path = out / f"{args.experiment}.csv"
        table.to_csv(table_path, index=False)
        print(table.to_string(index=False))
        outputs = [table_path.name]
        mode = "run"
    write_document(
        out / "simulation.json",
        SimulationManifest(
            experiment=args.experiment,
            spec=spec,
            replicates=replicates,
            mode=mode,
            outputs=outputs,
        ),
    )
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace) -> int:
    """Write the full, shared or individual reconstruction of every tensor.

    Models fitted on preprocessed data are mapped back to the input scale:
    every part is rescaled and the full reconstruction also gets the mean
    back, so shared + individual + mean equals full.
    """
    document, model = read_model_document(args.model)
    pattern = classify_structure(component_weights(model, document.threshold))
    record = None if args.preprocessed else document.preprocessing
    arrays = []
    for k in range(model.n_tensors):
        if args.structure == "full":
            components = pattern.active_in(k)
        elif args.structure == "shared":
            components = pattern.shared
        else:
            components = pattern.individual[k] if model.n_tensors > 1 else []
        values = reconstruct_structure(model, k, components)
        if record is not None:
            values = values * record.scales[k]
            if args.structure == "full":
                values = values + record.means[k]
        arrays.append(values)
    manifest = write_linked(Path(args.out), arrays, prefix=args.structure)
    print(f"✅ {args.structure} reconstruction written to {manifest}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    """Structure pattern, variance explained and objective of a saved model."""
    document, model = read_model_document(args.model)
    data = read_linked(args.manifest)
    if document.preprocessing is not None:
        data = document.preprocessing.to_preprocessor().transform(data)
    elif args.preprocessed:
        data = Preprocessor.fit(data).transform(data)
    pattern = classify_structure(component_weights(model, document.threshold))
    table = variance_explained(model, data, document.threshold)
    print(f"Structure ranks (shared, individual...): {pattern.ranks}")
    if pattern.partial:
        print(f"Partially shared components: {pattern.partial_groups()}")
    print(table.to_string(float_format=lambda v: f"{v:.3f}"))
    print(
        f"Objective: unpenalized={unpenalized_objective(data, model):.6g}, "
        f"penalized={penalized_objective(data, model, model.penalty):.6g} "
        f"(sigma={model.penalty:g})"
    )
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out)
    return EXIT_OK
