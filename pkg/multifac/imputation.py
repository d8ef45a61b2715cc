"""EM-ALS imputation for entry-wise and tensor-wise missing data.

Each round runs one full ALS sweep on the completed tensors (M-step), then
re-imputes: entry-wise gaps from the full reconstruction, fully missing
first-mode slabs from the shared components only, since nothing else in the
data pins down the scale of a sample's individual loadings.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config import settings

from .cp_model import (
    MultifacModel,
    classify_structure,
    component_weights,
    reconstruct_structure,
)
from .exceptions import DegenerateDataError, ShapeError
from .solver import (
    FitReport,
    FitRun,
    SolverConfig,
    ZeroPattern,
    build_report,
    check_pattern,
    finalize_factors,
    fit_multifac,
    init_state,
    multi_start,
    residual_sq,
    sweep,
    temper_schedule,
)
from .tensor import LinkedTensorSet, ObservationMask, rse

logger = logging.getLogger(__name__)


class ImputeConfig(BaseModel):
    """Inputs of the EM-ALS loop."""

    model_config = ConfigDict(frozen=True)

    solver: SolverConfig
    em_tolerance: float = Field(
        settings.em_tolerance, gt=0.0, description="Relative change of imputed values"
    )
    em_max_rounds: int = Field(settings.em_max_rounds, ge=1)
    shared_only_for_tensorwise: bool = True
    preprocess: bool = Field(
        False, description="Center and scale each tensor before fitting"
    )


@dataclass(frozen=True)
class Preprocessor:
    """Per-tensor centering by the observed mean and unit-norm scaling."""

    means: Tuple[float, ...]
    scales: Tuple[float, ...]

    @classmethod
    def fit(cls, data: LinkedTensorSet) -> "Preprocessor":
        means, scales = [], []
        for k, (x, m) in enumerate(zip(data.tensors, data.masks)):
            if m.n_observed == 0:
                raise DegenerateDataError(f"tensor {k + 1} has no observed entries")
            values = x[m.observed]
            mean = float(values.mean())
            scale = float(np.linalg.norm(values - mean))
            means.append(mean)
            scales.append(scale if scale > 0 else 1.0)
        return cls(tuple(means), tuple(scales))

    def transform(self, data: LinkedTensorSet) -> LinkedTensorSet:
        return data.with_values(
            [(x - mu) / s for x, mu, s in zip(data.tensors, self.means, self.scales)]
        )

    def inverse(self, k: int, values: np.ndarray) -> np.ndarray:
        return values * self.scales[k] + self.means[k]


class ImputationMetrics(BaseModel):
    """RSE by entry category for one tensor; absent categories are None."""

    tensor: int
    rse_observe: Optional[float] = None
    rse_missing: Optional[float] = None
    rse_entrywise: Optional[float] = None
    rse_tensorwise: Optional[float] = None
    n_entrywise: int = 0
    n_tensorwise: int = 0


@dataclass(frozen=True)
class ImputeResult:
    """Fitted model, completed tensors and per-tensor estimates.

    ``estimates`` hold the model's value for every entry in the original
    scale, using the shared-only rule on fully missing slabs; ``completed``
    equals the input on observed entries and ``estimates`` elsewhere.
    """

    model: MultifacModel
    completed: LinkedTensorSet
    estimates: Tuple[np.ndarray, ...]
    missing: Tuple[ObservationMask, ...]
    report: FitReport
    preprocessor: Optional[Preprocessor] = None

    @property
    def counts(self) -> List[Tuple[int, int]]:
        """``(entry-wise, tensor-wise)`` imputed entry counts per tensor."""
        return [
            (int(m.entrywise_missing.sum()), int(m.slab_missing.sum()))
            for m in self.missing
        ]


def initial_impute(
    data: LinkedTensorSet, preprocessor: Optional[Preprocessor] = None
) -> LinkedTensorSet:
    """Cold start: every missing entry becomes 0 on the preprocessed scale.

    Without a preprocessor that is a raw 0; with one it is the tensor's
    observed mean.
    """
    filled = []
    for k, (x, m) in enumerate(zip(data.tensors, data.masks)):
        values = np.array(x)
        fill = preprocessor.inverse(k, np.zeros(1))[0] if preprocessor else 0.0
        values[m.missing] = fill
        filled.append(values)
    return data.completed(filled)


def _imputation_estimates(
    model: MultifacModel,
    slabs: Sequence[np.ndarray],
    shared_only: bool,
    threshold: float,
) -> List[np.ndarray]:
    shared = classify_structure(component_weights(model, threshold)).shared
    estimates = []
    for k, slab in enumerate(slabs):
        estimate = model.reconstruct(k)
        if shared_only and slab.any():
            estimate[slab] = reconstruct_structure(model, k, shared)[slab]
        estimates.append(estimate)
    return estimates


def _impute(
    values: List[np.ndarray],
    model: MultifacModel,
    missing: Sequence[np.ndarray],
    slabs: Sequence[np.ndarray],
    cfg: ImputeConfig,
) -> None:
    estimates = _imputation_estimates(
        model, slabs, cfg.shared_only_for_tensorwise, cfg.solver.zero_threshold
    )
    for v, estimate, gap in zip(values, estimates, missing):
        v[gap] = estimate[gap]


def _gather(values: Sequence[np.ndarray], missing: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([v[gap] for v, gap in zip(values, missing)])


def _em_run(
    start_values: Sequence[np.ndarray],
    observed: Sequence[np.ndarray],
    slabs: Sequence[np.ndarray],
    cfg: ImputeConfig,
    pattern: Optional[ZeroPattern],
    rng: np.random.Generator,
) -> Tuple[FitRun, List[np.ndarray]]:
    solver = cfg.solver
    missing = [~m for m in observed]
    values = [np.array(v) for v in start_values]
    state = init_state(values, solver.rank, rng, pattern)
    previous = _gather(values, missing)
    trace: List[float] = []
    converged = False
    schedule = temper_schedule(solver.sigma, solver.temper_steps)
    for t, sigma_t in zip(range(cfg.em_max_rounds), schedule):
        sweep(values, state, sigma_t, pattern, solver.allow_pinv)
        model = state.to_model(sigma_t)
        trace.append(residual_sq(values, model) + sigma_t * model.squared_norm())
        _impute(values, model, missing, slabs, cfg)
        current = _gather(values, missing)
        scale = max(np.linalg.norm(current), np.linalg.norm(previous), 1e-300)
        change = float(np.linalg.norm(current - previous)) / scale
        previous = current
        logger.debug(f"EM round {t}: sigma={sigma_t:.4g} change={change:.3g}")
        if t >= solver.temper_steps and change < cfg.em_tolerance:
            converged = True
            break

    model = finalize_factors(values, state.to_model(solver.sigma), solver.sigma)
    _impute(values, model, missing, slabs, cfg)
    unpenalized = residual_sq(values, model, observed)
    run = FitRun(
        model=model,
        trace=trace,
        n_sweeps=len(trace),
        converged=converged,
        unpenalized=unpenalized,
        penalized=unpenalized + solver.sigma * model.squared_norm(),
    )
    return run, values


def em_als(
    data: LinkedTensorSet,
    cfg: ImputeConfig,
    pattern: Optional[ZeroPattern] = None,
) -> ImputeResult:
    """Fit the linked model to incomplete tensors and impute the gaps."""
    for k, m in enumerate(data.masks):
        if m.n_observed == 0:
            raise DegenerateDataError(
                f"tensor {k + 1} has no observed entries; nothing links it to "
                "the shared mode"
            )
    check_pattern(pattern, data.n_tensors, cfg.solver.rank)
    preprocessor = Preprocessor.fit(data) if cfg.preprocess else None
    work = preprocessor.transform(data) if preprocessor else data
    slabs = [m.slab_missing for m in work.masks]

    if not work.has_missing:
        model, report = fit_multifac(work, cfg.solver, pattern)
        work_estimates = [model.reconstruct(k) for k in range(model.n_tensors)]
    else:
        observed = [m.observed for m in work.masks]
        start_values = initial_impute(work).tensors
        logger.info(
            f"🩹 EM-ALS on {work.n_tensors} tensor(s): "
            f"{[int((~m).sum()) for m in observed]} missing entries, "
            f"sigma={cfg.solver.sigma:g}"
        )

        def run(
            start: int, rng: np.random.Generator
        ) -> Tuple[FitRun, List[np.ndarray]]:
            return _em_run(start_values, observed, slabs, cfg, pattern, rng)

        (best, _), index, objectives = multi_start(
            run,
            cfg.solver.n_starts,
            cfg.solver.seed,
            lambda r: r[0].unpenalized,
            cfg.solver.threads,
        )
        model = best.model
        report = build_report(best, cfg.solver, index, objectives)
        work_estimates = _imputation_estimates(
            model, slabs, cfg.shared_only_for_tensorwise, cfg.solver.zero_threshold
        )
        logger.info(
            f"✅ EM-ALS done: {report.n_sweeps} rounds, converged={report.converged}"
        )

    estimates = tuple(
        preprocessor.inverse(k, e) if preprocessor else e
        for k, e in enumerate(work_estimates)
    )
    completed = [
        np.where(m.observed, x, e)
        for x, m, e in zip(data.tensors, data.masks, estimates)
    ]
    return ImputeResult(
        model=model,
        completed=data.completed(completed),
        estimates=estimates,
        missing=data.masks,
        report=report,
        preprocessor=preprocessor,
    )


def _category_rse(
    estimate: np.ndarray, truth: np.ndarray, selected: np.ndarray
) -> Optional[float]:
    if not selected.any() or not np.any(truth[selected]):
        return None
    return rse(estimate, truth, selected)


def imputation_summary(
    result: ImputeResult, truth: Optional[LinkedTensorSet] = None
) -> List[ImputationMetrics]:
    """RSE on observed, missing, entry-wise and tensor-wise entries.

    ``truth`` is the reference signal (simulation) or the held-out values
    (cross-validation); without it only the observed-entry RSE against the
    data is available.
    """
    if truth is not None and truth.shapes != result.completed.shapes:
        raise ShapeError(f"truth shapes {truth.shapes} vs {result.completed.shapes}")
    reference = truth.tensors if truth is not None else result.completed.tensors
    rows = []
    for k, (estimate, mask) in enumerate(zip(result.estimates, result.missing)):
        ref = reference[k]
        row = ImputationMetrics(
            tensor=k + 1,
            rse_observe=_category_rse(estimate, ref, mask.observed),
            n_entrywise=int(mask.entrywise_missing.sum()),
            n_tensorwise=int(mask.slab_missing.sum()),
        )
        if truth is not None:
            row = row.model_copy(
                update={
                    "rse_missing": _category_rse(estimate, ref, mask.missing),
                    "rse_entrywise": _category_rse(
                        estimate, ref, mask.entrywise_missing
                    ),
                    "rse_tensorwise": _category_rse(estimate, ref, mask.slab_missing),
                }
            )
        rows.append(row)
    return rows
