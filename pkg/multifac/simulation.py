"""Seeded generators and experiment runners for linked low-rank tensors.

Signals are built from standard-normal factor columns; noise is Gaussian with
its standard deviation set so that ``||S||^2 / E||noise||^2`` equals the
requested SNR, i.e. ``sd = ||S|| / sqrt(snr * n_entries)``.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import settings

from .cp_model import (
    MultifacModel,
    classify_structure,
    component_weights,
    reconstruct_structure,
)
from .exceptions import DegenerateDataError, ExperimentError, InfeasibleMaskError
from .imputation import ImputeConfig, em_als, imputation_summary
from .jobs import TaskRunner
from .selection import CvPlan, CvResult, cross_validate, fit_constrained
from .solver import SolverConfig
from .tensor import LinkedTensorSet, ObservationMask, rse
from .utils import child_rng, draw_seed

logger = logging.getLogger(__name__)

SINGLE_METHODS = ("step1", "constraint", "step2", "true_rank")
LINKED_METHODS = ("step1", "multifac")
IMPUTATION_METRICS = ("rse_observe", "rse_missing", "rse_entrywise", "rse_tensorwise")


class SimulationSpec(BaseModel):
    """Sizes, ranks, noise and missingness of one simulated setting."""

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    shapes: List[Tuple[int, ...]] = Field(..., min_length=1)
    shared_rank: int = Field(..., ge=0)
    individual_ranks: List[int]
    snr: float = Field(1.0, gt=0.0, description="inf switches the noise off")
    entrywise_fraction: float = Field(0.0, ge=0.0, lt=1.0)
    tensorwise_fraction: float = Field(0.0, ge=0.0, lt=1.0)
    n_replicates: int = Field(1, ge=1)
    seed: Optional[int] = 0
    allow_unidentifiable_slabs: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "SimulationSpec":
        if len(self.individual_ranks) != len(self.shapes):
            raise ValueError(
                f"{len(self.individual_ranks)} individual ranks for "
                f"{len(self.shapes)} tensors"
            )
        if any(r < 0 for r in self.individual_ranks):
            raise ValueError("individual ranks must be >= 0")
        if any(len(s) < 2 or min(s) < 1 for s in self.shapes):
            raise ValueError("every tensor needs order >= 2 and positive sizes")
        if len({s[0] for s in self.shapes}) != 1:
            raise ValueError(f"tensors do not share the first mode: {self.shapes}")
        if self.entrywise_fraction + self.tensorwise_fraction >= 1.0:
            raise ValueError("missing fractions must sum to less than 1")
        return self

    @property
    def n_tensors(self) -> int:
        return len(self.shapes)

    @property
    def total_rank(self) -> int:
        return self.shared_rank + sum(self.individual_ranks)

    @property
    def has_missing(self) -> bool:
        return self.entrywise_fraction > 0 or self.tensorwise_fraction > 0


@dataclass(frozen=True)
class GroundTruth:
    """Everything the generator drew for one replicate."""

    signals: Tuple[np.ndarray, ...]
    shared_signals: Tuple[np.ndarray, ...]
    individual_signals: Tuple[np.ndarray, ...]
    model: MultifacModel
    noise: Tuple[np.ndarray, ...]
    masks: Tuple[ObservationMask, ...]

    @property
    def signal_set(self) -> LinkedTensorSet:
        return LinkedTensorSet(self.signals)


def _component_layout(spec: SimulationSpec) -> List[List[int]]:
    """Columns active in each tensor: shared first, then each tensor's own."""
    shared = list(range(spec.shared_rank))
    layout, offset = [], spec.shared_rank
    for r in spec.individual_ranks:
        layout.append(shared + list(range(offset, offset + r)))
        offset += r
    return layout


def _draw_slabs(
    spec: SimulationSpec, rng: np.random.Generator
) -> List[np.ndarray]:
    n_samples = spec.shapes[0][0]
    per_tensor = int(math.floor(spec.tensorwise_fraction * n_samples + 0.5))
    if per_tensor == 0:
        return [np.zeros(0, dtype=int) for _ in spec.shapes]
    if spec.n_tensors == 1 and not spec.allow_unidentifiable_slabs:
        raise InfeasibleMaskError(
            "a single tensor cannot lose whole slabs without losing the sample"
        )
    slabs: List[np.ndarray] = []
    for k in range(spec.n_tensors):
        candidates = np.arange(n_samples)
        if k == spec.n_tensors - 1 and not spec.allow_unidentifiable_slabs:
            gone_everywhere = set.intersection(*(set(s.tolist()) for s in slabs))
            candidates = np.array(
                [i for i in candidates if i not in gone_everywhere], dtype=int
            )
        if per_tensor > candidates.size:
            raise InfeasibleMaskError(
                f"tensor {k + 1}: {per_tensor} missing slabs requested, "
                f"{candidates.size} available"
            )
        slabs.append(np.sort(rng.choice(candidates, size=per_tensor, replace=False)))
    return slabs


def _draw_mask(
    shape: Tuple[int, ...],
    slabs: np.ndarray,
    fraction: float,
    rng: np.random.Generator,
) -> ObservationMask:
    observed = np.ones(shape, dtype=bool)
    observed[slabs] = False
    n_entries = int(np.prod(shape))
    n_missing = int(math.floor(fraction * n_entries + 0.5))
    available = np.flatnonzero(observed.ravel())
    if n_missing > available.size:
        raise InfeasibleMaskError(
            f"{n_missing} entry-wise gaps requested, {available.size} entries left"
        )
    if n_missing:
        observed.ravel()[rng.choice(available, size=n_missing, replace=False)] = False
    return ObservationMask(observed)


def gen_linked(
    spec: SimulationSpec, replicate: int = 0
) -> Tuple[LinkedTensorSet, GroundTruth]:
    """Draw one replicate: factors, signals, noise and masks."""
    rng = child_rng(spec.seed, replicate)
    n_samples = spec.shapes[0][0]
    rank = max(spec.total_rank, 1)
    layout = _component_layout(spec)

    shared_factor = rng.standard_normal((n_samples, rank))
    if spec.total_rank == 0:
        shared_factor[:] = 0.0
    tensor_factors = []
    for shape, columns in zip(spec.shapes, layout):
        factors = []
        for dim in shape[1:]:
            f = np.zeros((dim, rank))
            f[:, columns] = rng.standard_normal((dim, len(columns)))
            factors.append(f)
        tensor_factors.append(tuple(factors))
    model = MultifacModel(shared_factor, tuple(tensor_factors))

    shared_columns = list(range(spec.shared_rank))
    signals, shared, individual, noise = [], [], [], []
    for k, (shape, columns) in enumerate(zip(spec.shapes, layout)):
        own = columns[spec.shared_rank :]
        shared.append(reconstruct_structure(model, k, shared_columns))
        individual.append(reconstruct_structure(model, k, own))
        signal = shared[-1] + individual[-1]
        signals.append(signal)
        if math.isinf(spec.snr):
            noise.append(np.zeros(shape))
        else:
            sd = float(np.linalg.norm(signal)) / math.sqrt(spec.snr * signal.size)
            noise.append(rng.normal(0.0, sd, size=shape))

    slabs = _draw_slabs(spec, rng)
    masks = tuple(
        _draw_mask(shape, s, spec.entrywise_fraction, rng)
        for shape, s in zip(spec.shapes, slabs)
    )
    data = LinkedTensorSet(
        tuple(s + e for s, e in zip(signals, noise)),
        masks,
    )
    truth = GroundTruth(
        signals=tuple(signals),
        shared_signals=tuple(shared),
        individual_signals=tuple(individual),
        model=model,
        noise=tuple(noise),
        masks=masks,
    )
    return data, truth


class StructureRse(BaseModel):
    """Signal recovery of one tensor; None where the true part is zero."""

    tensor: int
    rse_full: Optional[float] = None
    rse_share: Optional[float] = None
    rse_indiv: Optional[float] = None


def _optional_rse(estimate: np.ndarray, truth: np.ndarray) -> Optional[float]:
    try:
        return rse(estimate, truth)
    except DegenerateDataError:
        return None


def structure_rses(
    model: MultifacModel,
    truth: GroundTruth,
    threshold: float = settings.zero_threshold,
) -> List[StructureRse]:
    """Full, shared and individual signal RSE of a fitted model per tensor."""
    pattern = classify_structure(component_weights(model, threshold))
    rows = []
    for k in range(model.n_tensors):
        own = pattern.individual[k] if model.n_tensors > 1 else []
        rows.append(
            StructureRse(
                tensor=k + 1,
                rse_full=_optional_rse(model.reconstruct(k), truth.signals[k]),
                rse_share=_optional_rse(
                    reconstruct_structure(model, k, pattern.shared),
                    truth.shared_signals[k],
                ),
                rse_indiv=_optional_rse(
                    reconstruct_structure(model, k, own), truth.individual_signals[k]
                ),
            )
        )
    return rows


_PRESETS: Dict[str, Dict] = {
    "single-complete": {
        "shapes": [(50, 50, 50)],
        "shared_rank": 5,
        "individual_ranks": [0],
    },
    "single-impute": {
        "shapes": [(50, 50, 50)],
        "shared_rank": 5,
        "individual_ranks": [0],
        "entrywise_fraction": 0.1,
    },
    "linked-complete-same": {
        "shapes": [(50, 50, 50), (50, 50, 50)],
        "shared_rank": 2,
        "individual_ranks": [3, 3],
    },
    "linked-complete-varying": {
        "shapes": [(100, 100, 4), (100, 40, 10, 3)],
        "shared_rank": 2,
        "individual_ranks": [3, 3],
    },
    "linked-impute-same": {
        "shapes": [(50, 50, 50), (50, 50, 50)],
        "shared_rank": 2,
        "individual_ranks": [3, 3],
        "entrywise_fraction": 0.05,
        "tensorwise_fraction": 0.05,
    },
    "linked-impute-varying": {
        "shapes": [(100, 100, 4), (100, 40, 10, 3)],
        "shared_rank": 2,
        "individual_ranks": [3, 3],
        "entrywise_fraction": 0.05,
        "tensorwise_fraction": 0.05,
    },
    "real-data-shapes": {
        "shapes": [(19, 5, 18), (19, 4, 14)],
        "shared_rank": 6,
        "individual_ranks": [7, 10],
    },
}


def experiment_names() -> List[str]:
    return list(_PRESETS)


def experiment_spec(
    name: str,
    snr: float = 1.0,
    n_replicates: Optional[int] = None,
    seed: Optional[int] = 0,
) -> SimulationSpec:
    """Preset setting of a named experiment."""
    if name not in _PRESETS:
        raise ExperimentError(
            f"unknown experiment {name!r}; choose one of {', '.join(_PRESETS)}"
        )
    preset = _PRESETS[name]
    if n_replicates is None:
        single = len(preset["shapes"]) == 1
        n_replicates = (
            settings.single_replicates if single else settings.linked_replicates
        )
    return SimulationSpec(**preset, snr=snr, n_replicates=n_replicates, seed=seed)


def default_template(spec: SimulationSpec) -> ImputeConfig:
    """Solver settings used by the runners: a generous rank budget."""
    budget = max(settings.simulation_rank_budget, math.ceil(1.5 * spec.total_rank))
    return ImputeConfig(solver=SolverConfig(rank=budget))


Row = Dict[str, object]


def _row(method: str, tensor: int, metric: str, value: float) -> Row:
    return {"method": method, "tensor": tensor, "metric": metric, "value": value}


def _rank_rows(method: str, model: MultifacModel, threshold: float) -> List[Row]:
    pattern = classify_structure(component_weights(model, threshold))
    rows = [_row(method, 0, "rank_total", pattern.total_rank)]
    if model.n_tensors > 1:
        rows.append(_row(method, 0, "rank_shared", pattern.rank_shared))
        for k, r in enumerate(pattern.rank_individual):
            rows.append(_row(method, k + 1, "rank_individual", r))
    return rows


def _single_rows(
    method: str, model: MultifacModel, truth: GroundTruth, threshold: float
) -> List[Row]:
    estimate = model.reconstruct(0)
    signal = truth.signals[0]
    rows = [_row(method, 1, "rse", rse(estimate, signal))]
    missing = truth.masks[0].missing
    if missing.any():
        rows.append(_row(method, 1, "rse_missing", rse(estimate, signal, missing)))
    return rows + _rank_rows(method, model, threshold)


def _single_replicate(
    data: LinkedTensorSet,
    truth: GroundTruth,
    spec: SimulationSpec,
    cv: CvResult,
    template: ImputeConfig,
    methods: Sequence[str],
) -> List[Row]:
    threshold = template.solver.zero_threshold
    rows: List[Row] = []
    for method in methods:
        if method == "step1":
            model = cv.step1_model
        elif method == "step2":
            model = cv.step2_model
        elif method == "constraint":
            model = fit_constrained(data, cv.selected_pattern, template)
        else:
            solver = template.solver.model_copy(
                update={"rank": max(spec.total_rank, 1), "sigma": 0.0}
            )
            model = em_als(data, template.model_copy(update={"solver": solver})).model
        if model is None:
            raise DegenerateDataError(f"cross-validation produced no {method} model")
        rows += _single_rows(method, model, truth, threshold)
    return rows


def _linked_replicate(
    data: LinkedTensorSet,
    truth: GroundTruth,
    spec: SimulationSpec,
    cv: CvResult,
    template: ImputeConfig,
    methods: Sequence[str],
) -> List[Row]:
    threshold = template.solver.zero_threshold
    rows: List[Row] = []
    for method in methods:
        fit = cv.step1_fit if method == "step1" else cv.step2_fit
        if fit is None:
            raise DegenerateDataError(f"cross-validation produced no {method} fit")
        for s in structure_rses(fit.model, truth, threshold):
            for metric in ("rse_full", "rse_share", "rse_indiv"):
                value = getattr(s, metric)
                if value is not None:
                    rows.append(_row(method, s.tensor, metric, value))
        if spec.has_missing:
            for m in imputation_summary(fit, truth.signal_set):
                for metric in IMPUTATION_METRICS:
                    value = getattr(m, metric)
                    if value is not None:
                        rows.append(_row(method, m.tensor, metric, value))
        rows += _rank_rows(method, fit.model, threshold)
    return rows


def replicate_rows(
    spec: SimulationSpec,
    replicate: int,
    methods: Sequence[str],
    plan: Optional[CvPlan] = None,
    template: Optional[ImputeConfig] = None,
) -> List[Row]:
    """Generate one replicate, run the CV pipeline and score every method."""
    data, truth = gen_linked(spec, replicate)
    template = template or default_template(spec)
    seeds = child_rng(spec.seed, replicate, 1)
    plan = (plan or CvPlan()).model_copy(
        update={"seed": draw_seed(seeds), "threads": 1}
    )
    solver = template.solver.model_copy(
        update={"seed": draw_seed(seeds), "threads": 1}
    )
    template = template.model_copy(update={"solver": solver})

    cv = cross_validate(data, plan, template)
    run: Callable[..., List[Row]] = (
        _single_replicate if spec.n_tensors == 1 else _linked_replicate
    )
    rows = run(data, truth, spec, cv, template, methods)
    for row in rows:
        row["replicate"] = replicate
    logger.info(
        f"🧪 replicate {replicate + 1}/{spec.n_replicates}: "
        f"ranks={cv.selected_pattern.ranks}, sigma*={cv.step2_sigma}"
    )
    return rows


def summarize_rows(rows: Sequence[Row]) -> pd.DataFrame:
    """Mean and standard deviation of every metric across replicates."""
    frame = pd.DataFrame(
        rows, columns=["replicate", "method", "tensor", "metric", "value"]
    )
    table = (
        frame.groupby(["method", "tensor", "metric"], sort=True)["value"]
        .agg(mean="mean", sd="std", n="count")
        .reset_index()
    )
    table["sd"] = table["sd"].fillna(0.0)
    return table


def run_experiment(
    name: str,
    spec: Optional[SimulationSpec] = None,
    methods: Optional[Sequence[str]] = None,
    plan: Optional[CvPlan] = None,
    template: Optional[ImputeConfig] = None,
    threads: Optional[int] = None,
) -> pd.DataFrame:
    """Run every replicate of a named experiment and tabulate mean and SD."""
    spec = spec or experiment_spec(name)
    if name not in _PRESETS:
        raise ExperimentError(
            f"unknown experiment {name!r}; choose one of {', '.join(_PRESETS)}"
        )
    known = SINGLE_METHODS if spec.n_tensors == 1 else LINKED_METHODS
    methods = tuple(methods) if methods else known
    unknown = [m for m in methods if m not in known]
    if unknown:
        raise ExperimentError(
            f"methods {unknown} do not apply to {name}; choose from {list(known)}"
        )
    logger.info(
        f"🧪 experiment {name}: {spec.n_replicates} replicate(s), snr={spec.snr:g}"
    )
    runner = TaskRunner(threads=threads or settings.threads, label=name)
    per_replicate = runner.map(
        lambda r: replicate_rows(spec, r, methods, plan, template),
        list(range(spec.n_replicates)),
    )
    return summarize_rows([row for rows in per_replicate for row in rows])
