"""Two-step cross-validation of the rank structure and the penalty.

Step 1 scans a sigma grid, hides entries fold by fold, and keeps the largest
sigma whose mean held-out RSE is within one standard error of the best; the
refit at that sigma fixes the shared/individual pattern. Step 2 fits under
that pattern and tunes sigma by the lowest mean held-out RSE.
"""

import logging
from dataclasses import dataclass
from functools import partial
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from config import settings

from .cp_model import (
    MultifacModel,
    StructurePattern,
    classify_structure,
    component_weights,
)
from .exceptions import DegenerateDataError, InfeasibleMaskError
from .imputation import ImputeConfig, ImputeResult, Preprocessor, em_als
from .jobs import Task, TaskRunner
from .solver import SolverConfig, ZeroPattern, zero_threshold
from .tensor import LinkedTensorSet, rse
from .utils import child_rng, draw_seed

logger = logging.getLogger(__name__)

_HOLDOUT_STREAM = 0
_CELL_STREAM = 1


class CvPlan(BaseModel):
    """How entries are held out and which penalties are scanned."""

    model_config = ConfigDict(frozen=True)

    n_folds: int = Field(settings.cv_folds, ge=2)
    holdout_fraction: float = Field(settings.cv_holdout_fraction, gt=0.0, lt=0.5)
    holdout_kind: Literal["entry", "mixed"] = "entry"
    tensorwise_fraction: float = Field(
        0.0, ge=0.0, lt=0.5, description="Share of slabs hidden per fold (mixed)"
    )
    sigma_grid: Optional[List[float]] = Field(
        None, description="Step-1 grid; derived from the data when omitted"
    )
    grid_points: int = Field(settings.grid_points, ge=2)
    seed: Optional[int] = 0
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)

    @field_validator("sigma_grid")
    @classmethod
    def _sorted_grid(cls, grid: Optional[List[float]]) -> Optional[List[float]]:
        if grid is None:
            return grid
        if not grid:
            raise ValueError("sigma grid must not be empty")
        if any(s < 0 or not np.isfinite(s) for s in grid):
            raise ValueError("sigma grid values must be finite and >= 0")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("sigma grid must be strictly ascending")
        return grid


@dataclass(frozen=True)
class Holdout:
    """Entries hidden in one fold, one boolean array per tensor."""

    fold: int
    hidden: Tuple[np.ndarray, ...]

    def apply(self, data: LinkedTensorSet) -> LinkedTensorSet:
        return data.with_masks([m.hide(h) for m, h in zip(data.masks, self.hidden)])

    @property
    def n_hidden(self) -> List[int]:
        return [int(h.sum()) for h in self.hidden]


def _hide_slabs(
    data: LinkedTensorSet, plan: CvPlan, rng: np.random.Generator
) -> List[List[np.ndarray]]:
    """Per fold and tensor, the first-mode indices whose slabs are hidden."""
    n_samples = data.shared_dim
    per_tensor = int(np.floor(plan.tensorwise_fraction * n_samples + 0.5))
    folds: List[List[np.ndarray]] = []
    for _ in range(plan.n_folds):
        hidden: List[np.ndarray] = []
        for k, mask in enumerate(data.masks):
            gone = set(mask.tensorwise_missing_slabs)
            candidates = [i for i in range(n_samples) if i not in gone]
            if k == data.n_tensors - 1:
                # at least one tensor must keep every sample
                lost = [
                    set(data.masks[j].tensorwise_missing_slabs) | set(hidden[j])
                    for j in range(k)
                ]
                candidates = [i for i in candidates if not all(i in s for s in lost)]
            if per_tensor > len(candidates):
                raise InfeasibleMaskError(
                    f"tensor {k + 1}: cannot hide {per_tensor} slabs, only "
                    f"{len(candidates)} are eligible"
                )
            hidden.append(rng.choice(candidates, size=per_tensor, replace=False))
        folds.append(hidden)
    return folds


def make_holdouts(data: LinkedTensorSet, plan: CvPlan) -> List[Holdout]:
    """Random held-out sets among the observed entries, one per fold.

    Entry sets are consecutive slices of one permutation per tensor, so folds
    are disjoint until the observed entries run out and the slices wrap.
    """
    if plan.holdout_kind == "mixed" and data.n_tensors < 2:
        raise InfeasibleMaskError(
            "hiding whole slabs needs at least two linked tensors"
        )
    rng = child_rng(plan.seed, _HOLDOUT_STREAM)
    slabs = _hide_slabs(data, plan, rng) if plan.holdout_kind == "mixed" else None

    hidden: List[List[np.ndarray]] = [[] for _ in range(plan.n_folds)]
    for k, mask in enumerate(data.masks):
        observed = np.flatnonzero(mask.observed.ravel())
        n_hide = int(np.floor(plan.holdout_fraction * observed.size + 0.5))
        if n_hide == 0:
            raise InfeasibleMaskError(
                f"tensor {k + 1}: {observed.size} observed entries are too few to "
                f"hold out a fraction of {plan.holdout_fraction}"
            )
        order = rng.permutation(observed)
        for f in range(plan.n_folds):
            picks = order[(f * n_hide + np.arange(n_hide)) % observed.size]
            h = np.zeros(mask.shape, dtype=bool)
            h.ravel()[picks] = True
            if slabs is not None:
                h[slabs[f][k]] = True
                h &= mask.observed
            kept = mask.n_observed - int(h.sum())
            if kept < 0.5 * mask.n_observed:
                raise InfeasibleMaskError(
                    f"tensor {k + 1}, fold {f + 1}: only {kept} of "
                    f"{mask.n_observed} observed entries would remain"
                )
            hidden[f].append(h)
    return [Holdout(fold=f, hidden=tuple(h)) for f, h in enumerate(hidden)]


def held_out_rse(
    data: LinkedTensorSet, holdout: Holdout, estimates: Sequence[np.ndarray]
) -> float:
    """RSE of the imputed values on the hidden entries, pooled over tensors."""
    fitted = np.concatenate([e[h] for e, h in zip(estimates, holdout.hidden)])
    truth = np.concatenate([x[h] for x, h in zip(data.tensors, holdout.hidden)])
    return rse(fitted, truth)


@dataclass(frozen=True)
class GridScan:
    """Held-out RSE of every (sigma, fold) cell; failed cells are NaN."""

    trace: pd.DataFrame

    def summary(self) -> pd.DataFrame:
        """Mean, standard error and successful fold count per sigma."""
        grouped = self.trace.groupby("sigma", sort=True)["rse_missing"]
        summary = pd.DataFrame(
            {
                "mean": grouped.mean(),
                "sd": grouped.std(ddof=1),
                "n_ok": grouped.count(),
            }
        )
        summary["se"] = (summary["sd"] / np.sqrt(summary["n_ok"])).fillna(0.0)
        return summary.drop(columns="sd")

    @property
    def sigmas(self) -> List[float]:
        return sorted(self.trace["sigma"].unique().tolist())


def one_se_select(summary: pd.DataFrame, slack: float = 1.0) -> float:
    """Largest sigma whose mean is within ``slack`` standard errors of the best.

    Grid points with no successful fold are ignored.
    """
    valid = summary[summary["n_ok"] > 0].dropna(subset=["mean"])
    if valid.empty:
        raise DegenerateDataError("every fit on the sigma grid failed")
    best = valid["mean"].idxmin()
    bound = valid.loc[best, "mean"] + slack * valid.loc[best, "se"]
    return float(valid.index[valid["mean"] <= bound].max())


def default_sigma_grid(
    data: LinkedTensorSet,
    n_points: int = settings.grid_points,
    template: Optional[SolverConfig] = None,
) -> List[float]:
    """``[0]`` plus ``n_points`` log-spaced values up to the zeroing penalty.

    The top value is the smallest sigma that shrinks the best rank-1 fit of
    the whole linked set to zero at the highest tensor order, times a small
    headroom. For linked data the fitted weight is the largest per-tensor
    total weight of that one component.
    """
    if n_points < 2:
        raise ValueError(f"a sigma grid needs at least 2 points, got {n_points}")
    if data.observed_norm_sq() == 0.0:
        raise DegenerateDataError("cannot derive a sigma grid from all-zero data")
    base = template or SolverConfig(rank=1)
    rank_one = ImputeConfig(
        solver=base.model_copy(
            update={"rank": 1, "sigma": 0.0, "temper_steps": 0, "threads": 1}
        )
    )
    model = em_als(data, rank_one).model
    lam_hat = float(component_weights(model).totals.max())
    order = max(t.ndim for t in data.tensors)
    sigma_max = zero_threshold(lam_hat, order) * settings.grid_headroom
    if sigma_max <= 0.0:
        raise DegenerateDataError("the rank-1 fit of the data is zero")
    grid = np.geomspace(sigma_max / settings.grid_span, sigma_max, n_points)
    return [0.0] + [float(s) for s in grid]


def step2_grid(sigma_1se: float, n_points: int = settings.grid_points) -> List[float]:
    """``[0]`` plus log-spaced values below the step-1 penalty."""
    if sigma_1se <= 0.0:
        return [0.0]
    grid = np.geomspace(sigma_1se / settings.grid_span, sigma_1se, n_points)
    return [0.0] + [float(s) for s in grid]


def _cell_config(
    template: ImputeConfig,
    sigma: float,
    rank: int,
    seed: Optional[int],
    threads: int = 1,
) -> ImputeConfig:
    solver = template.solver.model_copy(
        update={"sigma": sigma, "rank": rank, "seed": seed, "threads": threads}
    )
    return template.model_copy(update={"solver": solver})


def _scan(
    data: LinkedTensorSet,
    plan: CvPlan,
    holdouts: Sequence[Holdout],
    grid: Sequence[float],
    template: ImputeConfig,
    pattern: Optional[ZeroPattern],
    label: str,
) -> GridScan:
    rank = pattern.rank if pattern is not None else template.solver.rank

    def cell(i: int, sigma: float, holdout: Holdout) -> float:
        seed = draw_seed(child_rng(plan.seed, _CELL_STREAM, holdout.fold, i))
        cfg = _cell_config(template, sigma, rank, seed)
        result = em_als(holdout.apply(data), cfg, pattern)
        return held_out_rse(data, holdout, result.estimates)

    tasks = [
        Task(fn=partial(cell, i, sigma, h), name=f"sigma={sigma:.4g} fold={h.fold}")
        for i, sigma in enumerate(grid)
        for h in holdouts
    ]
    outcomes = TaskRunner(threads=plan.threads, label=label).run(tasks)
    rows = []
    for (sigma, h), outcome in zip(
        [(s, h) for s in grid for h in holdouts], outcomes
    ):
        value = outcome.result if outcome.ok else np.nan
        rows.append({"sigma": float(sigma), "fold": h.fold, "rse_missing": value})
    scan = GridScan(pd.DataFrame(rows, columns=["sigma", "fold", "rse_missing"]))
    logger.info(f"📊 {label}: {len(tasks)} cells over {len(grid)} penalties")
    return scan


def _refit(
    data: LinkedTensorSet,
    template: ImputeConfig,
    sigma: float,
    pattern: Optional[ZeroPattern],
) -> ImputeResult:
    rank = pattern.rank if pattern is not None else template.solver.rank
    cfg = _cell_config(
        template, sigma, rank, template.solver.seed, template.solver.threads
    )
    return em_als(data, cfg, pattern)


@dataclass(frozen=True)
class CvResult:
    """Scans, selections and full-data refits of both steps."""

    step1: Optional[GridScan]
    selected_sigma_1se: Optional[float]
    selected_pattern: StructurePattern
    step1_fit: Optional[ImputeResult]
    holdouts: Tuple[Holdout, ...] = ()
    step2: Optional[GridScan] = None
    step2_sigma: Optional[float] = None
    step2_fit: Optional[ImputeResult] = None

    @property
    def step1_model(self) -> Optional[MultifacModel]:
        return self.step1_fit.model if self.step1_fit else None

    @property
    def step2_model(self) -> Optional[MultifacModel]:
        return self.step2_fit.model if self.step2_fit else None

    def summary(self) -> "CvSummary":
        return CvSummary(
            selected_sigma_1se=self.selected_sigma_1se,
            ranks=list(self.selected_pattern.ranks),
            total_rank=self.selected_pattern.total_rank,
            step2_sigma=self.step2_sigma,
            pattern=self.selected_pattern,
        )


class CvSummary(BaseModel):
    """JSON summary written next to the CV trace."""

    format_version: int = 1
    selected_sigma_1se: Optional[float]
    ranks: List[int]
    total_rank: int
    step2_sigma: Optional[float] = None
    pattern: StructurePattern


def _working_data(data: LinkedTensorSet, template: ImputeConfig) -> LinkedTensorSet:
    # sigma grids live on the scale the solver sees
    if not template.preprocess:
        return data
    return Preprocessor.fit(data).transform(data)


def cv_step1(
    data: LinkedTensorSet,
    plan: CvPlan,
    template: ImputeConfig,
    holdouts: Optional[Sequence[Holdout]] = None,
) -> CvResult:
    """Select the rank structure with the one-standard-error rule."""
    grid = plan.sigma_grid or default_sigma_grid(
        _working_data(data, template), plan.grid_points, template.solver
    )
    if holdouts is None:
        holdouts = make_holdouts(data, plan)
    holdouts = tuple(holdouts)
    logger.info(
        f"🔎 CV step 1: {len(grid)} penalties x {len(holdouts)} folds, "
        f"rank budget {template.solver.rank}"
    )
    scan = _scan(data, plan, holdouts, grid, template, None, "CV step 1")
    sigma_1se = one_se_select(scan.summary())
    fit = _refit(data, template, sigma_1se, None)
    pattern = classify_structure(
        component_weights(fit.model, template.solver.zero_threshold)
    )
    logger.info(f"✅ CV step 1: sigma={sigma_1se:.4g}, ranks={pattern.ranks}")
    return CvResult(
        step1=scan,
        selected_sigma_1se=sigma_1se,
        selected_pattern=pattern,
        step1_fit=fit,
        holdouts=holdouts,
    )


def cv_step2(
    data: LinkedTensorSet,
    plan: CvPlan,
    pattern: StructurePattern,
    sigma_grid: Sequence[float],
    template: ImputeConfig,
    holdouts: Optional[Sequence[Holdout]] = None,
) -> Tuple[float, GridScan, ImputeResult]:
    """Tune sigma with the structure fixed; returns ``(sigma*, scan, refit)``.

    Zero is always part of the scanned grid. Ties go to the smallest sigma.
    """
    grid = sorted(set(float(s) for s in sigma_grid) | {0.0})
    if holdouts is None:
        holdouts = make_holdouts(data, plan)
    holdouts = tuple(holdouts)
    zeros = ZeroPattern.from_structure(pattern)
    if pattern.total_rank == 0:
        logger.warning("⚠️  CV step 2 with an empty structure, fitting nothing")
        fit = _zero_fit(data, template)
        trace = pd.DataFrame(
            [
                {"sigma": s, "fold": h.fold, "rse_missing": 1.0}
                for s in grid
                for h in holdouts
            ]
        )
        return 0.0, GridScan(trace), fit
    scan = _scan(data, plan, holdouts, grid, template, zeros, "CV step 2")
    summary = scan.summary()
    valid = summary[summary["n_ok"] > 0].dropna(subset=["mean"])
    if valid.empty:
        raise DegenerateDataError("every fit on the step-2 grid failed")
    sigma_star = float(valid["mean"].idxmin())
    fit = _refit(data, template, sigma_star, zeros)
    logger.info(f"✅ CV step 2: sigma={sigma_star:.4g}")
    return sigma_star, scan, fit


def _zero_fit(data: LinkedTensorSet, template: ImputeConfig) -> ImputeResult:
    # a one-column model pinned everywhere reconstructs zero
    zeros = ZeroPattern(np.ones((data.n_tensors, 1), dtype=bool))
    return _refit(data, template, 0.0, zeros)


def fit_constrained(
    data: LinkedTensorSet,
    pattern: StructurePattern,
    template: ImputeConfig,
    sigma: float = 0.0,
) -> MultifacModel:
    """Fit with the structure pattern fixed, unpenalized by default."""
    if pattern.total_rank == 0:
        return MultifacModel.zeros(data.shapes, 1)
    return _refit(data, template, sigma, ZeroPattern.from_structure(pattern)).model


def cross_validate(
    data: LinkedTensorSet,
    plan: CvPlan,
    template: ImputeConfig,
    step2_sigma_grid: Optional[Sequence[float]] = None,
) -> CvResult:
    """Both steps on the same folds."""
    first = cv_step1(data, plan, template)
    grid = (
        step2_sigma_grid
        if step2_sigma_grid is not None
        else step2_grid(first.selected_sigma_1se or 0.0, plan.grid_points)
    )
    sigma_star, scan, fit = cv_step2(
        data, plan, first.selected_pattern, grid, template, first.holdouts
    )
    return CvResult(
        step1=first.step1,
        selected_sigma_1se=first.selected_sigma_1se,
        selected_pattern=first.selected_pattern,
        step1_fit=first.step1_fit,
        holdouts=first.holdouts,
        step2=scan,
        step2_sigma=sigma_star,
        step2_fit=fit,
    )

