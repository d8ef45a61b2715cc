"""Penalized alternating least squares for single and linked tensors.

Objective for K tensors sharing their first mode::

    sum_k ||X_k - [[A0, A_1^(k), ..., A_Nk^(k)]]||^2
        + sigma * (||A0||^2 + sum_k sum_i ||A_i^(k)||^2)

Each factor update is a ridge regression solved through the normal
equations ``A (Γ + σI) = X_(n) Z`` with ``Γ`` the Hadamard product of the
companion Gram matrices; the Khatri-Rao matrix ``Z`` is never formed. A single
tensor is the K = 1 case with its first mode in the shared role.
"""

import logging
from dataclasses import dataclass, field
from itertools import chain, repeat
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import scipy.linalg
import scipy.optimize
from pydantic import BaseModel, ConfigDict, Field

from config import settings

from .cp_model import (
    CpFactors,
    MultifacModel,
    StructurePattern,
    canonicalize,
    classify_structure,
    component_weights,
)
from .exceptions import MissingDataError, ShapeError, SingularSystemError
from .jobs import TaskRunner
from .tensor import LinkedTensorSet, khatri_rao_many, mttkrp, outer_sum
from .utils import child_rng

logger = logging.getLogger(__name__)

T = TypeVar("T")


class SolverConfig(BaseModel):
    """Inputs of the penalized ALS solver."""

    model_config = ConfigDict(frozen=True)

    rank: int = Field(..., ge=1, description="Rank budget R")
    sigma: float = Field(0.0, ge=0.0, description="Penalty factor")
    tolerance: float = Field(
        settings.tolerance, gt=0.0, description="Relative objective improvement"
    )
    max_iterations: int = Field(settings.max_iterations, ge=1)
    n_starts: int = Field(settings.n_starts, ge=1)
    temper_steps: int = Field(settings.temper_steps, ge=0)
    seed: Optional[int] = Field(0, description="None draws fresh entropy")
    zero_threshold: float = Field(settings.zero_threshold, gt=0.0, lt=1.0)
    allow_pinv: bool = Field(
        False, description="Pseudo-inverse fallback for singular systems"
    )
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)


class FitReport(BaseModel):
    """Convergence record of the selected start."""

    objective_trace: List[float] = Field(default_factory=list)
    unpenalized_final: float
    penalized_final: float
    sigma: float
    n_sweeps: int
    converged: bool
    start_index: int = 0
    start_objectives: List[float] = Field(default_factory=list)
    effective_ranks: StructurePattern


@dataclass(frozen=True)
class ZeroPattern:
    """``K x R`` table; ``True`` pins the column to zero in tensor k."""

    constrained: np.ndarray

    def __post_init__(self) -> None:
        constrained = np.array(self.constrained, dtype=bool)
        if constrained.ndim != 2:
            raise ShapeError("zero pattern must be a K x R table")
        constrained.flags.writeable = False
        object.__setattr__(self, "constrained", constrained)

    @classmethod
    def unconstrained(cls, n_tensors: int, rank: int) -> "ZeroPattern":
        return cls(np.zeros((n_tensors, rank), dtype=bool))

    @classmethod
    def from_structure(cls, pattern: StructurePattern) -> "ZeroPattern":
        """Compact layout with the pattern's ranks.

        Shared columns come first, then each tensor's individual columns,
        then partially shared groups. A pattern with no active component
        maps to one column pinned everywhere.
        """
        n_tensors = pattern.n_tensors
        rows: List[List[bool]] = []
        rows.extend([[False] * n_tensors for _ in pattern.shared])
        for k, components in enumerate(pattern.individual):
            rows.extend([[j != k for j in range(n_tensors)] for _ in components])
        for tensors, components in pattern.partial_groups().items():
            rows.extend(
                [[j not in tensors for j in range(n_tensors)] for _ in components]
            )
        if not rows:
            rows = [[True] * n_tensors]
        return cls(np.array(rows, dtype=bool).T)

    @property
    def n_tensors(self) -> int:
        return int(self.constrained.shape[0])

    @property
    def rank(self) -> int:
        return int(self.constrained.shape[1])

    @property
    def dropped(self) -> np.ndarray:
        """Columns pinned in every tensor (removed from the budget)."""
        return self.constrained.all(axis=0)

    @property
    def effective_rank(self) -> int:
        return int((~self.dropped).sum())

    def active(self, k: int) -> np.ndarray:
        return np.flatnonzero(~self.constrained[k])


@dataclass
class FactorState:
    """Mutable factor matrices updated in place by :func:`sweep`."""

    shared: np.ndarray
    blocks: List[List[np.ndarray]]

    @classmethod
    def from_model(cls, m: MultifacModel) -> "FactorState":
        return cls(
            m.shared_factor.copy(), [[f.copy() for f in fs] for fs in m.tensor_factors]
        )

    @property
    def rank(self) -> int:
        return int(self.shared.shape[1])

    def factors_for(self, k: int) -> List[np.ndarray]:
        return [self.shared] + self.blocks[k]

    def to_model(self, penalty: float = 0.0) -> MultifacModel:
        return MultifacModel(
            self.shared.copy(),
            tuple(tuple(f.copy() for f in fs) for fs in self.blocks),
            penalty,
        )


def solve_ridge_system(
    rhs: np.ndarray, gram: np.ndarray, sigma: float, allow_pinv: bool = False
) -> np.ndarray:
    """``rhs (gram + sigma I)^-1`` through a Cholesky factorization."""
    rank = gram.shape[0]
    if rank == 0:
        return np.zeros((rhs.shape[0], 0))
    system = gram + sigma * np.eye(rank)
    try:
        factor = scipy.linalg.cho_factor(system, overwrite_a=False)
        return scipy.linalg.cho_solve(factor, rhs.T, overwrite_b=False).T
    except np.linalg.LinAlgError:
        if not allow_pinv:
            raise SingularSystemError(f"sigma={sigma:g}, rank {rank}") from None
        return rhs @ scipy.linalg.pinvh(system)


def ridge_update(
    unfolded: np.ndarray,
    companion_factors: Sequence[np.ndarray],
    sigma: float,
    allow_pinv: bool = False,
) -> np.ndarray:
    """``argmin_A ||X_(i) - A Z^T||^2 + sigma ||A||^2``.

    ``companion_factors`` are the other modes' factors in mode order; ``Z``
    is their Khatri-Rao product taken from the last mode down.
    """
    if not companion_factors:
        raise ShapeError("ridge update needs at least one companion factor")
    rank = companion_factors[0].shape[1]
    if any(f.shape[1] != rank for f in companion_factors):
        raise ShapeError("companion factors must share their column count")
    rows = int(np.prod([f.shape[0] for f in companion_factors]))
    if unfolded.ndim != 2 or unfolded.shape[1] != rows:
        raise ShapeError(
            f"unfolding of shape {unfolded.shape} needs {rows} columns "
            "to match the companion factors"
        )
    z = khatri_rao_many(list(companion_factors)[::-1])
    return solve_ridge_system(
        unfolded @ z, _gram_product(companion_factors), sigma, allow_pinv
    )


def _gram_product(factors: Sequence[np.ndarray]) -> np.ndarray:
    rank = factors[0].shape[1]
    gram = np.ones((rank, rank))
    for f in factors:
        gram *= f.T @ f
    return gram


def _companion_gram(factors: Sequence[np.ndarray], mode: int) -> np.ndarray:
    return _gram_product([f for n, f in enumerate(factors) if n != mode])


def sweep(
    tensors: Sequence[np.ndarray],
    state: FactorState,
    sigma: float,
    pattern: Optional[ZeroPattern] = None,
    allow_pinv: bool = False,
    on_block: Optional[Callable[[int, int], None]] = None,
) -> None:
    """One pass: shared factor first, then every tensor's modes in order.

    ``on_block(k, i)`` is called after each update; the shared update is
    reported as ``(-1, 0)``.
    """
    rank = state.rank
    if pattern is None:
        pattern = ZeroPattern.unconstrained(len(tensors), rank)

    live = np.flatnonzero(~pattern.dropped)
    rhs = np.zeros((state.shared.shape[0], rank))
    gram = np.zeros((rank, rank))
    for k, x in enumerate(tensors):
        factors = state.factors_for(k)
        rhs += mttkrp(x, factors, 0)
        gram += _companion_gram(factors, 0)
    shared = np.zeros_like(state.shared)
    shared[:, live] = solve_ridge_system(
        rhs[:, live], gram[np.ix_(live, live)], sigma, allow_pinv
    )
    state.shared = shared
    if on_block is not None:
        on_block(-1, 0)

    for k, x in enumerate(tensors):
        active = pattern.active(k)
        for i in range(len(state.blocks[k])):
            factors = state.factors_for(k)
            block = np.zeros_like(state.blocks[k][i])
            block[:, active] = solve_ridge_system(
                mttkrp(x, factors, i + 1)[:, active],
                _companion_gram(factors, i + 1)[np.ix_(active, active)],
                sigma,
                allow_pinv,
            )
            state.blocks[k][i] = block
            if on_block is not None:
                on_block(k, i)


def residual_sq(
    tensors: Sequence[np.ndarray],
    model: MultifacModel,
    masks: Optional[Sequence[np.ndarray]] = None,
) -> float:
    total = 0.0
    for k, x in enumerate(tensors):
        residual = x - model.reconstruct(k)
        if masks is not None:
            residual = residual[masks[k]]
        total += float(np.sum(residual**2))
    return total


def unpenalized_objective(data: LinkedTensorSet, model: MultifacModel) -> float:
    """Residual sum of squares over observed entries."""
    _check_shapes(data, model)
    return residual_sq(data.tensors, model, [m.observed for m in data.masks])


def penalized_objective(
    data: LinkedTensorSet, model: MultifacModel, sigma: float
) -> float:
    return unpenalized_objective(data, model) + sigma * model.squared_norm()


def _check_shapes(data: LinkedTensorSet, model: MultifacModel) -> None:
    if data.shapes != model.shapes:
        raise ShapeError(f"model shapes {model.shapes} do not match data {data.shapes}")


def temper_schedule(
    sigma: float,
    temper_steps: int,
    start_ratio: float = settings.temper_start_ratio,
) -> Iterator[float]:
    """Per-sweep penalties: geometric ramp from ``sigma / start_ratio``.

    The ramp spans ``temper_steps`` sweeps; afterwards sigma stays constant.
    """
    if temper_steps < 0:
        raise ValueError(f"temper_steps must be >= 0, got {temper_steps}")
    if temper_steps == 0 or sigma == 0.0:
        return repeat(float(sigma))
    base = sigma / start_ratio
    ramp = [base * start_ratio ** (t / temper_steps) for t in range(temper_steps)]
    return chain(ramp, repeat(float(sigma)))


def penalized_weight(lam_hat: float, sigma: float, order: int) -> float:
    """Rank-1 penalized weight ``argmin_{λ>=0} (λ - λ̂)^2 + Nσ λ^(2/N)``.

    For N = 2 this is soft-thresholding. For N >= 3 the interior minimizer is
    the larger root of ``(λ - λ̂) + σ λ^(2/N - 1) = 0``; it is returned only
    when it beats ``λ = 0`` strictly.
    """
    if lam_hat < 0 or sigma < 0 or order < 2:
        raise ValueError(
            f"need lam_hat >= 0, sigma >= 0, order >= 2; "
            f"got {lam_hat}, {sigma}, {order}"
        )
    if lam_hat == 0.0:
        return 0.0
    if sigma == 0.0:
        return float(lam_hat)
    if order == 2:
        return max(lam_hat - sigma, 0.0)

    p = 2.0 / order

    def slope(lam: float) -> float:
        return (lam - lam_hat) + sigma * lam ** (p - 1.0)

    def value(lam: float) -> float:
        return (lam - lam_hat) ** 2 + order * sigma * lam**p

    # slope is convex on (0, inf) with its minimum here
    turning = (sigma * (1.0 - p)) ** (1.0 / (2.0 - p))
    if turning == 0.0:
        return float(lam_hat)
    if turning >= lam_hat or slope(turning) >= 0.0:
        return 0.0
    root = scipy.optimize.brentq(
        slope, turning, lam_hat, xtol=1e-15 * lam_hat, rtol=4 * np.finfo(float).eps
    )
    return float(root) if value(root) < lam_hat**2 else 0.0


def zero_threshold(lam_hat: float, order: int) -> float:
    """Smallest sigma for which :func:`penalized_weight` returns 0."""
    if lam_hat < 0 or order < 2:
        raise ValueError(f"need lam_hat >= 0 and order >= 2, got {lam_hat}, {order}")
    tangent = lam_hat * (order - 2) / (order - 1)
    return float(lam_hat * tangent ** (1.0 - 2.0 / order) / (order - 1))


def soft_threshold_svd(x: np.ndarray, sigma: float) -> np.ndarray:
    """Matrix with its singular values soft-thresholded by ``sigma``."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    return (u * np.maximum(s - sigma, 0.0)) @ vt


def multi_start(
    fit: Callable[[int, np.random.Generator], T],
    n_starts: int,
    seed: Optional[int],
    objective: Callable[[T], float],
    threads: int = 1,
) -> Tuple[T, int, List[float]]:
    """Run ``fit`` from independent seeded starts and keep the best.

    Returns ``(best, index, objectives)``; ties go to the earliest start.
    """
    if n_starts < 1:
        raise ValueError(f"n_starts must be >= 1, got {n_starts}")
    runner = TaskRunner(threads=threads, label="starts")
    results = runner.map(lambda s: fit(s, child_rng(seed, s)), list(range(n_starts)))
    objectives = [float(objective(r)) for r in results]
    best = int(np.argmin(objectives))
    logger.debug(f"multi-start objectives {objectives}, keeping start {best}")
    return results[best], best, objectives


def init_state(
    tensors: Sequence[np.ndarray],
    rank: int,
    rng: np.random.Generator,
    pattern: Optional[ZeroPattern] = None,
) -> FactorState:
    """Standard-normal factors with columns scaled to ``(||X||/R)^(1/N)``."""
    scales = []
    for x in tensors:
        norm = float(np.linalg.norm(x))
        scales.append((norm / rank) ** (1.0 / x.ndim) if norm > 0 else 1.0)

    def draw(rows: int, scale: float) -> np.ndarray:
        a = rng.standard_normal((rows, rank))
        return a / np.linalg.norm(a, axis=0) * scale

    state = FactorState(
        shared=draw(tensors[0].shape[0], float(np.mean(scales))),
        blocks=[[draw(d, s) for d in x.shape[1:]] for x, s in zip(tensors, scales)],
    )
    if pattern is not None:
        state.shared[:, pattern.dropped] = 0.0
        for k, blocks in enumerate(state.blocks):
            for block in blocks:
                block[:, pattern.constrained[k]] = 0.0
    return state


def prune(
    tensors: Sequence[np.ndarray], model: MultifacModel, sigma: float
) -> MultifacModel:
    """Zero every component whose removal does not raise the objective.

    Components are visited per tensor from the lightest up; the shared column
    is dropped with the last tensor that uses it.
    """
    state = FactorState.from_model(model)
    residuals = [x - model.reconstruct(k) for k, x in enumerate(tensors)]
    weights = component_weights(model, settings.zero_threshold)
    in_use = weights.lambda_k > 0
    for k in range(len(tensors)):
        for r in np.argsort(weights.totals[k], kind="stable"):
            if not in_use[k, r]:
                continue
            factors = state.factors_for(k)
            piece = outer_sum([f[:, [r]] for f in factors])
            fit_loss = 2.0 * float(np.sum(residuals[k] * piece)) + float(
                np.sum(piece**2)
            )
            saving = sum(float(np.sum(f[:, r] ** 2)) for f in state.blocks[k])
            last_user = in_use[:, r].sum() == 1
            if last_user:
                saving += float(np.sum(state.shared[:, r] ** 2))
            if fit_loss - sigma * saving <= 0.0:
                for f in state.blocks[k]:
                    f[:, r] = 0.0
                residuals[k] += piece
                in_use[k, r] = False
                if last_user:
                    state.shared[:, r] = 0.0
    return state.to_model(model.penalty)


def rebalance(model: MultifacModel) -> MultifacModel:
    """Equalize column norms without changing any reconstruction.

    Within each tensor the non-shared columns of a component get equal norms
    (the geometric mean), which weakly lowers the penalty. With a single
    tensor the shared column joins the balance.
    """
    state = FactorState.from_model(model)
    single = len(state.blocks) == 1
    for k, blocks in enumerate(state.blocks):
        columns = ([state.shared] if single else []) + blocks
        norms = np.stack([np.linalg.norm(f, axis=0) for f in columns])
        product = np.prod(norms, axis=0)
        alive = product > 0
        target = np.power(product, 1.0 / len(columns))
        for f, n in zip(columns, norms):
            f[:, alive] *= target[alive] / n[alive]
            f[:, ~alive] = 0.0
    if not single:
        used = [
            np.prod([np.linalg.norm(f, axis=0) for f in fs], axis=0) > 0
            for fs in state.blocks
        ]
        unused = ~np.any(used, axis=0)
        state.shared[:, unused] = 0.0
    return state.to_model(model.penalty)


def finalize_factors(
    tensors: Sequence[np.ndarray], model: MultifacModel, sigma: float
) -> MultifacModel:
    """Prune, rebalance and put components in canonical order."""
    return canonicalize(rebalance(prune(tensors, model, sigma)))


@dataclass
class FitRun:
    model: MultifacModel
    trace: List[float] = field(default_factory=list)
    n_sweeps: int = 0
    converged: bool = False
    unpenalized: float = 0.0
    penalized: float = 0.0


def _alternate(
    tensors: Sequence[np.ndarray],
    state: FactorState,
    cfg: SolverConfig,
    pattern: Optional[ZeroPattern],
) -> FitRun:
    trace: List[float] = []
    converged = False
    previous: Optional[float] = None
    schedule = temper_schedule(cfg.sigma, cfg.temper_steps)
    for t, sigma_t in zip(range(cfg.max_iterations), schedule):
        sweep(tensors, state, sigma_t, pattern, cfg.allow_pinv)
        model = state.to_model(sigma_t)
        current = residual_sq(tensors, model) + sigma_t * model.squared_norm()
        trace.append(current)
        logger.debug(f"sweep {t}: sigma={sigma_t:.4g} objective={current:.10g}")
        if previous is not None and t > cfg.temper_steps:
            if previous - current <= cfg.tolerance * previous:
                converged = True
                break
        previous = current

    model = finalize_factors(tensors, state.to_model(cfg.sigma), cfg.sigma)
    unpenalized = residual_sq(tensors, model)
    return FitRun(
        model=model,
        trace=trace,
        n_sweeps=len(trace),
        converged=converged,
        unpenalized=unpenalized,
        penalized=unpenalized + cfg.sigma * model.squared_norm(),
    )


def check_pattern(
    pattern: Optional[ZeroPattern], n_tensors: int, rank: int
) -> Optional[ZeroPattern]:
    if pattern is not None and pattern.constrained.shape != (n_tensors, rank):
        raise ShapeError(
            f"zero pattern of shape {pattern.constrained.shape} for "
            f"{n_tensors} tensors at rank {rank}"
        )
    return pattern


def fit_multifac(
    data: LinkedTensorSet,
    cfg: SolverConfig,
    pattern: Optional[ZeroPattern] = None,
) -> Tuple[MultifacModel, FitReport]:
    """Fit the linked model to complete tensors."""
    if data.has_missing:
        raise MissingDataError(
            "data has missing entries; impute them with em_als instead"
        )
    check_pattern(pattern, data.n_tensors, cfg.rank)
    tensors = data.tensors
    logger.info(
        f"🔧 fitting {data.n_tensors} tensor(s) {data.shapes} at rank {cfg.rank}, "
        f"sigma={cfg.sigma:g}, {cfg.n_starts} start(s)"
    )

    def run(start: int, rng: np.random.Generator) -> FitRun:
        state = init_state(tensors, cfg.rank, rng, pattern)
        return _alternate(tensors, state, cfg, pattern)

    best, index, objectives = multi_start(
        run, cfg.n_starts, cfg.seed, lambda r: r.unpenalized, cfg.threads
    )
    report = build_report(best, cfg, index, objectives)
    logger.info(
        f"✅ fit done: {report.n_sweeps} sweeps, converged={report.converged}, "
        f"unpenalized={report.unpenalized_final:.6g}, "
        f"ranks={report.effective_ranks.ranks}"
    )
    return best.model, report


def build_report(
    run: FitRun, cfg: SolverConfig, index: int, objectives: List[float]
) -> FitReport:
    return FitReport(
        objective_trace=run.trace,
        unpenalized_final=run.unpenalized,
        penalized_final=run.penalized,
        sigma=cfg.sigma,
        n_sweeps=run.n_sweeps,
        converged=run.converged,
        start_index=index,
        start_objectives=objectives,
        effective_ranks=classify_structure(
            component_weights(run.model, cfg.zero_threshold)
        ),
    )


def fit_cp(x: np.ndarray, cfg: SolverConfig) -> Tuple[CpFactors, FitReport]:
    """Penalized CP decomposition of one complete tensor."""
    x = np.asarray(x, dtype=float)
    if np.isnan(x).any():
        raise MissingDataError(
            "tensor has missing entries; impute them with em_als instead"
        )
    if x.ndim < 2:
        raise ShapeError(f"CP fitting needs a tensor of order >= 2, got {x.ndim}")
    model, report = fit_multifac(LinkedTensorSet((x,)), cfg)
    return model.as_cp(0), report
