"""CP and linked-tensor factorizations, component weights and structure."""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, computed_field

from config import settings

from .exceptions import DegenerateDataError, ShapeError
from .tensor import LinkedTensorSet, outer_sum


@dataclass(frozen=True)
class CpFactors:
    """Factor matrices ``A_1..A_N`` of a CP model, each ``I_n x R``."""

    factors: Tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        factors = tuple(np.asarray(f, dtype=float) for f in self.factors)
        if not factors:
            raise ShapeError("a CP model needs at least one factor matrix")
        if any(f.ndim != 2 or f.shape[1] != factors[0].shape[1] for f in factors):
            raise ShapeError("factor matrices must share their column count")
        object.__setattr__(self, "factors", factors)

    @property
    def rank(self) -> int:
        return int(self.factors[0].shape[1])

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)


@dataclass(frozen=True)
class NormalizedCp:
    """``[[λ; Ã_1, ..., Ã_N]]`` with unit (or zero) columns."""

    weights: np.ndarray
    unit_factors: Tuple[np.ndarray, ...]


@dataclass(frozen=True)
class MultifacModel:
    """Shared factor ``A0`` plus per-tensor factor lists ``A_i^(k)``."""

    shared_factor: np.ndarray
    tensor_factors: Tuple[Tuple[np.ndarray, ...], ...]
    penalty: float = 0.0

    def __post_init__(self) -> None:
        shared = np.asarray(self.shared_factor, dtype=float)
        tensor_factors = tuple(
            tuple(np.asarray(f, dtype=float) for f in factors)
            for factors in self.tensor_factors
        )
        if shared.ndim != 2:
            raise ShapeError("shared factor must be a matrix")
        if not tensor_factors or any(not factors for factors in tensor_factors):
            raise ShapeError("every tensor needs at least one non-shared factor")
        rank = shared.shape[1]
        for k, factors in enumerate(tensor_factors):
            for i, f in enumerate(factors):
                if f.ndim != 2 or f.shape[1] != rank:
                    raise ShapeError(
                        f"tensor {k + 1}, mode {i + 2}: factor has shape "
                        f"{f.shape}, expected {rank} columns"
                    )
        object.__setattr__(self, "shared_factor", shared)
        object.__setattr__(self, "tensor_factors", tensor_factors)

    @classmethod
    def from_cp(cls, cp: CpFactors, penalty: float = 0.0) -> "MultifacModel":
        """Single-tensor model whose first mode plays the shared role."""
        if len(cp.factors) < 2:
            raise ShapeError("a linked model needs tensors of order >= 2")
        return cls(cp.factors[0], (tuple(cp.factors[1:]),), penalty)

    @classmethod
    def zeros(
        cls, shapes: Sequence[Sequence[int]], rank: int, penalty: float = 0.0
    ) -> "MultifacModel":
        return cls(
            np.zeros((shapes[0][0], rank)),
            tuple(tuple(np.zeros((d, rank)) for d in shape[1:]) for shape in shapes),
            penalty,
        )

    @property
    def rank(self) -> int:
        return int(self.shared_factor.shape[1])

    @property
    def n_tensors(self) -> int:
        return len(self.tensor_factors)

    @property
    def shapes(self) -> Tuple[Tuple[int, ...], ...]:
        i0 = self.shared_factor.shape[0]
        return tuple(
            (i0,) + tuple(f.shape[0] for f in factors)
            for factors in self.tensor_factors
        )

    def factors_for(self, k: int) -> Tuple[np.ndarray, ...]:
        """All factor matrices of tensor ``k``, shared mode first."""
        self._check_tensor(k)
        return (self.shared_factor,) + self.tensor_factors[k]

    def as_cp(self, k: int = 0) -> CpFactors:
        return CpFactors(self.factors_for(k))

    def reconstruct(self, k: int) -> np.ndarray:
        return outer_sum(self.factors_for(k))

    def squared_norm(self) -> float:
        """``||A0||^2 + sum_k sum_i ||A_i^(k)||^2``."""
        total = float(np.sum(self.shared_factor**2))
        for factors in self.tensor_factors:
            total += sum(float(np.sum(f**2)) for f in factors)
        return total

    def _check_tensor(self, k: int) -> None:
        if not 0 <= k < self.n_tensors:
            raise ShapeError(
                f"tensor {k + 1} does not exist in a model of {self.n_tensors}"
            )


@dataclass(frozen=True)
class ComponentWeights:
    """Per-component weights of a linked model.

    ``lambda0[r]`` is the norm of shared column r; ``lambda_k[k, r]`` the
    product of tensor k's non-shared column norms.
    """

    lambda0: np.ndarray
    lambda_k: np.ndarray
    activity: np.ndarray
    threshold: float

    @property
    def totals(self) -> np.ndarray:
        """``K x R`` table of total weights ``λ0_r · λ_(0)k,r``."""
        return self.lambda0[np.newaxis, :] * self.lambda_k


class StructurePattern(BaseModel):
    """Partition of the R components by the tensors they are active in."""

    model_config = ConfigDict(frozen=True)

    n_components: int = Field(..., ge=0, description="Rank budget R")
    shared: List[int] = Field(default_factory=list)
    individual: List[List[int]] = Field(default_factory=list)
    partial: List[int] = Field(
        default_factory=list, description="Active in 2..K-1 tensors (K >= 3)"
    )
    zero: List[int] = Field(default_factory=list)
    activity: List[List[bool]] = Field(
        default_factory=list, description="K x R activity table"
    )

    @computed_field  # type: ignore[misc]
    @property
    def rank_shared(self) -> int:
        return len(self.shared)

    @computed_field  # type: ignore[misc]
    @property
    def rank_individual(self) -> List[int]:
        return [len(components) for components in self.individual]

    @computed_field  # type: ignore[misc]
    @property
    def total_rank(self) -> int:
        """Components active in at least one tensor."""
        return self.n_components - len(self.zero)

    @property
    def n_tensors(self) -> int:
        return len(self.individual)

    @property
    def ranks(self) -> Tuple[int, ...]:
        return (self.rank_shared, *self.rank_individual)

    def active_in(self, k: int) -> List[int]:
        return [r for r, active in enumerate(self.activity[k]) if active]

    def partial_groups(self) -> Dict[Tuple[int, ...], List[int]]:
        """Partially shared components keyed by the tensors they live in."""
        groups: Dict[Tuple[int, ...], List[int]] = {}
        for r in self.partial:
            key = tuple(k for k in range(self.n_tensors) if self.activity[k][r])
            groups.setdefault(key, []).append(r)
        return groups


def cp_reconstruct(f: CpFactors) -> np.ndarray:
    return outer_sum(f.factors)


def normalize(f: CpFactors) -> NormalizedCp:
    """Absorb column norms into weights ``λ_r = prod_n ||a_nr||``."""
    norms = np.stack([np.linalg.norm(a, axis=0) for a in f.factors])
    weights = np.prod(norms, axis=0)
    alive = weights > 0
    units = []
    for a, n in zip(f.factors, norms):
        unit = np.zeros_like(a)
        unit[:, alive] = a[:, alive] / n[alive]
        units.append(unit)
    return NormalizedCp(
        weights=np.where(alive, weights, 0.0), unit_factors=tuple(units)
    )


def denormalize(n: NormalizedCp) -> CpFactors:
    """Spread each weight evenly as ``λ_r^(1/N)`` over the modes."""
    scale = np.power(n.weights, 1.0 / len(n.unit_factors))
    return CpFactors(tuple(u * scale for u in n.unit_factors))


def component_weights(
    m: MultifacModel, threshold: float = settings.zero_threshold
) -> ComponentWeights:
    """Weights and per-tensor activity of every component."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"zero threshold must lie in (0, 1), got {threshold}")
    lambda0 = np.linalg.norm(m.shared_factor, axis=0)
    lambda_k = np.stack(
        [
            np.prod(np.stack([np.linalg.norm(f, axis=0) for f in factors]), axis=0)
            for factors in m.tensor_factors
        ]
    )
    totals = lambda0[np.newaxis, :] * lambda_k
    top = float(totals.max()) if totals.size else 0.0
    if top > 0.0:
        activity = totals > threshold * top
    else:
        activity = np.zeros_like(totals, dtype=bool)
    return ComponentWeights(lambda0, lambda_k, activity, threshold)


def classify_structure(w: ComponentWeights) -> StructurePattern:
    """Split components into shared, individual, partially shared and zero."""
    activity = np.asarray(w.activity, dtype=bool)
    n_tensors, rank = activity.shape
    counts = activity.sum(axis=0)
    shared = [r for r in range(rank) if counts[r] == n_tensors and n_tensors > 0]
    zero = [r for r in range(rank) if counts[r] == 0]
    individual: List[List[int]] = [[] for _ in range(n_tensors)]
    partial = []
    for r in range(rank):
        if counts[r] == 1 and n_tensors > 1:
            individual[int(np.flatnonzero(activity[:, r])[0])].append(r)
        elif 1 < counts[r] < n_tensors:
            partial.append(r)
    return StructurePattern(
        n_components=rank,
        shared=shared,
        individual=individual,
        partial=partial,
        zero=zero,
        activity=activity.tolist(),
    )


def reconstruct_structure(
    m: MultifacModel, k: int, subset: Iterable[int]
) -> np.ndarray:
    """CP reconstruction of tensor ``k`` from the components in ``subset``."""
    factors = m.factors_for(k)
    columns = sorted(set(int(r) for r in subset))
    if any(not 0 <= r < m.rank for r in columns):
        raise ShapeError(f"components {columns} outside rank budget {m.rank}")
    return outer_sum([f[:, columns] for f in factors])


def variance_explained(
    m: MultifacModel,
    data: LinkedTensorSet,
    threshold: float = settings.zero_threshold,
) -> pd.DataFrame:
    """Proportion of variance explained per tensor, by structure.

    Computed over observed entries. Ranks come from the structure pattern.
    """
    if m.shapes != data.shapes:
        raise ShapeError(f"model shapes {m.shapes} do not match data {data.shapes}")
    pattern = classify_structure(component_weights(m, threshold))
    rows = []
    for k, (x, mask) in enumerate(zip(data.tensors, data.masks)):
        denominator = float(np.sum(x[mask.observed] ** 2))
        if mask.n_observed == 0 or denominator == 0.0:
            raise DegenerateDataError(f"tensor {k + 1} has no observed signal")
        structures = {
            "total": pattern.active_in(k),
            "shared": pattern.shared,
            "individual": pattern.individual[k] if m.n_tensors > 1 else [],
        }
        row: Dict[str, float] = {"tensor": k + 1}
        for name, components in structures.items():
            estimate = reconstruct_structure(m, k, components)
            row[name] = float(np.sum(estimate[mask.observed] ** 2)) / denominator
            row[f"rank_{name}"] = len(components)
        rows.append(row)
    return pd.DataFrame(rows).set_index("tensor")


def canonicalize(m: MultifacModel) -> MultifacModel:
    """Sort components by total weight (descending) and fix signs.

    Each shared column's largest-magnitude entry is made positive; the first
    non-shared factor of every tensor absorbs the flip.
    """
    weights = component_weights(m, settings.zero_threshold)
    order = np.argsort(-weights.totals.sum(axis=0), kind="stable")
    shared = m.shared_factor[:, order].copy()
    tensor_factors = [
        [f[:, order].copy() for f in factors] for factors in m.tensor_factors
    ]
    if shared.shape[0]:
        pivots = shared[np.argmax(np.abs(shared), axis=0), np.arange(shared.shape[1])]
        flips = np.where(pivots < 0, -1.0, 1.0)
        shared *= flips
        for factors in tensor_factors:
            factors[0] *= flips
    return MultifacModel(
        shared, tuple(tuple(factors) for factors in tensor_factors), m.penalty
    )
