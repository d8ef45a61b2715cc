"""Dense tensors, observation masks and multilinear kernels.

Tensors are ``numpy`` float64 arrays in C (row-major) order. Modes are
0-based in the API and reported 1-based in error messages.

Mode-n unfolding follows the Kolda-Bader convention: the column index of
entry ``(i_1, ..., i_N)`` in ``X_(n)`` is ``sum_{m != n} i_m * J_m`` with
``J_m = prod_{l < m, l != n} I_l``, i.e. the earliest remaining mode varies
fastest. With that ordering ``X_(n) = A_n (A_N ⊙ ... ⊙ A_{n+1} ⊙ A_{n-1} ⊙ ...
⊙ A_1)^T`` for a CP tensor.
"""

from dataclasses import dataclass, field
from functools import reduce
from typing import FrozenSet, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import DegenerateDataError, ShapeError

_LETTERS = "abcdefghijklmnopqrstuvwxy"
_RANK = "z"


def _check_mode(ndim: int, mode: int) -> None:
    if not 0 <= mode < ndim:
        raise ShapeError(f"mode {mode + 1} is invalid for a {ndim}-way tensor")


def matricize(x: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding, shape ``(I_mode, prod of the other dims)``."""
    x = np.asarray(x, dtype=float)
    _check_mode(x.ndim, mode)
    return np.moveaxis(x, mode, 0).reshape((x.shape[mode], -1), order="F")


def fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`matricize`."""
    shape = tuple(int(s) for s in shape)
    _check_mode(len(shape), mode)
    rest = shape[:mode] + shape[mode + 1 :]
    expected = (shape[mode], int(np.prod(rest, dtype=np.int64)))
    if m.shape != expected:
        raise ShapeError(
            f"matrix of shape {m.shape} cannot fold along mode {mode + 1} "
            f"into {shape}; expected {expected}"
        )
    full = np.reshape(m, (shape[mode],) + rest, order="F")
    return np.ascontiguousarray(np.moveaxis(full, 0, mode))


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; column r is ``kron(a[:, r], b[:, r])``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"Khatri-Rao needs equal column counts, got {a.shape} and {b.shape}"
        )
    return np.einsum("iz,jz->ijz", a, b).reshape((-1, a.shape[1]))


def khatri_rao_many(matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Left-to-right Khatri-Rao product ``M_1 ⊙ M_2 ⊙ ...``."""
    if not matrices:
        raise ShapeError("Khatri-Rao product of an empty list")
    return reduce(khatri_rao, matrices)


def kronecker(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def hadamard(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if np.shape(x) != np.shape(y):
        raise ShapeError(f"Hadamard product of {np.shape(x)} and {np.shape(y)}")
    return np.multiply(x, y)


def frobenius_norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(np.ravel(x)))


def rse(
    estimate: np.ndarray,
    truth: np.ndarray,
    subset: Union["ObservationMask", np.ndarray, None] = None,
) -> float:
    """Relative squared error ``||estimate - truth||^2 / ||truth||^2``.

    ``subset`` restricts both norms to the selected entries.
    """
    if np.shape(estimate) != np.shape(truth):
        raise ShapeError(f"RSE of {np.shape(estimate)} against {np.shape(truth)}")
    diff = np.asarray(estimate, dtype=float) - truth
    ref = np.asarray(truth, dtype=float)
    if subset is not None:
        selected = subset.observed if isinstance(subset, ObservationMask) else subset
        if selected.shape != ref.shape:
            raise ShapeError(f"subset of shape {selected.shape} for {ref.shape}")
        diff = diff[selected]
        ref = ref[selected]
    denominator = float(np.sum(ref**2))
    if denominator == 0.0:
        raise DegenerateDataError("RSE is undefined for a zero-norm truth")
    return float(np.sum(diff**2)) / denominator


def mttkrp(x: np.ndarray, factors: Sequence[np.ndarray], mode: int) -> np.ndarray:
    """``X_(mode)`` times the Khatri-Rao product of the other factors.

    Equivalent to ``matricize(x, mode) @ khatri_rao_many(others[::-1])``
    without forming the Khatri-Rao matrix.
    """
    _check_mode(x.ndim, mode)
    if len(factors) != x.ndim:
        raise ShapeError(f"{len(factors)} factors for a {x.ndim}-way tensor")
    idx = _LETTERS[: x.ndim]
    operands = [x]
    terms = [idx]
    for n, factor in enumerate(factors):
        if n != mode:
            operands.append(factor)
            terms.append(idx[n] + _RANK)
    subscripts = ",".join(terms) + "->" + idx[mode] + _RANK
    return np.einsum(subscripts, *operands, optimize=True)


def outer_sum(
    factors: Sequence[np.ndarray], weights: Optional[np.ndarray] = None
) -> np.ndarray:
    """Sum of rank-1 outer products ``sum_r w_r a_1r ∘ ... ∘ a_Nr``."""
    if not factors:
        raise ShapeError("no factor matrices")
    rank = factors[0].shape[1]
    if any(f.ndim != 2 or f.shape[1] != rank for f in factors):
        raise ShapeError("factor matrices must share their column count")
    shape = tuple(f.shape[0] for f in factors)
    if rank == 0:
        return np.zeros(shape)
    idx = _LETTERS[: len(factors)]
    terms = [c + _RANK for c in idx]
    operands = list(factors)
    if weights is not None:
        terms.append(_RANK)
        operands.append(np.asarray(weights, dtype=float))
    return np.ascontiguousarray(
        np.einsum(",".join(terms) + "->" + idx, *operands, optimize=True)
    )


@dataclass(frozen=True)
class ObservationMask:
    """Which entries of a tensor are observed (``True``) or missing."""

    observed: np.ndarray

    def __post_init__(self) -> None:
        observed = np.asarray(self.observed, dtype=bool)
        if observed.ndim < 1:
            raise ShapeError("observation mask needs at least one mode")
        observed = observed.copy()
        observed.flags.writeable = False
        object.__setattr__(self, "observed", observed)

    @classmethod
    def full(cls, shape: Sequence[int]) -> "ObservationMask":
        return cls(np.ones(tuple(shape), dtype=bool))

    @classmethod
    def from_values(cls, values: np.ndarray) -> "ObservationMask":
        """Observed wherever ``values`` is not NaN."""
        return cls(~np.isnan(np.asarray(values, dtype=float)))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.observed.shape)

    @property
    def missing(self) -> np.ndarray:
        return ~self.observed

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    @property
    def complete(self) -> bool:
        return bool(self.observed.all())

    @property
    def tensorwise_missing_slabs(self) -> FrozenSet[int]:
        """First-mode indices whose whole slab is unobserved."""
        per_slab = self.observed.reshape((self.shape[0], -1)).any(axis=1)
        return frozenset(int(i) for i in np.flatnonzero(~per_slab))

    @property
    def slab_missing(self) -> np.ndarray:
        """Boolean array marking entries that belong to fully missing slabs."""
        per_slab = ~self.observed.reshape((self.shape[0], -1)).any(axis=1)
        return np.broadcast_to(
            per_slab.reshape((-1,) + (1,) * (self.observed.ndim - 1)), self.shape
        ).copy()

    @property
    def entrywise_missing(self) -> np.ndarray:
        """Missing entries that are not part of a fully missing slab."""
        return self.missing & ~self.slab_missing

    def hide(self, hidden: np.ndarray) -> "ObservationMask":
        """Mask with the ``hidden`` entries additionally marked missing."""
        if hidden.shape != self.shape:
            raise ShapeError(f"hidden set of shape {hidden.shape} for {self.shape}")
        return ObservationMask(self.observed & ~hidden)


@dataclass(frozen=True)
class LinkedTensorSet:
    """K tensors sharing their first mode, with per-tensor masks.

    Missing slots hold 0.0 in ``tensors``; the mask is authoritative.
    """

    tensors: Tuple[np.ndarray, ...]
    masks: Tuple[ObservationMask, ...] = field(default=())

    def __post_init__(self) -> None:
        tensors = tuple(np.array(t, dtype=float) for t in self.tensors)
        if not tensors:
            raise ShapeError("a linked set needs at least one tensor")
        masks = tuple(self.masks) or tuple(
            ObservationMask.full(t.shape) for t in tensors
        )
        if len(masks) != len(tensors):
            raise ShapeError(f"{len(masks)} masks for {len(tensors)} tensors")
        shared = tensors[0].shape[0] if tensors[0].ndim else 0
        mismatched = [
            k + 1
            for k, t in enumerate(tensors)
            if t.ndim < 2 or t.shape[0] != shared
        ]
        if mismatched:
            sizes = ", ".join(
                f"tensor {k}: {tensors[k - 1].shape}" for k in [1] + mismatched
            )
            raise ShapeError(
                f"tensors {mismatched} do not share the first mode ({sizes})"
            )
        for k, (t, m) in enumerate(zip(tensors, masks)):
            if m.shape != t.shape:
                raise ShapeError(f"tensor {k + 1}: mask {m.shape} vs data {t.shape}")
            bad = ~np.isfinite(t) & m.observed
            if bad.any():
                raise DegenerateDataError(
                    f"tensor {k + 1}: {int(bad.sum())} observed entries are not finite"
                )
            t[m.missing] = 0.0
            t.flags.writeable = False
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "masks", masks)

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "LinkedTensorSet":
        """Build from arrays where NaN marks a missing entry."""
        values = [np.asarray(a, dtype=float) for a in arrays]
        masks = tuple(ObservationMask.from_values(v) for v in values)
        return cls(tuple(np.nan_to_num(v, nan=0.0) for v in values), masks)

    @property
    def n_tensors(self) -> int:
        return len(self.tensors)

    @property
    def shared_dim(self) -> int:
        return int(self.tensors[0].shape[0])

    @property
    def shapes(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(tuple(t.shape) for t in self.tensors)

    @property
    def has_missing(self) -> bool:
        return not all(m.complete for m in self.masks)

    def with_masks(self, masks: Sequence[ObservationMask]) -> "LinkedTensorSet":
        return LinkedTensorSet(self.tensors, tuple(masks))

    def with_values(self, tensors: Sequence[np.ndarray]) -> "LinkedTensorSet":
        """Same masks, new values (missing slots are zeroed)."""
        return LinkedTensorSet(tuple(tensors), self.masks)

    def completed(self, tensors: Sequence[np.ndarray]) -> "LinkedTensorSet":
        """Fully observed set holding ``tensors``."""
        return LinkedTensorSet(tuple(tensors))

    def as_nan_arrays(self) -> Tuple[np.ndarray, ...]:
        """Values with NaN in missing slots, the on-disk representation."""
        out = []
        for t, m in zip(self.tensors, self.masks):
            values = np.array(t, dtype=float)
            values[m.missing] = np.nan
            out.append(values)
        return tuple(out)

    def observed_norm_sq(self) -> float:
        return float(
            sum(np.sum(t[m.observed] ** 2) for t, m in zip(self.tensors, self.masks))
        )
