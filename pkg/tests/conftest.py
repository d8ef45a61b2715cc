"""Shared fixtures: seeded generators and small low-rank tensors."""

from typing import Callable, List, Sequence

import numpy as np
import pytest

from multifac.solver import SolverConfig
from multifac.tensor import outer_sum


def random_factors(
    rng: np.random.Generator, shape: Sequence[int], rank: int
) -> List[np.ndarray]:
    return [rng.standard_normal((d, rank)) for d in shape]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def low_rank(rng: np.random.Generator) -> Callable[..., np.ndarray]:
    """Factory for noiseless CP tensors of a given shape and rank."""

    def make(shape: Sequence[int], rank: int) -> np.ndarray:
        return outer_sum(random_factors(rng, shape, rank))

    return make


@pytest.fixture
def tight_solver() -> Callable[..., SolverConfig]:
    """Solver settings for exact-recovery checks on tiny tensors."""

    def make(rank: int, sigma: float = 0.0, **overrides: object) -> SolverConfig:
        options = dict(
            rank=rank,
            sigma=sigma,
            tolerance=1e-14,
            max_iterations=3000,
            n_starts=5,
            temper_steps=0,
            seed=7,
            threads=1,
        )
        options.update(overrides)
        return SolverConfig(**options)

    return make
