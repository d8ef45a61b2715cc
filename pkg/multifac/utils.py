"""Seeded random streams."""

from typing import Optional

import numpy as np


def child_seed(seed: Optional[int], *keys: int) -> np.random.SeedSequence:
    """Independent seed sequence for the task identified by ``keys``.

    The same ``(seed, keys)`` always yields the same stream, whatever order
    the tasks run in.
    """
    return np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))


def child_rng(seed: Optional[int], *keys: int) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, *keys))


def draw_seed(rng: np.random.Generator) -> int:
    """Integer seed drawn from ``rng`` for APIs that take plain ints."""
    return int(rng.integers(0, 2**63 - 1))
