"""Seed derivation helpers.

Every stochastic component draws from its own child stream, keyed by the
user seed plus small integer stream codes, so sub-pipelines stay independent
and runs are reproducible bit for bit.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ValidationError


def seed_list(seed: int | Sequence[int]) -> list[int]:
    """Normalize a seed (int or sequence of ints) to a list of non-negative ints."""
    if isinstance(seed, (list, tuple)):
        values = [int(s) for s in seed]
    else:
        values = [int(seed)]
    if not values or any(v < 0 for v in values):
        raise ValidationError(f"seeds must be non-negative integers, got {seed!r}")
    return values


def child_rng(seed: int | Sequence[int], *stream: int) -> np.random.Generator:
    """Generator for the child stream `stream` of `seed`."""
    return np.random.default_rng(seed_list(seed) + [int(s) for s in stream])
