"""Seeded stratified train/test splitting."""

from __future__ import annotations

import math

import numpy as np

from .samples import ChatSample


def split_stratified(samples: list[ChatSample], test_frac: float, seed: int):
    """Per-category split: floor(n * test_frac) samples to test, seeded shuffle.

    Categories with a single sample go entirely to train. Both outputs keep
    the input ordering; no sample appears in both.
    """
    if not samples:
        raise ValueError("empty input")
    if not 0.0 < test_frac < 1.0:
        raise ValueError("test_frac must be in (0, 1)")

    by_category: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_category.setdefault(s.category, []).append(i)

    rng = np.random.default_rng(seed)
    test_indices: set[int] = set()
    for slug in sorted(by_category):
        indices = by_category[slug]
        if len(indices) == 1:
            continue
        n_test = math.floor(len(indices) * test_frac)
        if n_test == 0:
            continue
        order = rng.permutation(len(indices))
        test_indices.update(indices[j] for j in order[:n_test])

    train = [s for i, s in enumerate(samples) if i not in test_indices]
    test = [s for i, s in enumerate(samples) if i in test_indices]
    return train, test
