"""Synthetic tasks and games with known structure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import make_rng

LINEAR_WEIGHTS = np.array([1.5, -1.2, 1.0, -0.8, 0.6, -0.4, 0.2, 0.0])
INTERACTIONS = ((0, 1, 1.0), (2, 3, -0.8))


@dataclass
class SyntheticTask:
    x: np.ndarray
    y: np.ndarray
    score: np.ndarray
    feature_names: list[str]


def interaction_task(rows: int = 5000, seed: int = 0, interaction: float = 1.0) -> SyntheticTask:
    """Eight standard-normal features; label = 1[w.x + pairwise terms > 0].

    The label is a deterministic function of the score, so the Bayes-optimal AUC
    is 1. Feature 7 has zero weight and never enters the score.
    ``interaction=0`` gives a linearly separable task.
    """
    rng = make_rng(seed, 0x5E7)
    x = rng.standard_normal((rows, LINEAR_WEIGHTS.size))
    score = x @ LINEAR_WEIGHTS
    for i, j, c in INTERACTIONS:
        score = score + interaction * c * x[:, i] * x[:, j]
    y = (score > 0).astype(np.int64)
    return SyntheticTask(x, y, score, [f"x{i}" for i in range(LINEAR_WEIGHTS.size)])


def additive_game(weights):
    """``v(S) = sum_{i in S} w_i``."""
    w = np.asarray(weights, dtype=float)
    return lambda masks: np.asarray(masks, dtype=float) @ w


def random_game(n: int, seed: int, hidden: int = 8):
    """A small random tanh network evaluated on a masked random point."""
    rng = make_rng(seed, 0x6A3E)
    w1 = rng.standard_normal((n, hidden))
    w2 = rng.standard_normal(hidden)
    x = rng.standard_normal(n)
    return lambda masks: np.tanh((np.asarray(masks, dtype=float) * x) @ w1) @ w2
