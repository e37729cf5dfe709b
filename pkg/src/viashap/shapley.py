"""Shapley machinery: kernel weights, coalition sampling, masking and oracles.

Games are batched: a game is any callable mapping a boolean mask matrix of
shape ``(m, n)`` to values of shape ``(m,)`` or ``(m, d)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import DTYPE, make_rng

logger = logging.getLogger(__name__)

Game = Callable[[np.ndarray], np.ndarray]

EXACT_MAX_FEATURES = 20


def shapley_kernel_weight(n: int, s: int) -> float:
    """Shapley kernel ``(n - 1) / (C(n, s) * s * (n - s))`` for ``1 <= s <= n - 1``."""
    if not 1 <= s <= n - 1:
        raise ValueError(
            f"coalition size {s} has infinite kernel weight for n={n}; "
            "the empty and full coalitions are handled by the efficiency constraint"
        )
    if n > 30:
        log_comb = math.lgamma(n + 1) - math.lgamma(s + 1) - math.lgamma(n - s + 1)
        return math.exp(math.log(n - 1) - log_comb - math.log(s) - math.log(n - s))
    return (n - 1) / (math.comb(n, s) * s * (n - s))


def coalition_size_distribution(n: int) -> np.ndarray:
    """p(s) for s = 1..n-1 when S is drawn proportionally to the Shapley kernel.

    Summing the kernel over the C(n, s) subsets of size s leaves a weight
    proportional to 1 / (s (n - s)).
    """
    if n < 2:
        raise ValueError("coalition sampling needs at least two features")
    s = np.arange(1, n, dtype=DTYPE)
    w = (n - 1) / (s * (n - s))
    return w / w.sum()


@dataclass(frozen=True)
class CoalitionMask:
    """Subset of ``range(n)`` stored as an int bitset (bit i set <=> i in S)."""

    bits: int
    n: int
    cardinality: int = field(init=False, compare=False)

    def __post_init__(self) -> None:
        if self.bits < 0 or self.bits >> self.n:
            raise ValueError(f"bits {self.bits:#x} do not fit {self.n} features")
        object.__setattr__(self, "cardinality", bin(self.bits).count("1"))

    @classmethod
    def from_array(cls, mask) -> "CoalitionMask":
        mask = np.asarray(mask, dtype=bool)
        bits = 0
        for i in np.flatnonzero(mask):
            bits |= 1 << int(i)
        return cls(bits, mask.size)

    @classmethod
    def from_indices(cls, indices, n: int) -> "CoalitionMask":
        bits = 0
        for i in indices:
            bits |= 1 << int(i)
        return cls(bits, n)

    @classmethod
    def full(cls, n: int) -> "CoalitionMask":
        return cls((1 << n) - 1, n)

    @classmethod
    def empty(cls, n: int) -> "CoalitionMask":
        return cls(0, n)

    def __contains__(self, i: int) -> bool:
        return bool(self.bits >> i & 1)

    def to_array(self) -> np.ndarray:
        return (self.bits >> np.arange(self.n, dtype=object) & 1).astype(bool)


class KernelSampler:
    """Draws coalitions with probability proportional to the Shapley kernel.

    A size is drawn by inversion from :func:`coalition_size_distribution`, then a
    uniformly random subset of that size. The empty and full sets never occur.
    """

    def __init__(self, n: int, rng: np.random.Generator | int | None = None) -> None:
        self.n = n
        self.size_probs = coalition_size_distribution(n)
        self.cdf = np.cumsum(self.size_probs)
        self.cdf[-1] = 1.0
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = make_rng(0 if rng is None else int(rng), 0x5A3)
        self.rng = rng

    def sample_sizes(self, m: int) -> np.ndarray:
        return np.searchsorted(self.cdf, self.rng.random(m), side="right") + 1

    def sample(self, m: int) -> np.ndarray:
        """Boolean mask matrix of shape ``(m, n)``."""
        sizes = self.sample_sizes(m)
        # Rank of a uniform key is a uniformly random permutation position.
        ranks = np.argsort(np.argsort(self.rng.random((m, self.n)), axis=1), axis=1)
        return ranks < sizes[:, None]

    def sample_paired(self, m: int) -> np.ndarray:
        """``m`` masks (m even) arranged as complement pairs ``S, N \\ S``."""
        if m % 2:
            raise ValueError("paired sampling needs an even number of masks")
        half = self.sample(m // 2)
        out = np.empty((m, self.n), dtype=bool)
        out[0::2] = half
        out[1::2] = ~half
        return out


def sample_coalition(sampler: KernelSampler) -> CoalitionMask:
    return CoalitionMask.from_array(sampler.sample(1)[0])


VALUE_FUNCTIONS = ("baseline_removal", "marginal_expectation")


@dataclass
class ValueFunction:
    """How absent features are filled in.

    ``baseline_removal`` puts the baseline value in every absent slot;
    ``marginal_expectation`` yields one completed row per background row and the
    caller averages the model outputs over them.
    """

    kind: str
    baseline: np.ndarray
    background: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in VALUE_FUNCTIONS:
            raise ValueError(f"unknown value function {self.kind!r}; expected one of {VALUE_FUNCTIONS}")
        self.baseline = np.asarray(self.baseline, dtype=DTYPE)
        if self.kind == "marginal_expectation":
            if self.background is None or len(self.background) == 0:
                raise ValueError("marginal expectations need at least one background row")
            self.background = np.asarray(self.background, dtype=DTYPE)

    @classmethod
    def baseline_removal(cls, n_or_baseline) -> "ValueFunction":
        if np.ndim(n_or_baseline) == 0:
            return cls("baseline_removal", np.zeros(int(n_or_baseline)))
        return cls("baseline_removal", np.asarray(n_or_baseline, dtype=DTYPE))

    @classmethod
    def marginal(cls, rows: np.ndarray, count: int = 128, seed: int = 0) -> "ValueFunction":
        rows = np.asarray(rows, dtype=DTYPE)
        if len(rows) == 0:
            raise ValueError("marginal expectations need at least one background row")
        if len(rows) > count:
            rows = rows[make_rng(seed, 0xB6).choice(len(rows), size=count, replace=False)]
        return cls("marginal_expectation", np.zeros(rows.shape[1]), rows)

    @property
    def n_features(self) -> int:
        return self.baseline.shape[0]

    @property
    def fill_rows(self) -> np.ndarray:
        """Rows supplying absent values, shape ``(G, n)``."""
        if self.kind == "baseline_removal":
            return self.baseline[None, :]
        return self.background

    @property
    def group_size(self) -> int:
        return self.fill_rows.shape[0]

    def fill(self, x: np.ndarray, masks: np.ndarray) -> np.ndarray:
        """Masked copies of ``x``: shape ``broadcast(x, masks)[:-1] + (G, n)``."""
        x = np.asarray(x, dtype=DTYPE)
        masks = np.asarray(masks, dtype=bool)
        return np.where(masks[..., None, :], x[..., None, :], self.fill_rows)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "baseline": self.baseline.tolist()}
        if self.background is not None:
            d["background"] = self.background.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ValueFunction":
        bg = d.get("background")
        return cls(d["kind"], np.asarray(d["baseline"]), None if bg is None else np.asarray(bg))


def apply_mask(x: np.ndarray, mask, vf: ValueFunction) -> np.ndarray:
    """Masked input for one coalition.

    Returns a single vector under baseline removal and ``(G, n)`` rows (one per
    background row) under marginal expectations.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.shape != (vf.n_features,):
        raise ValueError(f"expected x of length {vf.n_features}, got shape {x.shape}")
    m = mask.to_array() if isinstance(mask, CoalitionMask) else np.asarray(mask, dtype=bool)
    rows = vf.fill(x, m)
    return rows[0] if vf.kind == "baseline_removal" else rows


def model_game(net, x: np.ndarray, vf: ValueFunction, output: int | None = None, chunk: int = 16384) -> Game:
    """The coalition game ``S -> logit(x^S)`` of a network, averaged over fill rows.

    Works on the pre-link scale. With ``output=None`` values have shape ``(m, d)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    g = vf.group_size

    def game(masks: np.ndarray) -> np.ndarray:
        rows = vf.fill(x, masks).reshape(-1, x.shape[0])
        out = np.concatenate(
            [net.logits(rows[i : i + chunk]) for i in range(0, len(rows), chunk)], axis=0
        )
        out = out.reshape(len(masks), g, -1).mean(axis=1)
        return out[:, output] if output is not None else out

    return game


def all_masks(n: int) -> np.ndarray:
    codes = np.arange(1 << n, dtype=np.int64)
    return (codes[:, None] >> np.arange(n)) & 1 == 1


def _evaluate(game: Game, masks: np.ndarray) -> np.ndarray:
    values = np.asarray(game(masks), dtype=DTYPE)
    if values.shape[0] != len(masks):
        raise ValueError(f"game returned {values.shape[0]} values for {len(masks)} masks")
    bad = ~np.isfinite(values.reshape(len(masks), -1)).all(axis=1)
    if bad.any():
        mask = CoalitionMask.from_array(masks[np.argmax(bad)])
        raise FloatingPointError(f"game value is not finite for coalition bits {mask.bits:#x}")
    return values


def exact_shapley(game: Game, n: int, chunk: int = 1 << 16) -> np.ndarray:
    """Shapley values by full enumeration of the 2^n coalitions.

    Returns shape ``(n,)`` for scalar games and ``(n, d)`` for vector games.
    """
    if n > EXACT_MAX_FEATURES:
        raise ValueError(
            f"exact enumeration is limited to n <= {EXACT_MAX_FEATURES} (got {n}); "
            "use unbiased_kernelshap instead"
        )
    if n < 1:
        raise ValueError("need at least one player")
    masks = all_masks(n)
    values = np.concatenate([_evaluate(game, masks[i : i + chunk]) for i in range(0, len(masks), chunk)])
    codes = np.arange(1 << n, dtype=np.int64)
    sizes = masks.sum(axis=1)
    # weight(s) = s! (n - s - 1)! / n!
    w = np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])
    phi = np.zeros((n,) + values.shape[1:])
    for i in range(n):
        without = codes[(codes >> i) & 1 == 0]
        contrib = values[without | (1 << i)] - values[without]
        weights = w[sizes[without]]
        phi[i] = np.tensordot(weights, contrib, axes=(0, 0))
    return phi


@dataclass
class ShapleyEstimate:
    values: np.ndarray
    std_errors: np.ndarray
    samples: int
    converged: bool
    history: list[tuple[int, np.ndarray]] = field(default_factory=list)
    evaluations: int = 0


def kernel_second_moment(n: int) -> np.ndarray:
    """``E[z z^T]`` for z the indicator of a kernel-sampled coalition."""
    p = coalition_size_distribution(n)
    s = np.arange(1, n, dtype=DTYPE)
    off = float(np.sum(p * s * (s - 1) / (n * (n - 1)))) if n > 1 else 0.0
    diag = float(np.sum(p * s / n))
    return np.full((n, n), off) + np.eye(n) * (diag - off)


def unbiased_kernelshap(
    game: Game,
    n: int,
    batch: int = 512,
    tolerance: float = 0.01,
    max_samples: int = 1_000_000,
    *,
    seed: int = 0,
    rng: np.random.Generator | None = None,
    paired: bool = True,
    control_variate: bool = True,
    record_history: bool = False,
) -> ShapleyEstimate:
    """Unbiased KernelSHAP with the efficiency constraint solved exactly.

    Each round draws ``batch`` coalitions, each evaluated together with its
    complement when ``paired`` (a pair counts as one sample; game calls are
    counted in ``evaluations``), and updates the running mean of ``z (v(z) - v(0))``. The estimate is the
    constrained least-squares solution with the exact ``E[z z^T]``; standard
    errors come from the sample covariance of the per-draw terms. Sampling stops
    once every output's largest standard error is at most ``tolerance`` times the
    spread (max - min) of its current estimates, or at ``max_samples``.

    With ``control_variate`` each round subtracts ``z z^T a`` (expectation
    ``A a``, known in closed form) using the previous round's estimate as ``a``;
    the estimator stays unbiased and its variance vanishes for additive games.
    """
    if batch < 2:
        raise ValueError("batch must be at least 2 to estimate standard errors")
    if n < 2:
        raise ValueError("unbiased KernelSHAP needs n >= 2")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    sampler = KernelSampler(n, rng if rng is not None else make_rng(seed, 0x0C1E))
    ends = _evaluate(game, np.stack([np.zeros(n, dtype=bool), np.ones(n, dtype=bool)]))
    v0, v1 = ends[0], ends[1]
    scalar = np.ndim(v0) == 0
    v0 = np.atleast_1d(v0)
    total = np.atleast_1d(v1) - v0
    d = v0.shape[0]

    A = kernel_second_moment(n)
    A_inv = np.linalg.inv(A)
    ones = np.ones(n)
    A_inv_1 = A_inv @ ones
    # phi = C b + A^{-1} 1 * total / (1^T A^{-1} 1)
    C = A_inv - np.outer(A_inv_1, A_inv_1) / (ones @ A_inv_1)
    shift = np.outer(A_inv_1, total) / (ones @ A_inv_1)

    draws = 0
    evaluations = 2
    sum_b = np.zeros((n, d))
    # Sum over rounds of m_r * (within-round covariance of the per-draw terms).
    scaled_cov = np.zeros((d, n, n))
    history: list[tuple[int, np.ndarray]] = []
    converged = False
    values = shift.copy()
    std = np.full((n, d), np.inf)
    while draws < max_samples:
        m = min(batch, max_samples - draws)
        masks = sampler.sample_paired(2 * m) if paired else sampler.sample(m)
        vals = _evaluate(game, masks).reshape(len(masks), d) - v0
        z = masks.astype(DTYPE)
        if control_variate:
            # E[z z^T a] = A a is known, so subtracting z z^T a and adding A a keeps
            # the round unbiased; a is fixed before the round is drawn.
            a = values
            vals = vals - z @ a
        terms = z[:, :, None] * vals[:, None, :]
        if paired:
            terms = 0.5 * (terms[0::2] + terms[1::2])
        if control_variate:
            terms = terms + A @ a
        evaluations += len(masks)
        draws += m
        sum_b += terms.sum(axis=0)
        if m > 1:
            centered = terms - terms.mean(axis=0)
            scaled_cov += np.einsum("kid,kjd->dij", centered, centered) * (m / (m - 1))

        b = sum_b / draws
        values = C @ b + shift
        var = np.einsum("ij,djk,ik->id", C, scaled_cov, C) / draws**2
        std = np.sqrt(np.maximum(var, 0.0))
        if record_history:
            history.append((draws, values.copy()))
        spread = values.max(axis=0) - values.min(axis=0)
        if np.all(std.max(axis=0) <= tolerance * spread):
            converged = True
            break

    if scalar:
        values, std = values[:, 0], std[:, 0]
        history = [(k, v[:, 0]) for k, v in history]
    return ShapleyEstimate(values, std, draws, converged, history, evaluations)


def efficiency_normalize(phi: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Shift each output column so it sums to ``target`` (residual split evenly).

    ``phi`` is ``(n, d)`` or a batch ``(B, n, d)``; ``target`` is ``(d,)`` or ``(B, d)``.
    """
    phi = np.asarray(phi, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    n = phi.shape[-2]
    gap = target - phi.sum(axis=-2)
    if gap.shape != phi.shape[:-2] + phi.shape[-1:]:
        raise ValueError(f"target shape {target.shape} does not match attributions {phi.shape}")
    return phi + gap[..., None, :] / n
