"""Numeric core: seeded random streams, link functions, Adam and gradient checks.

Everything runs in float64. Layers carry their own closed-form backward passes
(see :mod:`viashap.layers`); this module only holds the pieces shared by every
trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

LINKS = ("identity", "sigmoid", "softmax")


class NonFiniteError(FloatingPointError):
    """Raised when a library operation produces NaN or Inf."""


def check_finite(array: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {what}")
    return array


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) stream for ``seed`` split along ``keys``.

    Streams with different key tuples are statistically independent, and the
    same ``(seed, *keys)`` always reproduces the same stream, whatever order the
    streams are created in.
    """
    seq = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(seq))


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def stable_link(logits: np.ndarray, link: str) -> np.ndarray:
    """Map summed attributions to predictions.

    ``softmax`` normalises along the last axis, so a ``(batch, d)`` array of
    logits gives one probability row per instance.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    if link == "identity":
        return logits.copy()
    if link == "sigmoid":
        return sigmoid(logits)
    if link == "softmax":
        return softmax(logits, axis=-1)
    raise ValueError(f"unknown link {link!r}; expected one of {LINKS}")


@dataclass
class AdamState:
    """Moment estimates for a fixed, ordered list of parameter arrays."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# Objective protocol for gradient checks: given the raw network output, return
# the scalar loss, its gradient with respect to that output and, optionally, the
# gradient with respect to the network's additive bias delta.
OutputLoss = Callable[[np.ndarray], tuple]


def gradient_check(
    network,
    inputs: np.ndarray,
    loss: OutputLoss,
    step: float = 1e-5,
    *,
    train: bool = True,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backprop gradients with central differences.

    The error for one parameter array is ``max|a - c| / max(max|a|, max|c|, 1e-8)``
    where ``a`` is the analytic gradient and ``c`` the central difference; the
    largest error over all parameter arrays is returned. ``max_entries`` limits
    how many entries per array are perturbed (chosen with ``rng``).
    """
    if not 0.0 < step <= 1e-3:
        raise ValueError("step must lie in (0, 1e-3]")
    params = network.parameters()
    for name, p in params.items():
        check_finite(p, f"parameter {name}")

    network.zero_grad()
    out = network.forward_raw(inputs, train=train)
    res = loss(out)
    network.backward_raw(res[1], res[2] if len(res) > 2 else None)
    analytic = {name: g.copy() for name, g in network.gradients().items()}

    rng = rng or np.random.default_rng(0)
    # Central differences are only valid when the stencil stays on one smooth
    # piece; for piecewise-linear activations the step is shrunk until the
    # activation pattern matches the unperturbed one.
    pattern = getattr(network, "activation_pattern", None)
    base_pattern = pattern(inputs, train=train) if pattern is not None else None

    def same_piece() -> bool:
        return base_pattern is None or np.array_equal(pattern(inputs, train=train), base_pattern)

    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a = analytic[name].reshape(-1)[idx]
        c = np.empty(len(idx))
        for slot, k in enumerate(idx):
            orig = flat[k]
            h = step
            for _ in range(6):
                flat[k] = orig + h
                up = loss(network.forward_raw(inputs, train=train))[0]
                ok = same_piece()
                flat[k] = orig - h
                down = loss(network.forward_raw(inputs, train=train))[0]
                ok = ok and same_piece()
                flat[k] = orig
                if ok:
                    break
                h /= 10.0
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"non-finite loss when perturbing {name}[{k}]")
            c[slot] = (up - down) / (2.0 * h)
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(c), initial=0.0), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - c), initial=0.0) / scale))
    network.zero_grad()
    return worst


def iter_batches(n_rows: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterable[np.ndarray]:
    order = rng.permutation(n_rows) if rng is not None else np.arange(n_rows)
    for start in range(0, n_rows, batch_size):
        yield order[start : start + batch_size]
