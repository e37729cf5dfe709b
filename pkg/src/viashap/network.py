"""Self-explaining networks whose output is an n x d matrix of Shapley values.

The prediction for output j is the column sum of the attribution matrix, plus a
learned bias ``delta`` in the relaxed variant, optionally passed through a link.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .core import DTYPE, check_finite, make_rng, stable_link
from .layers import (
    BatchNorm,
    GradTape,
    KANRBFLayer,
    KANSplineLayer,
    Layer,
    Linear,
    ReLU,
    build_layer,
)

BACKBONES = ("kan_spline", "kan_rbf", "mlp", "mlp_matched")


@dataclass
class NetworkSpec:
    kind: str
    n_features: int
    n_outputs: int = 1
    hidden: tuple[int, ...] = (64, 128, 64)
    link: str = "identity"
    relaxed: bool = False
    grid_size: int = 5
    spline_degree: int = 3
    grid_range: tuple[float, float] = (-1.0, 1.0)
    rbf_centers: int = 8
    rbf_range: tuple[float, float] = (-2.0, 2.0)
    batch_norm: bool = True
    feature_names: list[str] = field(default_factory=list)
    output_labels: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.kind!r}; expected one of {BACKBONES}")
        if self.n_features < 1 or self.n_outputs < 1:
            raise ValueError("n_features and n_outputs must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.grid_range = tuple(float(v) for v in self.grid_range)
        self.rbf_range = tuple(float(v) for v in self.rbf_range)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["grid_range"] = list(self.grid_range)
        d["rbf_range"] = list(self.rbf_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


class Forward(NamedTuple):
    phi: np.ndarray
    logits: np.ndarray
    prediction: np.ndarray


def _mlp_count(n_in: int, hidden, n_out: int, batch_norm: bool) -> int:
    # A linear layer feeding batch norm carries no bias (the norm's shift replaces it).
    total, prev = 0, n_in
    for h in hidden:
        total += prev * h + (2 * h if batch_norm else h)
        prev = h
    return total + prev * n_out + n_out


def _kan_count(spec: NetworkSpec, per_edge: int, base: bool) -> int:
    dims = [spec.n_features, *spec.hidden, spec.n_features * spec.n_outputs]
    return sum(a * b * (per_edge + (1 if base else 0)) for a, b in zip(dims, dims[1:]))


def matched_hidden(spec: NetworkSpec) -> tuple[int, ...]:
    """Hidden widths for an MLP whose parameter count tracks the spline KAN's.

    Widths keep the default 1:2:1 shape; the middle width is then solved for
    so the totals agree to within a few parameters.
    """
    target = _kan_count(spec, spec.grid_size + spec.spline_degree, base=True)
    n_in, n_out = spec.n_features, spec.n_features * spec.n_outputs
    bn = spec.batch_norm
    ratios = np.asarray(spec.hidden, dtype=float) / spec.hidden[0]
    lo, hi = 1e-3, 1e4
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        widths = np.maximum(1, np.round(ratios * spec.hidden[0] * mid)).astype(int)
        if _mlp_count(n_in, widths, n_out, bn) < target:
            lo = mid
        else:
            hi = mid
    widths = list(np.maximum(1, np.round(ratios * spec.hidden[0] * hi)).astype(int))
    if len(widths) >= 3:
        m = len(widths) // 2
        # Count is affine in the middle width: solve for it exactly.
        c0 = _mlp_count(n_in, widths[:m] + [0] + widths[m + 1 :], n_out, bn)
        slope = _mlp_count(n_in, widths[:m] + [1] + widths[m + 1 :], n_out, bn) - c0
        widths[m] = max(1, int(round((target - c0) / slope)))
    return tuple(int(w) for w in widths)


def expected_param_count(spec: NetworkSpec) -> int:
    if spec.kind == "kan_spline":
        return _kan_count(spec, spec.grid_size + spec.spline_degree, base=True) + int(spec.relaxed)
    if spec.kind == "kan_rbf":
        return _kan_count(spec, spec.rbf_centers, base=False) + int(spec.relaxed)
    hidden = matched_hidden(spec) if spec.kind == "mlp_matched" else spec.hidden
    return _mlp_count(spec.n_features, hidden, spec.n_features * spec.n_outputs, spec.batch_norm) + int(spec.relaxed)


def build_layers(spec: NetworkSpec, rng: np.random.Generator) -> list[Layer]:
    n_out = spec.n_features * spec.n_outputs
    if spec.kind in ("kan_spline", "kan_rbf"):
        dims = [spec.n_features, *spec.hidden, n_out]
        if spec.kind == "kan_spline":
            return [
                KANSplineLayer(a, b, spec.grid_size, spec.spline_degree, spec.grid_range, rng=rng)
                for a, b in zip(dims, dims[1:])
            ]
        return [KANRBFLayer(a, b, spec.rbf_centers, spec.rbf_range, rng=rng) for a, b in zip(dims, dims[1:])]
    hidden = matched_hidden(spec) if spec.kind == "mlp_matched" else spec.hidden
    layers: list[Layer] = []
    prev = spec.n_features
    for h in hidden:
        layers.append(Linear(prev, h, rng=rng, bias=not spec.batch_norm))
        if spec.batch_norm:
            layers.append(BatchNorm(h))
        layers.append(ReLU())
        prev = h
    layers.append(Linear(prev, n_out, rng=rng))
    return layers


class ShapNetwork:
    """A layer stack mapping ``x`` (length n) to an attribution matrix ``(n, d)``."""

    def __init__(self, spec: NetworkSpec, layers: list[Layer], delta: float = 0.0) -> None:
        self.spec = spec
        self.layers = layers
        self.delta = np.array([float(delta)], dtype=DTYPE)
        self.delta_grad = np.zeros(1, dtype=DTYPE)
        self.tape = GradTape()

    @classmethod
    def build(cls, spec: NetworkSpec, seed: int = 0) -> "ShapNetwork":
        return cls(spec, build_layers(spec, make_rng(seed, 0x1A7)))

    @property
    def n_features(self) -> int:
        return self.spec.n_features

    @property
    def n_outputs(self) -> int:
        return self.spec.n_outputs

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Ordered name -> array view of every trainable value."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out[f"{i}.{layer.kind}.{name}"] = p
        if self.spec.relaxed:
            out["delta"] = self.delta
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, g in layer.grads.items():
                out[f"{i}.{layer.kind}.{name}"] = g
        if self.spec.relaxed:
            out["delta"] = self.delta_grad
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers.items():
                out[f"{i}.{layer.kind}.{name}"] = b
        return out

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()
        self.delta_grad.fill(0.0)

    def state(self) -> dict[str, np.ndarray]:
        """Deep copy of parameters and buffers (for checkpoints)."""
        state = {k: v.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        state["delta"] = self.delta.copy()
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                layer.params[name][...] = state[f"{i}.{layer.kind}.{name}"]
            for name in layer.buffers:
                layer.buffers[name] = state[f"{i}.{layer.kind}.{name}"].copy()
        self.delta[...] = state["delta"]

    def layer_configs(self) -> list[dict]:
        return [{"kind": layer.kind, "config": layer.config()} for layer in self.layers]

    @classmethod
    def from_configs(cls, spec: NetworkSpec, configs: list[dict]) -> "ShapNetwork":
        return cls(spec, [build_layer(c["kind"], c["config"]) for c in configs])

    # -- forward / backward -------------------------------------------------

    def forward_raw(self, x: np.ndarray, train: bool = False, record: bool = True) -> np.ndarray:
        """Flat backbone output ``(rows, n * d)``; records the tape when asked."""
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected input of shape (rows, {self.n_features}), got {x.shape}")
        self.tape = GradTape()
        h = x
        for i, layer in enumerate(self.layers):
            h, ctx = layer.forward(h, train=train, record=record)
            if record:
                self.tape.record(i, ctx)
        return check_finite(h, "network output")

    def activation_pattern(self, x: np.ndarray, train: bool = False) -> np.ndarray | None:
        """Concatenated ReLU on/off pattern for ``x`` (None without ReLUs)."""
        h = np.asarray(x, dtype=DTYPE)
        masks = []
        for layer in self.layers:
            if layer.kind == "relu":
                masks.append((h > 0).ravel())
            h = layer(h, train=train)
        return np.concatenate(masks) if masks else None

    def backward_raw(self, grad: np.ndarray, d_delta: float | None = None) -> np.ndarray:
        """Backpropagate ``d loss / d raw output``; returns the input gradient."""
        if d_delta is not None:
            self.delta_grad += d_delta
        return self.tape.backward(self.layers, np.asarray(grad, dtype=DTYPE))

    def attributions(self, x: np.ndarray, train: bool = False, record: bool = False) -> np.ndarray:
        raw = self.forward_raw(x, train=train, record=record)
        return raw.reshape(raw.shape[0], self.n_features, self.n_outputs)

    def backward(self, d_phi: np.ndarray | None = None, d_logits: np.ndarray | None = None) -> np.ndarray:
        """Backward from gradients on the attribution matrix and/or the logits.

        ``d_phi`` has shape ``(rows, n, d)`` and ``d_logits`` ``(rows, d)``. Every
        attribution enters its output's logit with weight one, and so does delta.
        """
        if d_phi is None and d_logits is None:
            raise ValueError("need at least one upstream gradient")
        rows = (d_phi if d_phi is not None else d_logits).shape[0]
        g = np.zeros((rows, self.n_features, self.n_outputs))
        if d_phi is not None:
            g += d_phi
        d_delta = None
        if d_logits is not None:
            g += d_logits[:, None, :]
            if self.spec.relaxed:
                d_delta = float(np.sum(d_logits))
        return self.backward_raw(g.reshape(rows, -1), d_delta)

    def logits_from_phi(self, phi: np.ndarray) -> np.ndarray:
        return phi.sum(axis=-2) + self.delta[0]

    def forward(self, x: np.ndarray, train: bool = False) -> Forward:
        """Attributions, logits and prediction for a row or a batch of rows."""
        x = np.asarray(x, dtype=DTYPE)
        single = x.ndim == 1
        if single:
            if x.shape[0] != self.n_features:
                raise ValueError(f"expected {self.n_features} features, got {x.shape[0]}")
            x = x[None, :]
        phi = self.attributions(x, train=train)
        logits = self.logits_from_phi(phi)
        pred = stable_link(logits, self.spec.link)
        if single:
            return Forward(phi[0], logits[0], pred[0])
        return Forward(phi, logits, pred)

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).prediction

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).logits


def network_forward(net: ShapNetwork, x: np.ndarray) -> Forward:
    return net.forward(x)


def build_network(spec: NetworkSpec, seed: int = 0) -> ShapNetwork:
    return ShapNetwork.build(spec, seed)
