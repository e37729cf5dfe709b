"""Layers with hand-written backward passes.

Every layer exposes ``params`` and ``grads`` (dicts of float64 arrays with
matching shapes), ``forward(x, train, record)`` returning ``(out, ctx)`` and
``backward(ctx, grad_out)`` returning the gradient with respect to the input
while accumulating into ``grads``. ``ctx`` is ``None`` when ``record`` is false.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .core import DTYPE, check_finite


class Layer:
    kind = "layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _register(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.ascontiguousarray(value, dtype=DTYPE)
        self.grads[name] = np.zeros_like(self.params[name])

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def config(self) -> dict:
        return {}

    def forward(self, x: np.ndarray, train: bool = False, record: bool = False):
        raise NotImplementedError

    def backward(self, ctx, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.forward(x, train=train, record=False)[0]


class Linear(Layer):
    kind = "linear"

    def __init__(
        self, n_in: int, n_out: int, rng: np.random.Generator | None = None, bias: bool = True
    ) -> None:
        super().__init__()
        self.n_in, self.n_out, self.bias = n_in, n_out, bias
        # PyTorch-style Kaiming-uniform (a = sqrt(5)) reduces to U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
        bound = 1.0 / math.sqrt(n_in)
        if rng is None:
            self._register("weight", np.zeros((n_in, n_out)))
        else:
            self._register("weight", rng.uniform(-bound, bound, size=(n_in, n_out)))
        if bias:
            self._register("bias", np.zeros(n_out) if rng is None else rng.uniform(-bound, bound, size=n_out))

    def config(self) -> dict:
        return {"n_in": self.n_in, "n_out": self.n_out, "bias": self.bias}

    def forward(self, x, train=False, record=False):
        out = x @ self.params["weight"]
        if self.bias:
            out += self.params["bias"]
        return out, (x if record else None)

    def backward(self, ctx, grad_out):
        x = ctx
        self.grads["weight"] += x.T @ grad_out
        if self.bias:
            self.grads["bias"] += grad_out.sum(axis=0)
        return grad_out @ self.params["weight"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, record=False):
        mask = x > 0
        return x * mask, (mask if record else None)

    def backward(self, ctx, grad_out):
        return grad_out * ctx


class BatchNorm(Layer):
    """Batch normalisation over the batch axis (momentum 0.1, eps 1e-5)."""

    kind = "batchnorm"

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.dim, self.momentum, self.eps = dim, momentum, eps
        self._register("gamma", np.ones(dim))
        self._register("beta", np.zeros(dim))
        self.buffers["running_mean"] = np.zeros(dim)
        self.buffers["running_var"] = np.ones(dim)

    def config(self) -> dict:
        return {"dim": self.dim, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x, train=False, record=False):
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalisation in train mode needs a batch of at least 2 rows")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            unbiased = var * x.shape[0] / (x.shape[0] - 1)
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        out = xhat * self.params["gamma"] + self.params["beta"]
        return out, ((xhat, inv_std, train) if record else None)

    def backward(self, ctx, grad_out):
        xhat, inv_std, train = ctx
        self.grads["gamma"] += (grad_out * xhat).sum(axis=0)
        self.grads["beta"] += grad_out.sum(axis=0)
        dxhat = grad_out * self.params["gamma"]
        if not train:
            return dxhat * inv_std
        n = grad_out.shape[0]
        return inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


@njit(cache=True)
def _bspline_kernel(x, t0, h, grid_size, k, with_derivative, out, dvals, start):
    # Local Cox-de Boor on a uniform grid: vals[r] holds B_{j-k+r, k}(x) on the
    # knot interval j containing x. Derivatives are stored compactly: dvals[., ., r]
    # is d/dx of basis start[., .] + r (zero where that index is out of range).
    n_basis = grid_size + k
    vals = np.empty(k + 1)
    lower = np.empty(k + 1)
    for a in range(x.shape[0]):
        for b in range(x.shape[1]):
            pos = (x[a, b] - t0) / h
            jf = np.floor(pos)
            if jf < 0 or jf >= grid_size + 2 * k:
                if with_derivative:
                    start[a, b] = 0
                    for r in range(k + 1):
                        dvals[a, b, r] = 0.0
                continue
            j = int(jf)
            u = pos - jf
            vals[0] = 1.0
            for p in range(1, k + 1):
                if p == k:
                    for r in range(k):
                        lower[r] = vals[r]
                for r in range(p, -1, -1):
                    term = 0.0
                    if r >= 1:
                        term += (u + p - r) * vals[r - 1]
                    if r < p:
                        term += (r + 1 - u) * vals[r]
                    vals[r] = term / p
            if with_derivative:
                start[a, b] = j - k
            for r in range(k + 1):
                m = j - k + r
                inside = m >= 0 and m < n_basis
                if inside:
                    out[a, b, m] = vals[r]
                if with_derivative:
                    d = 0.0
                    if inside:
                        if r >= 1:
                            d += lower[r - 1]
                        if r < k:
                            d -= lower[r]
                    dvals[a, b, r] = d / h


@njit(cache=True)
def _bspline_input_grad(g_basis, dvals, start, n_basis):
    rows, n_in, width = dvals.shape
    out = np.zeros((rows, n_in))
    for a in range(rows):
        for b in range(n_in):
            s = start[a, b]
            acc = 0.0
            for r in range(width):
                m = s + r
                if m >= 0 and m < n_basis:
                    acc += dvals[a, b, r] * g_basis[a, b * n_basis + m]
            out[a, b] = acc
    return out


@njit(cache=True)
def _silu_kernel(x, act, dact):
    for a in range(x.shape[0]):
        for b in range(x.shape[1]):
            v = x[a, b]
            s = 0.5 * (1.0 + np.tanh(0.5 * v))
            act[a, b] = v * s
            dact[a, b] = s * (1.0 + v * (1.0 - s))


def _silu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.ascontiguousarray(x, dtype=DTYPE)
    act = np.empty_like(x)
    dact = np.empty_like(x)
    _silu_kernel(x, act, dact)
    return act, dact


class KANSplineLayer(Layer):
    """KAN layer: out[q] = sum_p w_base[p,q] * silu(x_p) + sum_m c[p,m,q] * B_m(x_p).

    ``B_m`` are the ``grid_size + spline_degree`` B-splines of the given degree on
    a uniform grid over ``grid_range``, extended by ``spline_degree`` knots on each
    side. Inputs beyond the extended grid get no spline contribution.
    """

    kind = "kan_spline"

    def __init__(
        self,
        n_in: int,
        n_out: int,
        grid_size: int = 5,
        spline_degree: int = 3,
        grid_range: tuple[float, float] = (-1.0, 1.0),
        rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        if spline_degree < 1 or grid_size < 2 or not grid_range[0] < grid_range[1]:
            raise ValueError("need spline_degree >= 1, grid_size >= 2 and low < high")
        self.n_in, self.n_out = n_in, n_out
        self.grid_size, self.spline_degree = grid_size, spline_degree
        self.grid_range = (float(grid_range[0]), float(grid_range[1]))
        self.h = (self.grid_range[1] - self.grid_range[0]) / grid_size
        self.n_basis = grid_size + spline_degree
        if rng is None:
            self._register("base_weight", np.zeros((n_in, n_out)))
            self._register("coef", np.zeros((n_in, self.n_basis, n_out)))
        else:
            bound = 1.0 / math.sqrt(n_in)
            self._register("base_weight", rng.uniform(-bound, bound, size=(n_in, n_out)))
            self._register("coef", rng.normal(0.0, 0.1 / math.sqrt(n_in), size=(n_in, self.n_basis, n_out)))

    def config(self) -> dict:
        return {
            "n_in": self.n_in,
            "n_out": self.n_out,
            "grid_size": self.grid_size,
            "spline_degree": self.spline_degree,
            "grid_range": list(self.grid_range),
        }

    @property
    def knots(self) -> np.ndarray:
        k = self.spline_degree
        return self.grid_range[0] + (np.arange(self.grid_size + 2 * k + 1) - k) * self.h

    def basis(self, x: np.ndarray, with_derivative: bool = False):
        """Dense basis values ``(rows, n_in, n_basis)`` and optionally d/dx, also dense."""
        dense, compact = self._basis(x, with_derivative)
        if not with_derivative:
            return dense, None
        dvals, start = compact
        deriv = np.zeros_like(dense)
        k1 = self.spline_degree + 1
        idx = start[..., None] + np.arange(k1)
        ok = (idx >= 0) & (idx < self.n_basis)
        a, b, r = np.nonzero(ok)
        deriv[a, b, idx[a, b, r]] = dvals[a, b, r]
        return dense, deriv

    def _basis(self, x: np.ndarray, with_derivative: bool):
        x = np.ascontiguousarray(x, dtype=DTYPE)
        k, h = self.spline_degree, self.h
        t0 = self.grid_range[0] - k * h
        rows = x.shape[0]
        dense = np.zeros((rows, self.n_in, self.n_basis))
        if with_derivative:
            dvals = np.empty((rows, self.n_in, k + 1))
            start = np.empty((rows, self.n_in), dtype=np.int64)
        else:
            dvals = np.zeros((1, 1, 1))
            start = np.zeros((1, 1), dtype=np.int64)
        _bspline_kernel(x, t0, h, self.grid_size, k, with_derivative, dense, dvals, start)
        return dense, ((dvals, start) if with_derivative else None)

    def forward(self, x, train=False, record=False):
        rows = x.shape[0]
        act, dact = _silu(x)
        bases, compact = self._basis(x, with_derivative=record)
        coef = self.params["coef"].reshape(self.n_in * self.n_basis, self.n_out)
        out = act @ self.params["base_weight"] + bases.reshape(rows, -1) @ coef
        ctx = (act, dact, bases, compact) if record else None
        return out, ctx

    def backward(self, ctx, grad_out):
        act, dact, bases, (dvals, start) = ctx
        rows = grad_out.shape[0]
        flat = bases.reshape(rows, -1)
        coef = self.params["coef"].reshape(self.n_in * self.n_basis, self.n_out)
        self.grads["base_weight"] += act.T @ grad_out
        self.grads["coef"] += (flat.T @ grad_out).reshape(self.params["coef"].shape)
        g_basis = np.ascontiguousarray(grad_out @ coef.T)
        g_in = _bspline_input_grad(g_basis, dvals, start, self.n_basis)
        return dact * (grad_out @ self.params["base_weight"].T) + g_in


class KANRBFLayer(Layer):
    """KAN layer with Gaussian radial bases: psi(x) = sum_k c_k exp(-((x - mu_k) / h)^2)."""

    kind = "kan_rbf"

    def __init__(
        self,
        n_in: int,
        n_out: int,
        num_centers: int = 8,
        grid_range: tuple[float, float] = (-2.0, 2.0),
        rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        if num_centers < 2 or not grid_range[0] < grid_range[1]:
            raise ValueError("need at least two centers and low < high")
        self.n_in, self.n_out, self.num_centers = n_in, n_out, num_centers
        self.grid_range = (float(grid_range[0]), float(grid_range[1]))
        self.centers = np.linspace(self.grid_range[0], self.grid_range[1], num_centers)
        self.h = self.centers[1] - self.centers[0]
        if rng is None:
            self._register("coef", np.zeros((n_in, num_centers, n_out)))
        else:
            self._register("coef", rng.normal(0.0, 0.1 / math.sqrt(n_in), size=(n_in, num_centers, n_out)))

    def config(self) -> dict:
        return {
            "n_in": self.n_in,
            "n_out": self.n_out,
            "num_centers": self.num_centers,
            "grid_range": list(self.grid_range),
        }

    def basis(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = (x[..., None] - self.centers) / self.h
        phi = np.exp(-z * z)
        return phi, z

    def forward(self, x, train=False, record=False):
        rows = x.shape[0]
        phi, z = self.basis(x)
        coef = self.params["coef"].reshape(-1, self.n_out)
        out = phi.reshape(rows, -1) @ coef
        return out, ((phi, z) if record else None)

    def backward(self, ctx, grad_out):
        phi, z = ctx
        rows = grad_out.shape[0]
        coef = self.params["coef"].reshape(-1, self.n_out)
        self.grads["coef"] += (phi.reshape(rows, -1).T @ grad_out).reshape(self.params["coef"].shape)
        g_phi = (grad_out @ coef.T).reshape(phi.shape)
        return np.einsum("rpk,rpk->rp", g_phi, -2.0 * z / self.h * phi)


LAYER_TYPES = {cls.kind: cls for cls in (Linear, ReLU, BatchNorm, KANSplineLayer, KANRBFLayer)}


def build_layer(kind: str, config: dict) -> Layer:
    cls = LAYER_TYPES[kind]
    if kind == "relu":
        return cls()
    cfg = dict(config)
    if "grid_range" in cfg:
        cfg["grid_range"] = tuple(cfg["grid_range"])
    return cls(**cfg)


class GradTape:
    """Forward contexts in call order; ``backward`` replays them in reverse."""

    def __init__(self) -> None:
        self.entries: list[tuple[int, object]] = []

    def record(self, layer_id: int, ctx) -> None:
        self.entries.append((layer_id, ctx))

    def backward(self, layers: list[Layer], grad: np.ndarray) -> np.ndarray:
        if not self.entries:
            raise RuntimeError("backward called without a recorded forward pass")
        while self.entries:
            layer_id, ctx = self.entries.pop()
            grad = layers[layer_id].backward(ctx, grad)
        return check_finite(grad, "input gradient")
