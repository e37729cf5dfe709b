import numpy as np

from viashap.layers import GradTape


class LayerNet:
    """Minimal network wrapper so ``gradient_check`` can drive a bare layer stack."""

    def __init__(self, *layers):
        self.layers = list(layers)
        self.tape = GradTape()

    def parameters(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def gradients(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward_raw(self, x, train=False, record=True):
        self.tape = GradTape()
        h = x
        for i, layer in enumerate(self.layers):
            h, ctx = layer.forward(h, train=train, record=record)
            if record:
                self.tape.record(i, ctx)
        return h

    def activation_pattern(self, x, train=False):
        h, masks = x, []
        for layer in self.layers:
            if layer.kind == "relu":
                masks.append((h > 0).ravel())
            h = layer(h, train=train)
        return np.concatenate(masks) if masks else None

    def backward_raw(self, grad, d_delta=None):
        return self.tape.backward(self.layers, grad)


def squared_error(target):
    def loss(out):
        r = out - target
        return float(np.sum(r * r)), 2.0 * r

    return loss


def cross_entropy(labels):
    def loss(out):
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.arange(len(labels))
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return float(-logp[rows, labels].sum()), grad

    return loss


class WithoutDelta:
    """View of a network that hides the relaxed bias from ``gradient_check``."""

    def __init__(self, net):
        self.net = net

    def parameters(self):
        return {k: v for k, v in self.net.parameters().items() if k != "delta"}

    def gradients(self):
        return {k: v for k, v in self.net.gradients().items() if k != "delta"}

    def __getattr__(self, name):
        return getattr(self.net, name)
