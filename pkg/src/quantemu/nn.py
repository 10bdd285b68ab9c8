"""Dense feed-forward networks with hand-written backpropagation.

Inputs are either a single vector or a batch with one sample per row.
Everything is float64.
"""

import json
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "linear")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(float)
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Mlp:
    def __init__(self, layers, seed=None):
        for a, b in zip(layers, layers[1:]):
            if a.W.shape[0] != b.W.shape[1]:
                raise ValueError(f"layer widths do not chain: {a.W.shape} -> {b.W.shape}")
        self.layers = list(layers)
        self.seed = seed
        self.version = 0

    @classmethod
    def init(cls, sizes, activations=None, seed=0):
        """Glorot-uniform weights and zero biases for widths ``sizes``.

        Default activations are relu on hidden layers and linear output.
        """
        if activations is None:
            activations = ["relu"] * (len(sizes) - 2) + ["linear"]
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-lim, lim, size=(fan_out, fan_in))
            layers.append(Layer(W, np.zeros(fan_out), act))
        return cls(layers, seed)

    @property
    def sizes(self):
        return [self.layers[0].W.shape[1]] + [l.W.shape[0] for l in self.layers]

    @property
    def n_in(self):
        return self.layers[0].W.shape[1]

    @property
    def n_out(self):
        return self.layers[-1].W.shape[0]

    def params(self):
        out = []
        for l in self.layers:
            out += [l.W, l.b]
        return out

    def __call__(self, x):
        return forward(self, x)[0]

    def is_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params())


def forward(net, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.n_in:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {net.n_in}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    single = x.ndim == 1
    a = x[None, :] if single else x
    cache = {"version": net.version, "single": single, "inputs": [], "z": [], "a": []}
    for layer in net.layers:
        z = a @ layer.W.T + layer.b
        cache["inputs"].append(a)
        a = _act(layer.activation, z)
        cache["z"].append(z)
        cache["a"].append(a)
    return (a[0] if single else a), cache


def backward(net, cache, grad_out):
    """Parameter gradients ``[(dW, db), ...]`` for the output gradient."""
    if cache["version"] != net.version:
        raise ValueError("stale forward cache: parameters changed since the forward pass")
    g = np.asarray(grad_out, dtype=float)
    if cache["single"]:
        g = g[None, :]
    grads = []
    for layer, x_in, z, a in zip(
        reversed(net.layers), reversed(cache["inputs"]), reversed(cache["z"]), reversed(cache["a"])
    ):
        g = g * _act_grad(layer.activation, z, a)
        grads.append((g.T @ x_in, g.sum(axis=0)))
        g = g @ layer.W
    grads.reverse()
    return grads


def input_gradient(net, cache, grad_out):
    """Gradient of the output contraction with respect to the network input."""
    g = np.asarray(grad_out, dtype=float)
    if cache["single"]:
        g = g[None, :]
    for layer, z, a in zip(reversed(net.layers), reversed(cache["z"]), reversed(cache["a"])):
        g = (g * _act_grad(layer.activation, z, a)) @ layer.W
    return g[0] if cache["single"] else g


def add_grads(g1, g2):
    return [(a + c, b + d) for (a, b), (c, d) in zip(g1, g2)]


def _check_grads(grads):
    for i, (dW, db) in enumerate(grads):
        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
            raise FloatingPointError(f"non-finite gradient in layer {i}; step aborted")


def sgd_step(net, grads, lr):
    _check_grads(grads)
    for layer, (dW, db) in zip(net.layers, grads):
        layer.W = layer.W - lr * dW
        layer.b = layer.b - lr * db
    net.version += 1
    return net


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, net):
        return cls([np.zeros_like(p) for p in net.params()], [np.zeros_like(p) for p in net.params()])


def adam_step(net, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update; parameters are overwritten, not rebound."""
    _check_grads(grads)
    state.t += 1
    flat = [g for pair in grads for g in pair]
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(net.params(), flat, state.m, state.v):
        tmp = np.multiply(g, 1.0 - beta1)
        m *= beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - beta2
        v *= beta2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        p -= tmp
    net.version += 1
    return net, state


def loss_cross_entropy(logits, labels):
    """Softmax cross-entropy; batches are averaged over rows."""
    logits = np.asarray(logits, dtype=float)
    single = logits.ndim == 1
    L = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(labels, dtype=int))
    if y.shape != (L.shape[0],) or np.any(y < 0) or np.any(y >= L.shape[1]):
        raise ValueError("class labels out of range")
    shifted = L - L.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(L.shape[0])
    value = float(np.mean(logsum - shifted[rows, y]))
    p = np.exp(shifted - logsum[:, None])
    p[rows, y] -= 1.0
    grad = p / L.shape[0]
    return value, (grad[0] if single else grad)


def loss_squared(pred, target):
    """Sum of squared residuals; batches are averaged over rows."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    r = pred - target
    if pred.ndim <= 1:
        return float(np.sum(r * r)), 2.0 * r
    B = pred.shape[0]
    return float(np.sum(r * r) / B), 2.0 * r / B


def clone_weights(src):
    layers = [Layer(l.W.copy(), l.b.copy(), l.activation) for l in src.layers]
    return Mlp(layers, src.seed)


def copy_weights_into(dst, src):
    """Overwrite ``dst`` parameters with those of ``src`` (same architecture)."""
    if dst.sizes != src.sizes:
        raise ValueError("architecture mismatch")
    for d, s in zip(dst.layers, src.layers):
        d.W, d.b, d.activation = s.W.copy(), s.b.copy(), s.activation
    dst.version += 1
    return dst


def model_to_dict(net):
    return {
        "format": "quantemu-mlp",
        "version": 1,
        "seed": net.seed,
        "n_layers": len(net.layers),
        "layers": [
            {
                "in": int(l.W.shape[1]),
                "out": int(l.W.shape[0]),
                "activation": l.activation,
                "weights": [float(v) for v in l.W.ravel()],
                "biases": [float(v) for v in l.b],
            }
            for l in net.layers
        ],
    }


def model_from_dict(d):
    if d.get("format") != "quantemu-mlp":
        raise ValueError("not a quantemu model container")
    layers = []
    for spec in d["layers"]:
        W = np.array(spec["weights"], dtype=float).reshape(spec["out"], spec["in"])
        layers.append(Layer(W, np.array(spec["biases"], dtype=float), spec["activation"]))
    if len(layers) != d["n_layers"]:
        raise ValueError("layer count mismatch in model container")
    return Mlp(layers, d.get("seed"))


def save_model(net, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(net), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
