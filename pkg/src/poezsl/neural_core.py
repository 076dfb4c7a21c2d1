"""Dense networks with hand-derived backprop, Adam, and finite-difference checks.

Everything runs in float64. Inputs are either a single vector of shape ``(in,)``
or a batch of row vectors ``(n, in)``; outputs keep the same leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

ACTIVATIONS = ("relu", "identity", "sigmoid", "softmax")


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return pre
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "sigmoid":
        # split by sign to keep exp() from overflowing
        out = np.empty_like(pre)
        pos = pre >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-pre[pos]))
        e = np.exp(pre[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    if name == "softmax":
        shifted = pre - pre.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown activation {name!r}")


def _activation_backward(name: str, pre: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "identity":
        return g
    if name == "relu":
        return g * (pre > 0)
    if name == "sigmoid":
        return g * out * (1.0 - out)
    if name == "softmax":
        # Jacobian-vector product: s * (g - <g, s>)
        return out * (g - np.sum(g * out, axis=-1, keepdims=True))
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} do not agree"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        """Glorot-uniform weights, zero bias."""
        a = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-a, a, size=(out_dim, in_dim)), np.zeros(out_dim), activation)


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"expected input width {layer.in_dim}, got {x.shape[-1]}")
    return _activate(layer.activation, x @ layer.weights.T + layer.bias)


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations from one forward call."""

    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


class Mlp:
    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ShapeError("an Mlp needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise ShapeError(
                    f"layer {k} emits {layers[k].out_dim} values but layer {k + 1} expects {layers[k + 1].in_dim}"
                )
        self.layers = layers
        self._cache: ForwardCache | None = None

    @classmethod
    def build(cls, sizes: list[int], hidden_activation: str, out_activation: str,
              rng: np.random.Generator) -> "Mlp":
        layers = []
        for k in range(len(sizes) - 1):
            act = out_activation if k == len(sizes) - 2 else hidden_activation
            layers.append(DenseLayer.init(sizes[k], sizes[k + 1], act, rng))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, layer in enumerate(self.layers):
            yield f"{prefix}{k}.weight", layer.weights
            yield f"{prefix}{k}.bias", layer.bias

    def forward(self, x) -> tuple[np.ndarray, ForwardCache]:
        """Run the net and return ``(output, cache)``; the cache is also kept for a bare ``backward``."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.in_dim:
            raise ShapeError(f"expected input width {self.in_dim}, got {h.shape[-1]}")
        cache = ForwardCache()
        for layer in self.layers:
            pre = h @ layer.weights.T + layer.bias
            out = _activate(layer.activation, pre)
            cache.inputs.append(h)
            cache.pre.append(pre)
            cache.outputs.append(out)
            h = out
        self._cache = cache
        return h, cache

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, upstream_grad, cache: ForwardCache | None = None):
        """Backpropagate ``upstream_grad`` (dL/d output).

        Returns ``(grads, input_grad)`` where ``grads`` is a list of
        ``(dW, db)`` per layer. Batched inputs have their gradients summed
        over rows, so scale ``upstream_grad`` to get a mean.
        """
        if cache is None:
            cache = self._cache
        if cache is None:
            raise StateError("backward called before any forward pass")
        g = np.asarray(upstream_grad, dtype=np.float64)
        if g.shape != cache.outputs[-1].shape:
            raise ShapeError(f"upstream grad {g.shape} does not match output {cache.outputs[-1].shape}")
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            g = _activation_backward(layer.activation, cache.pre[k], cache.outputs[k], g)
            x = cache.inputs[k]
            if g.ndim == 1:
                dW = np.outer(g, x)
                db = g.copy()
            else:
                dW = g.T @ x
                db = g.sum(axis=0)
            grads[k] = (dW, db)
            g = g @ layer.weights
        return grads, g


def mlp_backward(net: Mlp, x, upstream_grad):
    """Gradients of the scalar loss whose output gradient is ``upstream_grad``.

    ``net`` must have been run forward on ``x`` most recently.
    """
    cache = net._cache
    if cache is None:
        raise StateError("no cached forward pass for this network")
    if not np.array_equal(cache.inputs[0], np.asarray(x, dtype=np.float64)):
        raise StateError("cached forward pass was for a different input")
    return net.backward(upstream_grad, cache)


def flatten_grads(net: Mlp, grads, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for k, (dW, db) in enumerate(grads):
        out[f"{prefix}{k}.weight"] = dW
        out[f"{prefix}{k}.bias"] = db
    return out


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Parameter arrays are modified in place."""
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ShapeError(f"gradient names do not match parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: grad shape {grads[name].shape} != param shape {p.shape}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


# --- finite differences -------------------------------------------------------

def numerical_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a| + |n|, floor)."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def compare_gradients(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
                      tol: float, floor: float = 1e-6) -> GradCheckReport:
    worst, worst_name = 0.0, ""
    for name, a in analytic.items():
        if a.size == 0:
            continue
        err = float(relative_error(a, numeric[name], floor).max())
        if err > worst or not worst_name:
            worst, worst_name = err, name
    return GradCheckReport(worst, worst_name, tol)


def finite_diff_check(net: Mlp, loss_fn, x, tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare backprop against central differences for every parameter of ``net``.

    ``loss_fn(output) -> (loss, dloss/doutput)``.
    """
    out, cache = net.forward(x)
    _, g_out = loss_fn(out)
    grads, _ = net.backward(g_out, cache)
    analytic = flatten_grads(net, grads)

    def f():
        return float(loss_fn(net.forward(x)[0])[0])

    numeric = {name: numerical_gradient(f, p, step) for name, p in net.named_parameters()}
    return compare_gradients(analytic, numeric, tol)
