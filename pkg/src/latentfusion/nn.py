"""Small dense networks with explicit backprop and an Adam optimizer.

Everything runs in float64 so finite-difference checks at h=1e-5 resolve
relative errors below 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(f"weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class ForwardCache:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    version: int


class Mlp:
    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self._version = 0

    @classmethod
    def create(cls, in_dim: int, sizes: Sequence[int], rng: np.random.Generator,
               final_activation: str = "identity") -> Mlp:
        """Glorot-uniform weights, zero biases, relu between hidden layers."""
        layers = []
        fan_in = in_dim
        for k, out in enumerate(sizes):
            limit = np.sqrt(6.0 / (fan_in + out))
            act = final_activation if k == len(sizes) - 1 else "relu"
            layers.append(DenseLayer(rng.uniform(-limit, limit, size=(out, fan_in)), np.zeros(out), act))
            fan_in = out
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def set_params(self, params: Sequence[np.ndarray]):
        for k, layer in enumerate(self.layers):
            layer.weight = np.asarray(params[2 * k], dtype=np.float64)
            layer.bias = np.asarray(params[2 * k + 1], dtype=np.float64)
        self.touch()

    def touch(self):
        """Invalidate outstanding forward caches after an in-place weight edit."""
        self._version += 1

    def copy(self) -> Mlp:
        return Mlp([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected (batch, {self.in_dim}) input, got {x.shape}")
        inputs, pre = [], []
        h = x
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            pre.append(z)
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        return h, ForwardCache(inputs, pre, self._version)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without keeping activations (inference only)."""
        h = np.asarray(x)
        for layer in self.layers:
            h = h @ layer.weight.T.astype(h.dtype, copy=False) + layer.bias.astype(h.dtype, copy=False)
            if layer.activation == "relu":
                np.maximum(h, 0.0, out=h)
        return h

    def backward(self, cache: ForwardCache, dy: np.ndarray,
                 param_grads: bool = True) -> tuple[np.ndarray, list[np.ndarray] | None]:
        """Gradients of a scalar loss given dL/dy.

        Returns (dL/dx, [dW0, db0, dW1, db1, ...]); the list is None when
        ``param_grads`` is False (frozen network, input gradient only).
        """
        if cache.version != self._version or len(cache.pre) != len(self.layers):
            raise StaleCacheError("forward cache does not match current weights")
        g = np.asarray(dy, dtype=np.float64)
        if g.shape != cache.pre[-1].shape:
            raise ShapeError(f"dL/dy shape {g.shape} != output shape {cache.pre[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers)) if param_grads else None
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if layer.activation == "relu":
                g = g * (cache.pre[k] > 0)
            if param_grads:
                grads[2 * k] = g.T @ cache.inputs[k]
                grads[2 * k + 1] = g.sum(axis=0)
            g = g @ layer.weight
        return g, grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> AdamState:
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A non-finite gradient raises before anything is modified.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; update rejected")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def finite_diff_check(f: Callable[[np.ndarray], float], grad: np.ndarray, x: np.ndarray,
                      h: float = 1e-5) -> float:
    """Max relative error between ``grad`` and central differences of ``f`` at ``x``.

    Per component the error is |analytic - numeric| / |numeric|, with the
    denominator floored at 1e-4 of the largest numeric component so that
    near-zero entries do not dominate through rounding noise.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    num = np.zeros_like(x)
    flat, nflat = x.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        nflat[i] = (fp - fm) / (2.0 * h)
    floor = max(1e-4 * float(np.max(np.abs(num))), 1e-12)
    denom = np.maximum(np.abs(num), floor)
    return float(np.max(np.abs(grad - num) / denom))
