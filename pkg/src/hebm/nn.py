"""Numeric substrate: counter-based RNG, small dense nets with manual
reverse-mode gradients, and Adam.

Everything here works on float64 numpy arrays.  Inputs to nets are always
batched: shape (n, dim).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# RNG


class RngStream:
    """Counter-based random stream keyed by (seed, tags).

    The same (seed, tags) pair always yields the same draw sequence, no
    matter where or in which order streams are consumed.  Disjoint tag
    tuples give statistically independent streams (Philox keys derived by
    hashing).
    """

    def __init__(self, seed: int, tags: tuple = ()):
        self.seed = int(seed)
        self.tags = tuple(tags)
        self._gen = None

    def child(self, *tags) -> "RngStream":
        return RngStream(self.seed, self.tags + tags)

    def _generator(self) -> np.random.Generator:
        if self._gen is None:
            h = hashlib.sha256(repr((self.seed, self.tags)).encode()).digest()
            key = int.from_bytes(h[:16], "little")
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self._generator().standard_normal(shape)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self._generator().uniform(low, high, shape)

    def integers(self, low, high=None, size=None):
        return self._generator().integers(low, high, size=size)

    def permutation(self, n) -> np.ndarray:
        return self._generator().permutation(n)


def draw_normal(stream: RngStream, n: int) -> np.ndarray:
    if n <= 0:
        raise ValueError(f"draw count must be positive, got {n}")
    return stream.normal(n)


# ---------------------------------------------------------------------------
# Activations


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ACTS = {
    "identity": (lambda x: x, lambda x, y: np.ones_like(y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    # derivative of softplus is the logistic sigmoid
    "softplus": (softplus, lambda x, y: sigmoid(x)),
}


# ---------------------------------------------------------------------------
# Feedforward nets


@dataclass
class FeedForwardNet:
    """Plain MLP: x -> act(x W + b) per layer, with hand-written VJP."""

    weights: list  # each (d_in, d_out)
    biases: list  # each (d_out,)
    activations: list  # tag per layer

    @classmethod
    def create(cls, sizes, stream: RngStream, hidden_act="tanh",
               out_act="identity", scale=None, zero_last=False):
        ws, bs, acts = [], [], []
        for i, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            s = scale if scale is not None else 1.0 / np.sqrt(din)
            w = stream.child("w", i).normal((din, dout)) * s
            if zero_last and last:
                w = np.zeros((din, dout))
            ws.append(w)
            bs.append(np.zeros(dout))
            acts.append(out_act if last else hidden_act)
        return cls(ws, bs, acts)

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def _check_input(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError("net input", (None, self.in_dim), x.shape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            x = _ACTS[tag][0](x @ w + b)
        return x

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping pre/post-activation values for the VJP."""
        self._check_input(x)
        cache = [x]
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            pre = cache[-1] @ w + b
            cache.append(pre)
            cache.append(_ACTS[tag][0](pre))
        return cache[-1], cache

    def vjp(self, cache, upstream: np.ndarray):
        """Gradients of sum(upstream * output) w.r.t. params and input.

        Returns (param_grads, input_grad) with param_grads aligned to
        ``params()``.
        """
        if upstream.shape != (cache[0].shape[0], self.out_dim):
            raise ShapeError("upstream", (cache[0].shape[0], self.out_dim),
                             upstream.shape)
        n_layers = len(self.weights)
        grads = [None] * (2 * n_layers)
        g = upstream
        for i in range(n_layers - 1, -1, -1):
            pre, post = cache[2 * i + 1], cache[2 * i + 2]
            inp = cache[2 * i]
            g = g * _ACTS[self.activations[i]][1](pre, post)
            grads[2 * i] = inp.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    def gradients(self, x: np.ndarray, upstream: np.ndarray):
        _, cache = self.forward_cached(x)
        return self.vjp(cache, upstream)

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params: list):
        n = len(self.weights)
        for i in range(n):
            self.weights[i] = params[2 * i]
            self.biases[i] = params[2 * i + 1]

    def sizes(self):
        return [self.in_dim] + [w.shape[1] for w in self.weights]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params],
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: list, grads: list):
    """One Adam update (in place on params).  Returns (state, params)."""
    if len(params) != len(grads):
        raise ShapeError("adam grads", len(params), len(grads))
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for tensor {i} "
                                 f"with shape {g.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state, params


def flat_grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
