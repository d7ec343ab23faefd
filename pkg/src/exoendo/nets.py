"""Small dense networks and the Adam update rule in plain numpy.

Parameters are stored as a flat list ``[W1, b1, W2, b2, ...]`` with
``W_k`` of shape (fan_in, fan_out). Hidden layers share one activation and
the output layer is linear.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from .errors import DimensionError, DomainError

__all__ = ["init_mlp", "mlp_forward", "mlp_backward", "Adam", "global_norm_clip"]

ACTIVATIONS = ("relu", "tanh")


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False) -> List[np.ndarray]:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise DimensionError(f"invalid layer sizes {tuple(sizes)}")
    params = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        if zero_last and k == len(sizes) - 2:
            w[:] = 0.0
            b[:] = 0.0
        params += [w, b]
    return params


def mlp_forward(params: Sequence[np.ndarray], x: np.ndarray, activation: str) -> Tuple[np.ndarray, list]:
    """Forward pass; returns the output and the per-layer inputs needed for backprop."""
    if activation not in ACTIVATIONS:
        raise DomainError(f"unknown activation {activation!r}")
    h = np.asarray(x, dtype=float)
    if h.ndim != 2 or h.shape[1] != params[0].shape[0]:
        raise DimensionError(f"input shape {h.shape} does not match first layer {params[0].shape}")
    cache = []
    n_layers = len(params) // 2
    for k in range(n_layers):
        w, b = params[2 * k], params[2 * k + 1]
        cache.append(h)
        z = h @ w + b
        if k < n_layers - 1:
            h = np.maximum(z, 0.0) if activation == "relu" else np.tanh(z)
        else:
            h = z
    return h, cache


def mlp_backward(params: Sequence[np.ndarray], cache: list, grad_out: np.ndarray, activation: str) -> List[np.ndarray]:
    """Gradients of a scalar loss w.r.t. all parameters given dLoss/dOutput."""
    n_layers = len(params) // 2
    grads: List[np.ndarray] = [None] * len(params)
    g = grad_out
    for k in range(n_layers - 1, -1, -1):
        h_in = cache[k]
        grads[2 * k] = h_in.T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        if k > 0:
            g = g @ params[2 * k].T
            # h_in is the activation output of layer k-1
            if activation == "relu":
                g = g * (h_in > 0)
            else:
                g = g * (1.0 - h_in ** 2)
    return grads


def global_norm_clip(grads: List[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the raw norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if np.isfinite(max_norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads:
            g *= scale
    return norm


class Adam:
    """Adam with bias correction; state is one (m, v) pair per parameter array."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
            raise DomainError("invalid Adam hyperparameters")
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: List[np.ndarray], grads: Sequence[np.ndarray]):
        """In-place update of ``params``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr > 0:
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> List[np.ndarray]:
        return self.m + self.v
