"""Invertible map between latent space and base-noise space, plus the
forward diffusion process that runs on base-noise coordinates.

The map is layer-triangular: the top layer passes through unchanged and
each lower layer is the conditional-Gaussian reparameterization
z_i = mean_i(z_{i+1}) + std_i(z_{i+1}) * u_i.  Its inverse divides out the
(floored) std, so the round trip is exact to floating-point precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .generator import (GeneratorParams, Stack, check_stack, raw_to_sigma,
                        split_mean_raw)
from .nn import RngStream, sigmoid


def to_latent(beta: GeneratorParams, u: Stack) -> Stack:
    check_stack(u, beta.dims)
    L = beta.n_layers
    z = [None] * L
    z[L - 1] = u[L - 1]
    for i in range(L - 2, -1, -1):
        mean, raw = split_mean_raw(beta.prior_nets[i].forward(z[i + 1]))
        z[i] = mean + raw_to_sigma(raw) * u[i]
    return z


def to_base(beta: GeneratorParams, z: Stack) -> Stack:
    check_stack(z, beta.dims)
    L = beta.n_layers
    u = [None] * L
    u[L - 1] = z[L - 1]
    for i in range(L - 2, -1, -1):
        mean, raw = split_mean_raw(beta.prior_nets[i].forward(z[i + 1]))
        u[i] = (z[i] - mean) / raw_to_sigma(raw)
    return u


def to_latent_cached(beta: GeneratorParams, u: Stack):
    """Like to_latent but keeps the per-layer net caches for the VJP."""
    check_stack(u, beta.dims)
    L = beta.n_layers
    z = [None] * L
    caches = [None] * (L - 1)
    z[L - 1] = u[L - 1]
    for i in range(L - 2, -1, -1):
        out, cache = beta.prior_nets[i].forward_cached(z[i + 1])
        mean, raw = split_mean_raw(out)
        caches[i] = (raw, cache)
        z[i] = mean + raw_to_sigma(raw) * u[i]
    return z, caches


def latent_vjp(beta: GeneratorParams, u: Stack, caches, g_z: Stack) -> Stack:
    """Pull per-layer gradients on z back to gradients on u through the
    triangular transform.  ``g_z`` is consumed (entries are accumulated
    into)."""
    L = beta.n_layers
    g_z = list(g_z)
    g_u = [None] * L
    for i in range(L - 1):  # bottom-up; g_z[i] complete when reached
        raw, cache = caches[i]
        sig = raw_to_sigma(raw)
        g_u[i] = g_z[i] * sig
        up = np.concatenate([g_z[i], g_z[i] * u[i] * sigmoid(raw)], axis=1)
        _, g_above = beta.prior_nets[i].vjp(cache, up)
        g_z[i + 1] = g_z[i + 1] + g_above
    g_u[L - 1] = g_z[L - 1]
    return g_u


# ---------------------------------------------------------------------------
# Diffusion schedule and forward process


@dataclass
class DiffusionSchedule:
    """Per-step (alpha, sigma) with alpha^2 + sigma^2 = 1.

    ``alphas[t]`` and ``sigmas[t]`` govern the step from time t to t+1
    (0-based).  ``alpha_bars[t]`` is the cumulative product over the first
    t steps, with alpha_bars[0] = 1.
    """

    T: int
    alphas: np.ndarray  # (T,)
    sigmas: np.ndarray  # (T,)
    alpha_bars: np.ndarray  # (T+1,)


def make_schedule(T: int, alpha_bar_T: float = 0.01) -> DiffusionSchedule:
    """Geometric signal-decay schedule: alpha_bar_t = alpha_bar_T ** (t/T),
    so every per-step alpha equals alpha_bar_T ** (1/T)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < alpha_bar_T < 1.0:
        raise ValueError(f"alpha_bar_T must lie in (0,1), got {alpha_bar_T}")
    ts = np.arange(T + 1, dtype=np.float64)
    alpha_bars = alpha_bar_T ** (ts / T)
    alphas = alpha_bars[1:] / alpha_bars[:-1]
    sigmas = np.sqrt(1.0 - alphas ** 2)
    return DiffusionSchedule(T, alphas, sigmas, alpha_bars)


def perturb_step(u_t: Stack, t: int, sched: DiffusionSchedule,
                 stream: RngStream = None, noise: Stack = None) -> Stack:
    """One forward kernel application: u_{t+1} = alpha*u_t + sigma*eps."""
    if not 0 <= t < sched.T:
        raise ValueError(f"step index {t} out of range for T={sched.T}")
    a, s = sched.alphas[t], sched.sigmas[t]
    if noise is None:
        noise = [stream.child("kstep", t, i).normal(layer.shape)
                 for i, layer in enumerate(u_t)]
    return [a * layer + s * eps for layer, eps in zip(u_t, noise)]


def perturb_to(u_0: Stack, t: int, sched: DiffusionSchedule,
               stream: RngStream = None, noise: Stack = None) -> Stack:
    """One-shot draw from the t-step forward marginal
    N(alpha_bar_t * u_0, (1 - alpha_bar_t^2) I)."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"marginal step {t} out of range for T={sched.T}")
    ab = sched.alpha_bars[t]
    sd = np.sqrt(1.0 - ab ** 2)
    if noise is None:
        noise = [stream.child("kmarg", t, i).normal(layer.shape)
                 for i, layer in enumerate(u_0)]
    return [ab * layer + sd * eps for layer, eps in zip(u_0, noise)]
