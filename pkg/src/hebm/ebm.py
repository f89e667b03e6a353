"""Conditional energy-based priors on base-noise space: energy evaluation,
localized Langevin sampling, and contrastive training against forward
diffusion pairs.

The unnormalized conditional log density at diffusion step t is

    F(T(u_t), t) - ||u_t||^2 / 2 - ||alpha_{t+1} u_t - u_{t+1}||^2 / (2 sigma_{t+1}^2)

where F sums one small net per latent layer, each taking the layer's
latent coordinates and a one-hot embedding of t.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .generator import GeneratorParams, InferenceParams, Stack, infer
from .nn import (AdamState, FeedForwardNet, NonFiniteError, RngStream,
                 adam_step, flat_grad_norm)
from .uspace import (DiffusionSchedule, latent_vjp, perturb_step, perturb_to,
                     to_base, to_latent_cached)


class LangevinDivergenceError(RuntimeError):
    def __init__(self, step, norm):
        super().__init__(f"Langevin chain diverged at step {step} "
                         f"(max |u| = {norm:.3g})")
        self.step = step


@dataclass
class EnergyParams:
    """Per-layer, time-conditioned energy nets summed into a joint energy."""

    dims: tuple
    T: int
    nets: list  # layer i: [z_i, one_hot(t)] -> scalar

    @classmethod
    def create(cls, dims, T, stream: RngStream, hidden=32, depth=2):
        dims = tuple(dims)
        nets = []
        for i, d in enumerate(dims):
            sizes = [d + T] + [hidden] * depth + [1]
            # softplus keeps the input gradient of F continuous; a zero
            # last layer starts training from the exact Gaussian baseline
            nets.append(FeedForwardNet.create(
                sizes, stream.child("energy", i), hidden_act="softplus",
                zero_last=True))
        return cls(dims, T, nets)

    def params(self):
        out = []
        for net in self.nets:
            out.extend(net.params())
        return out


@dataclass
class LangevinConfig:
    K: int = 50
    a: float = 0.05  # step size is a * sigma_{t+1}^2
    temperature: float = 1.0

    def __post_init__(self):
        if self.K < 1 or self.a < 0:
            raise ValueError(f"invalid Langevin config K={self.K} a={self.a}")


def time_embedding(t: int, T: int, n: int) -> np.ndarray:
    e = np.zeros((n, T))
    e[:, t] = 1.0
    return e


def stack_sqnorm(u: Stack) -> np.ndarray:
    return sum(np.sum(layer ** 2, axis=1) for layer in u)


# ---------------------------------------------------------------------------
# Energy and conditional density


def energy_of_latents(omega: EnergyParams, z: Stack, t: int):
    """Per-layer energies f_i(z_i, t); returns (total (n,), list of (n,))."""
    n = z[0].shape[0]
    emb = time_embedding(t, omega.T, n)
    per_layer = [net.forward(np.concatenate([zi, emb], axis=1))[:, 0]
                 for net, zi in zip(omega.nets, z)]
    return sum(per_layer), per_layer


def energy(omega: EnergyParams, beta: GeneratorParams, u: Stack, t: int):
    """Joint energy F(T(u), t) of a base-noise stack, with per-layer terms."""
    if not 0 <= t < omega.T:
        raise ValueError(f"diffusion step {t} out of range for T={omega.T}")
    z, _ = to_latent_cached(beta, u)
    return energy_of_latents(omega, z, t)


def energy_grad_u(omega: EnergyParams, beta: GeneratorParams, u: Stack,
                  t: int, layer_weights=None) -> Stack:
    """Gradient of F(T(u), t) w.r.t. u (chain rule through the transform).

    ``layer_weights`` optionally scales each layer's upstream (used by the
    symbol-coupled variants)."""
    n = u[0].shape[0]
    z, caches = to_latent_cached(beta, u)
    emb = time_embedding(t, omega.T, n)
    ones = np.ones((n, 1))
    g_z = []
    for i, (net, zi) in enumerate(zip(omega.nets, z)):
        up = ones if layer_weights is None else layer_weights[i]
        _, g_in = net.gradients(np.concatenate([zi, emb], axis=1), up)
        g_z.append(g_in[:, :zi.shape[1]])
    return latent_vjp(beta, u, caches, g_z)


def cond_log_density_unnorm(omega, beta, u_t: Stack, u_tp1: Stack, t: int,
                            sched: DiffusionSchedule) -> np.ndarray:
    """Unnormalized log p(u_t | u_{t+1}); the normalizer is never computed."""
    a, s2 = sched.alphas[t], sched.sigmas[t] ** 2
    total, _ = energy(omega, beta, u_t, t)
    quad = sum(np.sum((a * ut - up) ** 2, axis=1)
               for ut, up in zip(u_t, u_tp1))
    return total - 0.5 * stack_sqnorm(u_t) - quad / (2 * s2)


def cond_grad(omega, beta, u_t: Stack, u_tp1: Stack, t: int,
              sched: DiffusionSchedule) -> Stack:
    """Exact gradient of cond_log_density_unnorm w.r.t. u_t."""
    a, s2 = sched.alphas[t], sched.sigmas[t] ** 2
    g_f = energy_grad_u(omega, beta, u_t, t)
    out = []
    for gf, ut, up in zip(g_f, u_t, u_tp1):
        g = gf - ut - a * (a * ut - up) / s2
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite Langevin gradient at layer dim {ut.shape[1]}")
        out.append(g)
    return out


def marginal_grad_baseline(omega, beta, u: Stack) -> Stack:
    """Score of the marginal (non-diffusion) EBM, time embedding fixed to 0:
    grad of F(T(u), 0) - ||u||^2 / 2."""
    g_f = energy_grad_u(omega, beta, u, 0)
    return [gf - ui for gf, ui in zip(g_f, u)]


# ---------------------------------------------------------------------------
# Langevin sampling


def run_langevin(grad_fn, init: Stack, K: int, step: float,
                 stream: RngStream, temperature=1.0, logp_fn=None):
    """Generic chain u <- u + s*grad + sqrt(2s)*temperature*eps.

    Returns (final stack, per-step log densities or None)."""
    u = [layer.copy() for layer in init]
    coef = np.sqrt(2.0 * step) * temperature
    records = [] if logp_fn is not None else None
    for k in range(K):
        g = grad_fn(u)
        for i in range(len(u)):
            eps = stream.child("ld", k, i).normal(u[i].shape)
            u[i] = u[i] + step * g[i] + coef * eps
        top = max(float(np.max(np.abs(layer))) for layer in u)
        if top > 1e6:
            raise LangevinDivergenceError(k, top)
        if logp_fn is not None:
            records.append(logp_fn(u))
    return u, records


def langevin_sample(omega, beta, init: Stack, u_tp1: Stack, t: int,
                    sched: DiffusionSchedule, cfg: LangevinConfig,
                    stream: RngStream, temperature=None, record=False):
    """Short-run Langevin draw from the conditional EBM at step t,
    initialized at ``init`` (normally u_{t+1})."""
    temp = cfg.temperature if temperature is None else temperature
    step = cfg.a * sched.sigmas[t] ** 2
    logp = (lambda u: cond_log_density_unnorm(omega, beta, u, u_tp1, t, sched)) \
        if record else None
    return run_langevin(
        lambda u: cond_grad(omega, beta, u, u_tp1, t, sched),
        init, cfg.K, step, stream, temperature=temp, logp_fn=logp)


# ---------------------------------------------------------------------------
# Training (Alg: contrastive update on forward pairs at random t)


@dataclass
class TrainConfig:
    iters: int = 1000
    batch: int = 128
    lr: float = 2e-3
    clip_norm: float = None  # optional guard, off by default
    log_every: int = 1


def energy_param_grads(omega: EnergyParams, z: Stack, t: int, scale: float):
    """scale * d/d(omega) of sum over the batch of F(z, t)."""
    n = z[0].shape[0]
    emb = time_embedding(t, omega.T, n)
    up = np.full((n, 1), scale)
    grads = []
    for net, zi in zip(omega.nets, z):
        g, _ = net.gradients(np.concatenate([zi, emb], axis=1), up)
        grads.extend(g)
    return grads


def contrastive_grads(omega, z_pos: Stack, z_neg: Stack, t: int):
    """Gradients of the (to-minimize) loss mean[F(neg)] - mean[F(pos)]."""
    n = z_pos[0].shape[0]
    g_pos = energy_param_grads(omega, z_pos, t, -1.0 / n)
    g_neg = energy_param_grads(omega, z_neg, t, 1.0 / z_neg[0].shape[0])
    return [a + b for a, b in zip(g_pos, g_neg)]


def train_prior(omega: EnergyParams, beta: GeneratorParams,
                phi: InferenceParams, data: np.ndarray,
                sched: DiffusionSchedule, lcfg: LangevinConfig,
                tcfg: TrainConfig, stream: RngStream):
    """Second-stage EBM training against the frozen generator.

    Each iteration: infer a posterior stack, map it to base-noise space,
    pick a random diffusion step, draw the forward pair (u_t*, u_{t+1}*),
    run Langevin from u_{t+1}*, and take a contrastive Adam step.
    Returns metric rows."""
    if beta is None or phi is None:
        raise ValueError("train_prior needs a trained, frozen first stage")
    opt = AdamState.for_params(omega.params(), lr=tcfg.lr)
    n = data.shape[0]
    rows = []
    for it in range(tcfg.iters):
        t0 = time.perf_counter()
        rs = stream.child("iter", it)
        idx = rs.child("batch").integers(0, n, size=tcfg.batch)
        _, z0 = infer(phi, data[idx], rs.child("infer"))
        u0 = to_base(beta, z0)
        t = int(rs.child("t").integers(0, sched.T))
        u_t = u0 if t == 0 else perturb_to(u0, t, sched, rs.child("fwd"))
        u_tp1 = perturb_step(u_t, t, sched, rs.child("fwd1"))
        u_neg, _ = langevin_sample(omega, beta, u_tp1, u_tp1, t, sched, lcfg,
                                   rs.child("neg"))
        z_pos, _ = to_latent_cached(beta, u_t)
        z_neg, _ = to_latent_cached(beta, u_neg)
        grads = contrastive_grads(omega, z_pos, z_neg, t)
        gnorm = flat_grad_norm(grads)
        if tcfg.clip_norm is not None and gnorm > tcfg.clip_norm:
            grads = [g * (tcfg.clip_norm / gnorm) for g in grads]
        adam_step(opt, omega.params(), grads)
        e_pos = float(np.mean(energy_of_latents(omega, z_pos, t)[0]))
        e_neg = float(np.mean(energy_of_latents(omega, z_neg, t)[0]))
        if it % tcfg.log_every == 0 or it == tcfg.iters - 1:
            rows.append({"iteration": it, "t": t, "E_pos": e_pos,
                         "E_neg": e_neg, "grad_norm": gnorm,
                         "wall_ms": (time.perf_counter() - t0) * 1e3})
    return rows
