"""First-stage hierarchical generator and ladder inference model.

Latent state is a "stack": a list of (n, d_i) arrays ordered bottom to top
(index 0 is the bottom layer, index L-1 the top).  The top layer has a
standard-normal prior; every other layer is conditionally Gaussian given
the layer above, with mean/std produced by a small net.  Observation
models: diagonal Gaussian with one global learned log-variance (for
low-dimensional data) or factorized Bernoulli (for [0,1] pixels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import (AdamState, FeedForwardNet, NonFiniteError, RngStream,
                 ShapeError, adam_step, sigmoid, softplus)

SIGMA_FLOOR = 1e-3

Stack = list  # list of (n, d_i) float64 arrays, bottom -> top


def check_stack(stack, dims):
    if len(stack) != len(dims):
        raise ShapeError("stack depth", len(dims), len(stack))
    n = stack[0].shape[0]
    for layer, d in zip(stack, dims):
        if layer.shape != (n, d):
            raise ShapeError("stack layer", (n, d), layer.shape)


def stack_concat(stack) -> np.ndarray:
    return np.concatenate(stack, axis=1)


def stack_split(flat, dims) -> Stack:
    return list(np.split(flat, np.cumsum(dims)[:-1], axis=1))


def split_mean_raw(out):
    d = out.shape[1] // 2
    return out[:, :d], out[:, d:]


def raw_to_sigma(raw):
    """std = softplus(raw) + floor; the floor keeps the transform invertible."""
    return softplus(raw) + SIGMA_FLOOR


@dataclass
class GeneratorParams:
    """Weights of the conditional-Gaussian prior chain and the decoder."""

    dims: tuple  # latent dims, bottom -> top
    prior_nets: list  # i = 0..L-2: maps z_{i+1} -> (mean, raw std) of layer i
    decoder: FeedForwardNet  # concat(stack) -> observation parameters
    obs_model: str  # 'gaussian' | 'bernoulli'
    obs_log_var: np.ndarray  # shape (1,), used by the gaussian model only

    @classmethod
    def create(cls, dims, data_dim, stream: RngStream, hidden=64,
               depth=2, obs_model="gaussian", obs_log_var_init=-4.6):
        """``obs_log_var_init`` starts the Gaussian observation std near the
        data noise scale; a unit-variance start lets early training explain
        the data as pure observation noise and stalls the latents."""
        dims = tuple(dims)
        nets = []
        for i in range(len(dims) - 1):
            sizes = [dims[i + 1]] + [hidden] * depth + [2 * dims[i]]
            nets.append(FeedForwardNet.create(sizes, stream.child("prior", i)))
        dec_sizes = [sum(dims)] + [hidden] * depth + [data_dim]
        decoder = FeedForwardNet.create(dec_sizes, stream.child("decoder"))
        return cls(dims, nets, decoder, obs_model,
                   np.full(1, float(obs_log_var_init)))

    @property
    def n_layers(self):
        return len(self.dims)

    @property
    def data_dim(self):
        return self.decoder.out_dim

    def params(self):
        out = []
        for net in self.prior_nets:
            out.extend(net.params())
        out.extend(self.decoder.params())
        if self.obs_model == "gaussian":
            out.append(self.obs_log_var)
        return out


@dataclass
class InferenceParams:
    """Bottom-up feature net plus per-layer top-down posterior nets."""

    dims: tuple
    feature_net: FeedForwardNet  # x -> h
    post_nets: list  # i = L-1: h -> (mean, raw); i < L-1: [z_{i+1}, h] -> (mean, raw)

    @classmethod
    def create(cls, dims, data_dim, stream: RngStream, hidden=64, depth=2):
        dims = tuple(dims)
        feat = FeedForwardNet.create([data_dim] + [hidden] * depth,
                                     stream.child("feat"), out_act="tanh")
        nets = []
        for i in range(len(dims)):
            din = hidden if i == len(dims) - 1 else dims[i + 1] + hidden
            sizes = [din] + [hidden] * (depth - 1) + [2 * dims[i]]
            nets.append(FeedForwardNet.create(sizes, stream.child("post", i)))
        return cls(dims, feat, nets)

    def params(self):
        out = list(self.feature_net.params())
        for net in self.post_nets:
            out.extend(net.params())
        return out


# ---------------------------------------------------------------------------
# Sampling and decoding


def prior_ancestral_sample(beta: GeneratorParams, stream: RngStream, n: int,
                           return_noise=False):
    """Top-down ancestral draw from the Gaussian prior chain."""
    L = beta.n_layers
    noise = [stream.child("eps", i).normal((n, d))
             for i, d in enumerate(beta.dims)]
    stack = [None] * L
    stack[L - 1] = noise[L - 1]
    for i in range(L - 2, -1, -1):
        mean, raw = split_mean_raw(beta.prior_nets[i].forward(stack[i + 1]))
        stack[i] = mean + raw_to_sigma(raw) * noise[i]
    if return_noise:
        return stack, noise
    return stack


def decode(beta: GeneratorParams, stack: Stack):
    """Observation-distribution parameters for a latent stack.

    Gaussian: (mean, log_var).  Bernoulli: per-pixel means in (0, 1).
    """
    check_stack(stack, beta.dims)
    out = beta.decoder.forward(stack_concat(stack))
    if beta.obs_model == "gaussian":
        return out, np.broadcast_to(beta.obs_log_var, out.shape)
    return sigmoid(out)


def infer(phi: InferenceParams, x: np.ndarray, stream: RngStream = None,
          noise: Stack = None):
    """Top-down ladder inference q(z_L|x), q(z_i|z_{i+1}, x).

    Returns (per-layer (mean, sigma) list ordered bottom->top, sampled
    stack).  With ``noise=None`` and no stream the posterior means are
    returned as the sample.
    """
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite input to inference")
    L = len(phi.dims)
    n = x.shape[0]
    h = phi.feature_net.forward(x)
    if noise is None and stream is not None:
        noise = [stream.child("eps", i).normal((n, d))
                 for i, d in enumerate(phi.dims)]
    moments = [None] * L
    stack = [None] * L
    for i in range(L - 1, -1, -1):
        inp = h if i == L - 1 else np.concatenate([stack[i + 1], h], axis=1)
        mean, raw = split_mean_raw(phi.post_nets[i].forward(inp))
        sig = raw_to_sigma(raw)
        moments[i] = (mean, sig)
        stack[i] = mean if noise is None else mean + sig * noise[i]
    return moments, stack


def gaussian_kl(mu_q, sig_q, mu_p, sig_p):
    """KL(N(mu_q, sig_q^2) || N(mu_p, sig_p^2)), summed over dims."""
    t = (np.log(sig_p) - np.log(sig_q)
         + (sig_q ** 2 + (mu_q - mu_p) ** 2) / (2 * sig_p ** 2) - 0.5)
    return t.sum(axis=1)


# ---------------------------------------------------------------------------
# ELBO training (manual backward pass, checked against finite differences)


def _obs_log_lik(beta, dec_out, x):
    if beta.obs_model == "gaussian":
        lv = beta.obs_log_var[0]
        return -0.5 * np.sum((x - dec_out) ** 2 * np.exp(-lv) + lv
                             + math.log(2 * math.pi), axis=1)
    # bernoulli on logits: x*l - softplus(l)
    return np.sum(x * dec_out - softplus(dec_out), axis=1)


def elbo_value_and_grads(beta: GeneratorParams, phi: InferenceParams,
                         x: np.ndarray, noise: Stack):
    """Batch-mean ELBO with frozen reparameterization noise, plus gradients
    w.r.t. beta.params() and phi.params().  Gradients are of the *negative*
    ELBO (ready for a minimizing optimizer)."""
    L = beta.n_layers
    n = x.shape[0]
    dims = beta.dims

    # ---- forward, keeping caches
    h, feat_cache = phi.feature_net.forward_cached(x)
    post = [None] * L  # (mean, raw, sig, cache, inp)
    prior = [None] * (L - 1)
    stack = [None] * L
    for i in range(L - 1, -1, -1):
        inp = h if i == L - 1 else np.concatenate([stack[i + 1], h], axis=1)
        out, cache = phi.post_nets[i].forward_cached(inp)
        mean, raw = split_mean_raw(out)
        sig = raw_to_sigma(raw)
        post[i] = (mean, raw, sig, cache)
        stack[i] = mean + sig * noise[i]
    for i in range(L - 2, -1, -1):
        out, cache = beta.prior_nets[i].forward_cached(stack[i + 1])
        mean, raw = split_mean_raw(out)
        prior[i] = (mean, raw, raw_to_sigma(raw), cache)

    zcat = stack_concat(stack)
    dec_out, dec_cache = beta.decoder.forward_cached(zcat)
    recon = _obs_log_lik(beta, dec_out, x)

    kls = []
    for i in range(L):
        mu_q, _, sig_q = post[i][0], post[i][1], post[i][2]
        if i == L - 1:
            kls.append(gaussian_kl(mu_q, sig_q, 0.0, 1.0))
        else:
            kls.append(gaussian_kl(mu_q, sig_q, prior[i][0], prior[i][2]))
    elbo = float(np.mean(recon - sum(kls)))
    if not np.isfinite(elbo):
        norms = [float(np.linalg.norm(z)) for z in stack]
        raise NonFiniteError(f"non-finite ELBO; layer norms {norms}")

    # ---- backward for loss = -mean(ELBO); all upstreams carry the 1/n
    inv_n = 1.0 / n
    if beta.obs_model == "gaussian":
        lv = beta.obs_log_var[0]
        g_dec = (dec_out - x) * np.exp(-lv) * inv_n
        g_logvar = np.array([0.5 * inv_n * float(
            np.sum(1.0 - (x - dec_out) ** 2 * np.exp(-lv)))])
    else:
        g_dec = (sigmoid(dec_out) - x) * inv_n
        g_logvar = None
    dec_grads, g_zcat = beta.decoder.vjp(dec_cache, g_dec)
    g_z = stack_split(g_zcat, dims)

    beta_net_grads = [None] * (L - 1)
    phi_net_grads = [None] * L
    g_h = np.zeros_like(h)
    for i in range(L):  # bottom-up: g_z[i] is complete when we reach it
        mu_q, raw_q, sig_q, cache_q = post[i]
        if i == L - 1:
            mu_p, sig_p = 0.0, 1.0
        else:
            mu_p, raw_p, sig_p, cache_p = prior[i]
        diff = mu_q - mu_p
        # KL partials (loss includes +KL/n)
        g_mu_q = diff / sig_p ** 2 * inv_n
        g_sig_q = (-1.0 / sig_q + sig_q / sig_p ** 2) * inv_n
        # reparameterized sample feeds downstream consumers
        g_mu_q = g_mu_q + g_z[i]
        g_sig_q = g_sig_q + g_z[i] * noise[i]
        up_q = np.concatenate([g_mu_q, g_sig_q * sigmoid(raw_q)], axis=1)
        phi_net_grads[i], g_inp = phi.post_nets[i].vjp(cache_q, up_q)
        if i == L - 1:
            g_h += g_inp
        else:
            g_z[i + 1] = g_z[i + 1] + g_inp[:, :dims[i + 1]]
            g_h += g_inp[:, dims[i + 1]:]
        if i < L - 1:
            g_mu_p = -diff / sig_p ** 2 * inv_n
            g_sig_p = (1.0 / sig_p
                       - (sig_q ** 2 + diff ** 2) / sig_p ** 3) * inv_n
            up_p = np.concatenate([g_mu_p, g_sig_p * sigmoid(raw_p)], axis=1)
            beta_net_grads[i], g_zp = beta.prior_nets[i].vjp(cache_p, up_p)
            g_z[i + 1] = g_z[i + 1] + g_zp
    feat_grads, _ = phi.feature_net.vjp(feat_cache, g_h)

    beta_grads = []
    for g in beta_net_grads:
        beta_grads.extend(g)
    beta_grads.extend(dec_grads)
    if beta.obs_model == "gaussian":
        beta_grads.append(g_logvar)
    phi_grads = list(feat_grads)
    for g in phi_net_grads:
        phi_grads.extend(g)
    return elbo, beta_grads, phi_grads


def elbo_step(beta: GeneratorParams, phi: InferenceParams, x: np.ndarray,
              opt_beta: AdamState, opt_phi: AdamState,
              stream: RngStream) -> float:
    """One Adam ascent step on the Monte-Carlo ELBO.  Returns the batch
    estimate before the update."""
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    n = x.shape[0]
    noise = [stream.child("eps", i).normal((n, d))
             for i, d in enumerate(beta.dims)]
    elbo, g_beta, g_phi = elbo_value_and_grads(beta, phi, x, noise)
    adam_step(opt_beta, beta.params(), g_beta)
    adam_step(opt_phi, phi.params(), g_phi)
    return elbo


def train_generator(beta, phi, data, iters, batch, lr, stream,
                    log_every=25):
    """ELBO training loop over minibatches.  Returns metric rows."""
    opt_beta = AdamState.for_params(beta.params(), lr=lr)
    opt_phi = AdamState.for_params(phi.params(), lr=lr)
    n = data.shape[0]
    rows = []
    for it in range(iters):
        idx = stream.child("batch", it).integers(0, n, size=batch)
        elbo = elbo_step(beta, phi, data[idx], opt_beta, opt_phi,
                         stream.child("iter", it))
        if it % log_every == 0 or it == iters - 1:
            rows.append({"iteration": it, "elbo": elbo})
    return rows
