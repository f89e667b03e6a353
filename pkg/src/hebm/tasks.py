"""Label-coupled energies at diffusion step 0 (classifier + controllable
sampling) and out-of-distribution scoring.

A symbol is one or more categorical blocks; each block is wired to a band
of latent layers whose energy nets emit that block's logits.  Layers not
assigned to any block keep a scalar energy.  Coupling lives entirely at
t = 0; all t >= 1 steps use the plain scalar-energy prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ebm import (EnergyParams, LangevinConfig, energy_grad_u,
                  energy_of_latents, run_langevin, stack_sqnorm)
from .generator import GeneratorParams, InferenceParams, Stack, infer
from .nn import (AdamState, FeedForwardNet, RngStream, adam_step,
                 flat_grad_norm)
from .uspace import (DiffusionSchedule, perturb_step, perturb_to, to_base,
                     to_latent, to_latent_cached)
from .ebm import TrainConfig, contrastive_grads, langevin_sample, time_embedding
from .synthesis import ReverseRunConfig, reverse_chain

import time


@dataclass(frozen=True)
class SymbolBlock:
    arity: int
    layers: frozenset

    def __post_init__(self):
        object.__setattr__(self, "layers", frozenset(self.layers))
        if self.arity < 1 or not self.layers:
            raise ValueError("block needs arity >= 1 and assigned layers")


@dataclass
class SymbolSpec:
    blocks: list

    def __post_init__(self):
        seen = set()
        for b in self.blocks:
            if seen & b.layers:
                raise ValueError("blocks must use disjoint layer sets")
            seen |= b.layers
        self.assigned = seen

    def validate(self, n_layers):
        bad = [i for i in self.assigned if not 0 <= i < n_layers]
        if bad:
            raise ValueError(f"assigned layers out of range: {bad}")

    def block_of(self, layer):
        for bi, b in enumerate(self.blocks):
            if layer in b.layers:
                return bi
        return None


@dataclass
class CoupledEnergyParams:
    """Per-layer nets at t = 0: block logits on assigned layers, scalar
    energies elsewhere."""

    dims: tuple
    T: int
    spec: SymbolSpec
    nets: list

    @classmethod
    def create(cls, dims, T, spec: SymbolSpec, stream: RngStream,
               hidden=32, depth=2):
        dims = tuple(dims)
        spec.validate(len(dims))
        nets = []
        for i, d in enumerate(dims):
            bi = spec.block_of(i)
            out = 1 if bi is None else spec.blocks[bi].arity
            nets.append(FeedForwardNet.create(
                [d + T] + [hidden] * depth + [out],
                stream.child("coupled", i), hidden_act="softplus",
                zero_last=True))
        return cls(dims, T, spec, nets)

    def params(self):
        out = []
        for net in self.nets:
            out.extend(net.params())
        return out


def softmax(logits):
    m = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(m)
    return e / e.sum(axis=1, keepdims=True)


def logsumexp(logits):
    m = logits.max(axis=1)
    return m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))


def _layer_outputs(wc: CoupledEnergyParams, z: Stack):
    n = z[0].shape[0]
    emb = time_embedding(0, wc.T, n)
    return [net.forward(np.concatenate([zi, emb], axis=1))
            for net, zi in zip(wc.nets, z)]


def _block_logits(wc, outs):
    logits = []
    for b in wc.spec.blocks:
        logits.append(sum(outs[i] for i in sorted(b.layers)))
    return logits


def _unassigned_energy(wc, outs):
    total = 0.0
    for i, out in enumerate(outs):
        if wc.spec.block_of(i) is None:
            total = total + out[:, 0]
    return total


def classify(wc: CoupledEnergyParams, beta: GeneratorParams, u0: Stack,
             u1: Stack = None):
    """Softmax over summed assigned-layer logits, one probability array per
    block.  Conditioning on u1 cancels in the ratio, so it is unused."""
    z = to_latent(beta, u0)
    outs = _layer_outputs(wc, z)
    return [softmax(l) for l in _block_logits(wc, outs)]


def coupled_marginal_energy(wc, beta, u0: Stack) -> np.ndarray:
    """Log-sum-exp of the label-coupled energy over all symbols, plus the
    unassigned scalar energies."""
    z = to_latent(beta, u0)
    outs = _layer_outputs(wc, z)
    total = _unassigned_energy(wc, outs)
    for logits in _block_logits(wc, outs):
        total = total + logsumexp(logits)
    return np.asarray(total)


def selected_energy(wc, beta, u0: Stack, y) -> np.ndarray:
    """Energy with the symbol fixed: sum of picked logits plus unassigned
    scalar energies.  ``y`` gives one category index per block."""
    z = to_latent(beta, u0)
    outs = _layer_outputs(wc, z)
    total = _unassigned_energy(wc, outs)
    for logits, yb in zip(_block_logits(wc, outs), y):
        total = total + logits[np.arange(logits.shape[0]), yb]
    return np.asarray(total)


def _layer_weights(wc, z, y=None):
    """Upstream weight per layer net for the marginal (y=None) or selected
    coupled energy."""
    n = z[0].shape[0]
    outs = _layer_outputs(wc, z)
    logits = _block_logits(wc, outs)
    weights = []
    for i in range(len(wc.nets)):
        bi = wc.spec.block_of(i)
        if bi is None:
            weights.append(np.ones((n, 1)))
        elif y is None:
            weights.append(softmax(logits[bi]))
        else:
            w = np.zeros_like(logits[bi])
            w[np.arange(n), y[bi]] = 1.0
            weights.append(w)
    return weights


def coupled_grad_u(wc, beta, u0: Stack, y=None) -> Stack:
    z, _ = to_latent_cached(beta, u0)
    return energy_grad_u(wc, beta, u0, 0, layer_weights=_layer_weights(wc, z, y))


def coupled_cond_grad(wc, beta, u0, u1, sched: DiffusionSchedule, y=None):
    """Langevin gradient at t = 0 for the coupled model: marginal (y=None)
    or symbol-pinned energy, plus the Gaussian localization terms."""
    a, s2 = sched.alphas[0], sched.sigmas[0] ** 2
    g_f = coupled_grad_u(wc, beta, u0, y)
    return [gf - ui - a * (a * ui - vi) / s2
            for gf, ui, vi in zip(g_f, u0, u1)]


# ---------------------------------------------------------------------------
# Training


def _coupled_param_grads(wc, z: Stack, scale, y=None):
    """scale * d/d(wc) of the summed coupled energy (marginal or selected)."""
    n = z[0].shape[0]
    emb = time_embedding(0, wc.T, n)
    weights = _layer_weights(wc, z, y)
    grads = []
    for net, zi, w in zip(wc.nets, z, weights):
        g, _ = net.gradients(np.concatenate([zi, emb], axis=1), w * scale)
        grads.extend(g)
    return grads


def _ce_grads_and_loss(wc, z: Stack, labels):
    """Cross-entropy over all blocks at the positive samples; labels is a
    (n, n_blocks) int array."""
    n = z[0].shape[0]
    emb = time_embedding(0, wc.T, n)
    outs = _layer_outputs(wc, z)
    logits = _block_logits(wc, outs)
    ups = [None] * len(wc.nets)
    loss = 0.0
    correct = 0
    for bi, lg in enumerate(logits):
        p = softmax(lg)
        y = labels[:, bi]
        loss += float(-np.mean(np.log(p[np.arange(n), y] + 1e-300)))
        correct += int(np.sum(np.argmax(lg, axis=1) == y))
        g = (p - np.eye(lg.shape[1])[y]) / n
        for i in wc.spec.blocks[bi].layers:
            ups[i] = g
    grads = []
    for i, net in enumerate(wc.nets):
        if ups[i] is None:
            grads.extend([np.zeros_like(p) for p in net.params()])
        else:
            g, _ = net.gradients(np.concatenate([z[i], emb], axis=1), ups[i])
            grads.extend(g)
    acc = correct / (n * len(logits))
    return grads, loss, acc


def train_coupled(wc: CoupledEnergyParams, omega: EnergyParams,
                  beta: GeneratorParams, phi: InferenceParams,
                  data: np.ndarray, labels: np.ndarray,
                  sched: DiffusionSchedule, lcfg: LangevinConfig,
                  tcfg: TrainConfig, stream: RngStream, ce_weight=1.0):
    """Joint second-stage training with labels.

    Random diffusion step per iteration: t >= 1 updates the plain prior
    (contrastive, as in unlabeled training); t = 0 updates the coupled nets
    with a contrastive term on the marginalized energy plus cross-entropy
    on the classifier.  Returns metric rows."""
    labels = np.atleast_2d(np.asarray(labels, dtype=int))
    if labels.shape[0] != data.shape[0]:
        labels = labels.T
    if labels.shape[1] != len(wc.spec.blocks):
        raise ValueError(
            f"label arity mismatch: {labels.shape[1]} columns for "
            f"{len(wc.spec.blocks)} blocks")
    opt_wc = AdamState.for_params(wc.params(), lr=tcfg.lr)
    opt_w = AdamState.for_params(omega.params(), lr=tcfg.lr)
    n = data.shape[0]
    rows = []
    for it in range(tcfg.iters):
        t0 = time.perf_counter()
        rs = stream.child("iter", it)
        idx = rs.child("batch").integers(0, n, size=tcfg.batch)
        _, z0 = infer(phi, data[idx], rs.child("infer"))
        u0 = to_base(beta, z0)
        t = int(rs.child("t").integers(0, sched.T))
        row = {"iteration": it, "t": t,
               "wall_ms": 0.0, "ce": float("nan"), "acc": float("nan")}
        if t >= 1:
            u_t = perturb_to(u0, t, sched, rs.child("fwd"))
            u_tp1 = perturb_step(u_t, t, sched, rs.child("fwd1"))
            u_neg, _ = langevin_sample(omega, beta, u_tp1, u_tp1, t, sched,
                                       lcfg, rs.child("neg"))
            z_pos, _ = to_latent_cached(beta, u_t)
            z_neg, _ = to_latent_cached(beta, u_neg)
            adam_step(opt_w, omega.params(),
                      contrastive_grads(omega, z_pos, z_neg, t))
            row["E_pos"] = float(np.mean(energy_of_latents(omega, z_pos, t)[0]))
            row["E_neg"] = float(np.mean(energy_of_latents(omega, z_neg, t)[0]))
        else:
            u1 = perturb_step(u0, 0, sched, rs.child("fwd1"))
            step = lcfg.a * sched.sigmas[0] ** 2
            u_neg, _ = run_langevin(
                lambda u: coupled_cond_grad(wc, beta, u, u1, sched),
                u1, lcfg.K, step, rs.child("neg"),
                temperature=lcfg.temperature)
            z_pos, _ = to_latent_cached(beta, u0)
            z_neg, _ = to_latent_cached(beta, u_neg)
            nb = z_pos[0].shape[0]
            g_pos = _coupled_param_grads(wc, z_pos, -1.0 / nb)
            g_neg = _coupled_param_grads(wc, z_neg, 1.0 / nb)
            g_ce, ce, acc = _ce_grads_and_loss(wc, z_pos, labels[idx])
            grads = [a + b + ce_weight * c
                     for a, b, c in zip(g_pos, g_neg, g_ce)]
            adam_step(opt_wc, wc.params(), grads)
            row["E_pos"] = float(np.mean(coupled_marginal_energy(wc, beta, u0)))
            row["E_neg"] = float(np.mean(coupled_marginal_energy(wc, beta, u_neg)))
            row["ce"], row["acc"] = ce, acc
        row["wall_ms"] = (time.perf_counter() - t0) * 1e3
        if it % tcfg.log_every == 0 or it == tcfg.iters - 1:
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Controllable / compositional sampling


def controllable_sample(wc, omega, beta, y, sched, lcfg, stream, n,
                        temperature=1.0, clamp=None):
    """Reverse unconditionally down to u_1, then run the final Langevin
    step with the symbol pinned to ``y`` (y=None gives the unconditional
    coupled sampler; identical trajectories when the coupled nets carry no
    signal).

    ``clamp`` optionally fixes layers to a reference stack for
    compositional generation."""
    if y is not None:
        y = list(y)
        if len(y) != len(wc.spec.blocks):
            raise ValueError(f"symbol has {len(y)} entries for "
                             f"{len(wc.spec.blocks)} blocks")
        for yb, b in zip(y, wc.spec.blocks):
            if not 0 <= int(yb) < b.arity:
                raise ValueError(f"unknown symbol value {yb} (arity {b.arity})")
        y = [np.full(n, int(yb)) for yb in y]
    rcfg = ReverseRunConfig(n=n, temperature=temperature, clamp=clamp)
    if sched.T >= 2:
        u1, _ = reverse_chain(omega, beta, sched, lcfg, rcfg, stream,
                              stop_t=1)
    else:
        u1 = [temperature * stream.child("uT", i).normal((n, d))
              for i, d in enumerate(beta.dims)]
        if clamp is not None:
            u1 = [ui if i in clamp.resample
                  else perturb_to(clamp.reference, 1, sched,
                                  stream.child("pin1"))[i]
                  for i, ui in enumerate(u1)]
    step = lcfg.a * sched.sigmas[0] ** 2
    u0, _ = run_langevin(
        lambda u: coupled_cond_grad(wc, beta, u, u1, sched, y),
        u1, lcfg.K, step, stream.child("ctrl"), temperature=temperature)
    if clamp is not None:
        u0 = [ui if i in clamp.resample else clamp.reference[i].copy()
              for i, ui in enumerate(u0)]
    return u0


# ---------------------------------------------------------------------------
# Out-of-distribution scoring


def _top_layer_score(omega, z: Stack, k: int) -> np.ndarray:
    """Energy of the layers above index k.  The density tilt is exp(+f),
    so the score is -f: lower means more in-distribution."""
    _, per_layer = energy_of_latents(omega, z, 0)
    return -sum(per_layer[i] for i in range(k, len(per_layer)))


def ood_score_inference(omega, beta, phi, x: np.ndarray, k: int) -> np.ndarray:
    """Energy of the inferred posterior-mean latents, summed over the
    layers above index k (lower score = more in-distribution)."""
    if not 0 <= k < beta.n_layers:
        raise ValueError(f"layer index {k} out of range")
    _, z = infer(phi, x)
    return _top_layer_score(omega, z, k)


def ood_score_diffusion(omega, beta, phi, x: np.ndarray, k: int,
                        sched: DiffusionSchedule, lcfg: LangevinConfig,
                        stream: RngStream, fresh_chain=False) -> np.ndarray:
    """Diffusion-based score: splice the forward-perturbed inference stack
    (layers above k) with a model reverse-trajectory stack (layers up to k)
    at t = 1, re-sample u_0 from the conditional EBM, and score the top
    layers.  ``fresh_chain`` is accepted for signature stability; each call
    already runs its own reverse chain."""
    if not 0 <= k < beta.n_layers:
        raise ValueError(f"layer index {k} out of range")
    n = x.shape[0]
    _, z = infer(phi, x)
    u0_inf = to_base(beta, z)
    u1_data = perturb_to(u0_inf, 1, sched, stream.child("fwd"))
    if sched.T >= 2:
        rcfg = ReverseRunConfig(n=n)
        u1_model, _ = reverse_chain(omega, beta, sched, lcfg, rcfg,
                                    stream.child("model"), stop_t=1)
    else:
        u1_model = [stream.child("model", i).normal((n, d))
                    for i, d in enumerate(beta.dims)]
    u1 = [u1_data[i] if i >= k else u1_model[i]
          for i in range(beta.n_layers)]
    u0, _ = langevin_sample(omega, beta, u1, u1, 0, sched, lcfg,
                            stream.child("resample"))
    return _top_layer_score(omega, to_latent(beta, u0), k)


def auroc(id_scores, ood_scores) -> float:
    """Rank-based (Mann-Whitney) AUROC; ties count half.  Convention: OOD
    is expected to score higher."""
    id_scores = np.asarray(id_scores, dtype=float)
    ood_scores = np.asarray(ood_scores, dtype=float)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ValueError("auroc needs non-empty score lists")
    pooled = np.concatenate([id_scores, ood_scores])
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(pooled.size)
    sorted_vals = pooled[order]
    i = 0
    while i < pooled.size:
        j = i
        while j + 1 < pooled.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_i, n_o = id_scores.size, ood_scores.size
    r_ood = ranks[n_i:].sum()
    return float((r_ood - n_o * (n_o + 1) / 2.0) / (n_i * n_o))
