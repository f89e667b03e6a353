"""Reverse-chain sampling, data synthesis, and hierarchical (layer-clamped)
resampling, plus per-step trajectory recording for energy-landscape
diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ebm import (EnergyParams, LangevinConfig, cond_log_density_unnorm,
                  langevin_sample)
from .generator import GeneratorParams, Stack, decode
from .nn import RngStream
from .uspace import DiffusionSchedule, perturb_to, to_latent


@dataclass
class ClampSpec:
    """Keep layers outside ``resample`` pinned to a reference stack: on the
    forward marginal at steps t >= 1, and exactly at t = 0."""

    reference: Stack
    resample: frozenset  # layer indices that stay free

    def __post_init__(self):
        self.resample = frozenset(self.resample)
        if not self.resample:
            raise ValueError("resample layer set must be non-empty")
        L = len(self.reference)
        bad = [i for i in self.resample if not 0 <= i < L]
        if bad:
            raise ValueError(f"clamp layer indices out of range: {bad}")


@dataclass
class ReverseRunConfig:
    n: int = 64
    temperature: float = 1.0  # scales the u_T draw and Langevin noise
    record: bool = False
    clamp: ClampSpec = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def _apply_clamp(u: Stack, clamp: ClampSpec, t: int,
                 sched: DiffusionSchedule, stream: RngStream) -> Stack:
    if clamp is None or len(clamp.resample) == len(u):
        return u
    if t == 0:
        pinned = clamp.reference
    else:
        pinned = perturb_to(clamp.reference, t, sched, stream.child("pin", t))
    return [ui if i in clamp.resample else pi.copy()
            for i, (ui, pi) in enumerate(zip(u, pinned))]


def reverse_chain(omega: EnergyParams, beta: GeneratorParams,
                  sched: DiffusionSchedule, lcfg: LangevinConfig,
                  rcfg: ReverseRunConfig, stream: RngStream,
                  stop_t: int = 0):
    """Ancestral reverse trajectory: u_T from a (temperature-scaled)
    standard normal, then one short-run Langevin draw per conditional EBM
    down to ``stop_t``.

    Returns (u_{stop_t}, trajectories) where trajectories maps diffusion
    step t to the (K, n) array of unnormalized conditional log densities
    along the chain (empty when recording is off)."""
    n = rcfg.n
    u = [rcfg.temperature * stream.child("uT", i).normal((n, d))
         for i, d in enumerate(beta.dims)]
    u = _apply_clamp(u, rcfg.clamp, sched.T, sched, stream)
    trajs = {}
    for t in range(sched.T - 1, stop_t - 1, -1):
        u_next, rec = langevin_sample(
            omega, beta, u, u, t, sched, lcfg, stream.child("rev", t),
            temperature=rcfg.temperature, record=rcfg.record)
        u = _apply_clamp(u_next, rcfg.clamp, t, sched, stream)
        if rcfg.record:
            trajs[t] = np.asarray(rec)
    return u, trajs


def synthesize(omega, beta, sched, lcfg, rcfg, stream):
    """Full sampling pipeline: reverse chain, map to latent space, decode.

    Returns (observation means, latent stack, u_0 stack)."""
    u0, _ = reverse_chain(omega, beta, sched, lcfg, rcfg, stream)
    z = to_latent(beta, u0)
    out = decode(beta, z)
    means = out[0] if beta.obs_model == "gaussian" else out
    return means, z, u0


def hierarchical_resample(omega, beta, sched, lcfg, u_ref: Stack,
                          resample_layers, stream, temperature=1.0,
                          record=False):
    """Regenerate only ``resample_layers`` while keeping the other layers
    forward-consistent with ``u_ref`` (exactly equal at t = 0)."""
    n = u_ref[0].shape[0]
    clamp = ClampSpec(u_ref, frozenset(resample_layers))
    rcfg = ReverseRunConfig(n=n, temperature=temperature, record=record,
                            clamp=clamp)
    return reverse_chain(omega, beta, sched, lcfg, rcfg, stream)


def trajectory_rows(trajs):
    """Flatten recorded trajectories to (chain, t, langevin_step,
    log_density) rows."""
    rows = []
    for t in sorted(trajs, reverse=True):
        arr = trajs[t]
        for k in range(arr.shape[0]):
            for c in range(arr.shape[1]):
                rows.append({"chain": c, "t": t, "langevin_step": k,
                             "log_density": float(arr[k, c])})
    return rows
