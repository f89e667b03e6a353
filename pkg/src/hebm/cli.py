"""Command-line surface: data generation, the two training stages,
sampling variants, OOD scoring, ablation sweeps, and checkpoint
inspection.  Every run is pinned by (config JSON, seed)."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as dat
from . import ebm, generator, metrics, synthesis, tasks, uspace
from .checkpoint import (CheckpointError, ModelBundle, inspect_checkpoint,
                         load_checkpoint, save_checkpoint)
from .config import ConfigError, RunConfig, thread_cap
from .nn import RngStream


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Pipeline helpers


def dataset_from_config(cfg: RunConfig):
    spec = dat.DatasetSpec(cfg.data_kind, cfg.data_size, cfg.data_noise,
                           cfg.data_labels, cfg.seed,
                           cfg.data_path or None)
    return dat.gen_synthetic(spec)


def build_first_stage(cfg: RunConfig, data_dim: int):
    rs = RngStream(cfg.seed, ("init",))
    beta = generator.GeneratorParams.create(
        cfg.dims, data_dim, rs.child("beta"), hidden=cfg.hidden,
        obs_model=cfg.obs_model)
    phi = generator.InferenceParams.create(
        cfg.dims, data_dim, rs.child("phi"),
        hidden=cfg.inference_hidden or cfg.hidden)
    return beta, phi


def schedule_of(cfg: RunConfig):
    return uspace.make_schedule(cfg.T, cfg.alpha_bar_T)


def langevin_of(cfg: RunConfig):
    return ebm.LangevinConfig(K=cfg.K, a=cfg.step_a,
                              temperature=cfg.temperature)


def run_train_generator(cfg: RunConfig, out_dir):
    x, _ = dataset_from_config(cfg)
    beta, phi = build_first_stage(cfg, x.shape[1])
    rows = generator.train_generator(
        beta, phi, x, cfg.gen_iters, cfg.batch, cfg.lr,
        RngStream(cfg.seed, ("train-gen",)))
    bundle = ModelBundle(beta=beta, phi=phi,
                         schedule={"T": cfg.T, "alpha_bar_T": cfg.alpha_bar_T},
                         config=cfg.to_dict(), seed=cfg.seed)
    save_checkpoint(bundle, os.path.join(out_dir, "gen.ckpt"))
    dat.write_metrics_csv(os.path.join(out_dir, "gen_metrics.csv"), rows)
    return rows[-1]["elbo"]


def run_train_prior(cfg: RunConfig, gen_ckpt, out_dir):
    bundle = load_checkpoint(gen_ckpt)
    if bundle.beta is None or bundle.phi is None:
        raise CheckpointError(f"{gen_ckpt}: missing first-stage models")
    x, _ = dataset_from_config(cfg)
    sched = schedule_of(cfg)
    omega = ebm.EnergyParams.create(
        bundle.beta.dims, cfg.T, RngStream(cfg.seed, ("init-ebm",)),
        hidden=cfg.energy_hidden)
    tcfg = ebm.TrainConfig(iters=cfg.ebm_iters, batch=cfg.batch,
                           lr=cfg.ebm_lr)
    rows = ebm.train_prior(omega, bundle.beta, bundle.phi, x, sched,
                           langevin_of(cfg), tcfg,
                           RngStream(cfg.seed, ("train-prior",)))
    bundle.omega = omega
    bundle.schedule = {"T": cfg.T, "alpha_bar_T": cfg.alpha_bar_T}
    bundle.config = cfg.to_dict()
    save_checkpoint(bundle, os.path.join(out_dir, "ebm.ckpt"))
    dat.write_metrics_csv(os.path.join(out_dir, "prior_metrics.csv"), rows)
    return rows[-1]


def run_train_coupled(cfg: RunConfig, gen_ckpt, out_dir, top_layers=1):
    bundle = load_checkpoint(gen_ckpt)
    x, labels = dataset_from_config(cfg)
    if labels is None or cfg.data_labels < 2:
        raise UsageError("train-coupled needs a labeled dataset "
                         "(set data_labels >= 2)")
    sched = schedule_of(cfg)
    L = len(bundle.beta.dims)
    spec = tasks.SymbolSpec([tasks.SymbolBlock(
        cfg.data_labels, frozenset(range(L - top_layers, L)))])
    rs = RngStream(cfg.seed, ("init-coupled",))
    omega = bundle.omega or ebm.EnergyParams.create(
        bundle.beta.dims, cfg.T, rs.child("omega"), hidden=cfg.energy_hidden)
    wc = tasks.CoupledEnergyParams.create(bundle.beta.dims, cfg.T, spec,
                                          rs.child("wc"),
                                          hidden=cfg.energy_hidden)
    tcfg = ebm.TrainConfig(iters=cfg.ebm_iters, batch=cfg.batch,
                           lr=cfg.ebm_lr)
    rows = tasks.train_coupled(wc, omega, bundle.beta, bundle.phi, x, labels,
                               sched, langevin_of(cfg), tcfg,
                               RngStream(cfg.seed, ("train-coupled",)),
                               ce_weight=cfg.ce_weight)
    bundle.omega, bundle.wc = omega, wc
    bundle.config = cfg.to_dict()
    save_checkpoint(bundle, os.path.join(out_dir, "coupled.ckpt"))
    dat.write_metrics_csv(os.path.join(out_dir, "coupled_metrics.csv"), rows)
    return rows[-1]


def _require(bundle, *names):
    for name in names:
        if getattr(bundle, name) is None:
            raise CheckpointError(f"checkpoint is missing model {name!r}")


def _emit_samples(out_dir, cfg, means):
    if cfg.obs_model == "bernoulli":
        side = int(round(np.sqrt(means.shape[1])))
        dat.write_pgm_grid(os.path.join(out_dir, "samples.pgm"),
                           means.reshape(-1, side, side))
        return os.path.join(out_dir, "samples.pgm")
    dat.write_points_csv(os.path.join(out_dir, "samples.csv"), means)
    return os.path.join(out_dir, "samples.csv")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args):
    cfg = RunConfig.from_file(args.config)
    x, labels = dataset_from_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "data.csv")
    dat.write_points_csv(path, x, labels)
    print(f"gen-data: wrote {x.shape[0]} points to {path}")


def cmd_train_generator(args):
    cfg = RunConfig.from_file(args.config)
    os.makedirs(args.out, exist_ok=True)
    elbo = run_train_generator(cfg, args.out)
    print(f"train-generator: final ELBO {elbo:.4f} -> {args.out}/gen.ckpt")


def cmd_train_prior(args):
    cfg = RunConfig.from_file(args.config)
    os.makedirs(args.out, exist_ok=True)
    last = run_train_prior(cfg, args.ckpt, args.out)
    print(f"train-prior: iter {last['iteration']} "
          f"gap {last['E_pos'] - last['E_neg']:.4f} -> {args.out}/ebm.ckpt")


def cmd_train_coupled(args):
    cfg = RunConfig.from_file(args.config)
    os.makedirs(args.out, exist_ok=True)
    last = run_train_coupled(cfg, args.ckpt, args.out,
                             top_layers=args.top_layers)
    print(f"train-coupled: final acc {last['acc']:.3f} "
          f"-> {args.out}/coupled.ckpt")


def cmd_sample(args):
    bundle = load_checkpoint(args.ckpt)
    _require(bundle, "beta", "omega")
    cfg = RunConfig.from_dict(bundle.config)
    sched = schedule_of(cfg)
    rcfg = synthesis.ReverseRunConfig(n=args.n, temperature=args.temperature,
                                      record=args.record)
    os.makedirs(args.out, exist_ok=True)
    stream = RngStream(args.seed if args.seed is not None else cfg.seed,
                       ("sample",))
    means, _, u0 = synthesis.synthesize(bundle.omega, bundle.beta, sched,
                                        langevin_of(cfg), rcfg, stream)
    path = _emit_samples(args.out, cfg, means)
    if args.record:
        _, trajs = synthesis.reverse_chain(bundle.omega, bundle.beta, sched,
                                           langevin_of(cfg), rcfg, stream)
        dat.write_metrics_csv(os.path.join(args.out, "trajectories.csv"),
                              synthesis.trajectory_rows(trajs))
    print(f"sample: wrote {args.n} samples to {path}")


def cmd_hsample(args):
    bundle = load_checkpoint(args.ckpt)
    _require(bundle, "beta", "omega")
    cfg = RunConfig.from_dict(bundle.config)
    sched = schedule_of(cfg)
    layers = frozenset(int(v) for v in args.layers.split(","))
    stream = RngStream(cfg.seed, ("hsample",))
    rcfg = synthesis.ReverseRunConfig(n=args.n)
    u_ref, _ = synthesis.reverse_chain(bundle.omega, bundle.beta, sched,
                                       langevin_of(cfg), rcfg,
                                       stream.child("ref"))
    u0, _ = synthesis.hierarchical_resample(
        bundle.omega, bundle.beta, sched, langevin_of(cfg), u_ref, layers,
        stream.child("resample"))
    z = uspace.to_latent(bundle.beta, u0)
    out = generator.decode(bundle.beta, z)
    means = out[0] if bundle.beta.obs_model == "gaussian" else out
    os.makedirs(args.out, exist_ok=True)
    path = _emit_samples(args.out, cfg, means)
    print(f"hsample: resampled layers {sorted(layers)} -> {path}")


def cmd_control(args):
    bundle = load_checkpoint(args.ckpt)
    _require(bundle, "beta", "omega", "wc")
    cfg = RunConfig.from_dict(bundle.config)
    sched = schedule_of(cfg)
    y = [int(v) for v in args.label.split(",")]
    u0 = tasks.controllable_sample(
        bundle.wc, bundle.omega, bundle.beta, y, sched, langevin_of(cfg),
        RngStream(cfg.seed, ("control",)), args.n)
    z = uspace.to_latent(bundle.beta, u0)
    out = generator.decode(bundle.beta, z)
    means = out[0] if bundle.beta.obs_model == "gaussian" else out
    os.makedirs(args.out, exist_ok=True)
    path = _emit_samples(args.out, cfg, means)
    print(f"control: label {y} -> {path}")


def cmd_ood(args):
    bundle = load_checkpoint(args.ckpt)
    _require(bundle, "beta", "phi", "omega")
    id_cfg = RunConfig.from_dict(bundle.config)
    ood_cfg = RunConfig.from_file(args.config)
    sched = schedule_of(id_cfg)
    lcfg = langevin_of(id_cfg)
    x_id, _ = dataset_from_config(id_cfg)
    x_ood, _ = dataset_from_config(ood_cfg)
    n = min(args.n, len(x_id), len(x_ood))
    x_id, x_ood = x_id[:n], x_ood[:n]
    stream = RngStream(id_cfg.seed, ("ood",))
    if args.scheme == "inference":
        s_id = tasks.ood_score_inference(bundle.omega, bundle.beta,
                                         bundle.phi, x_id, args.k)
        s_ood = tasks.ood_score_inference(bundle.omega, bundle.beta,
                                          bundle.phi, x_ood, args.k)
    else:
        s_id = tasks.ood_score_diffusion(bundle.omega, bundle.beta,
                                         bundle.phi, x_id, args.k, sched,
                                         lcfg, stream.child("id"))
        s_ood = tasks.ood_score_diffusion(bundle.omega, bundle.beta,
                                          bundle.phi, x_ood, args.k, sched,
                                          lcfg, stream.child("ood"))
    score = tasks.auroc(s_id, s_ood)
    os.makedirs(args.out, exist_ok=True)
    rows = ([{"set": "id", "score": float(v)} for v in s_id]
            + [{"set": "ood", "score": float(v)} for v in s_ood])
    dat.write_metrics_csv(os.path.join(args.out, "ood_scores.csv"), rows)
    print(f"ood: scheme={args.scheme} k={args.k} AUROC {score:.4f}")


def cmd_ablate(args):
    cfg = RunConfig.from_file(args.config)
    if args.param not in ("K", "T"):
        raise UsageError(f"ablate supports K or T, not {args.param!r}")
    values = [int(v) for v in args.values.split(",")]
    os.makedirs(args.out, exist_ok=True)
    run_train_generator(cfg, args.out)
    gen_ckpt = os.path.join(args.out, "gen.ckpt")
    held_cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + 1})
    x_held, _ = dataset_from_config(held_cfg)
    rows = []
    for v in values:
        vcfg = RunConfig.from_dict({**cfg.to_dict(), args.param: v})
        vdir = os.path.join(args.out, f"{args.param}{v}")
        os.makedirs(vdir, exist_ok=True)
        run_train_prior(vcfg, gen_ckpt, vdir)
        vb = load_checkpoint(os.path.join(vdir, "ebm.ckpt"))
        rcfg = synthesis.ReverseRunConfig(n=args.n)
        means, _, _ = synthesis.synthesize(
            vb.omega, vb.beta, schedule_of(vcfg), langevin_of(vcfg), rcfg,
            RngStream(vcfg.seed, ("ablate-sample",)))
        rows.append({"param": args.param, "value": v,
                     "mmd2": metrics.mmd(means, x_held[:args.n])})
    dat.write_metrics_csv(os.path.join(args.out, "ablation.csv"), rows)
    summary = ", ".join(f"{r['param']}={r['value']}: {r['mmd2']:.5f}"
                        for r in rows)
    print(f"ablate: {summary}")


def cmd_inspect(args):
    info = inspect_checkpoint(args.ckpt)
    dims = info.get("dims")
    sched = info["schedule"] or {}
    print(f"inspect: version {info['version']}, models "
          f"{'/'.join(info['models'])}, layer dims {dims}, "
          f"T {sched.get('T')}, tensors {info['tensor_count']}")


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    p = argparse.ArgumentParser(prog="hebm",
                                description="Hierarchical EBM diffusion prior")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data)
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-generator", cmd_train_generator)
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-prior", cmd_train_prior)
    sp.add_argument("--config", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-coupled", cmd_train_coupled)
    sp.add_argument("--config", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--top-layers", type=int, default=1)

    sp = add("sample", cmd_sample)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--record", action="store_true")

    sp = add("hsample", cmd_hsample)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--layers", required=True,
                    help="comma-separated layer indices to resample")
    sp.add_argument("--n", type=int, default=256)

    sp = add("control", cmd_control)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--label", required=True,
                    help="category index (one per block, comma-separated)")
    sp.add_argument("--n", type=int, default=256)

    sp = add("ood", cmd_ood)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--config", required=True,
                    help="config describing the OOD dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int, default=0)
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--scheme", choices=("diffusion", "inference"),
                    default="diffusion")

    sp = add("ablate", cmd_ablate)
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--param", required=True)
    sp.add_argument("--values", required=True)
    sp.add_argument("--n", type=int, default=1000)

    sp = add("inspect", cmd_inspect)
    sp.add_argument("ckpt")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        thread_cap()
        args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
