"""Binary checkpoint format.

Layout: magic "HEBM1" | uint32 version | uint64 manifest length |
manifest JSON | weight blob.  The manifest lists every tensor (name,
shape, byte offset) in write order plus the model architecture, schedule
parameters, and the run seed; the blob is the concatenation of all
tensors as little-endian float32.  Saving rounds weights through float32,
so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .ebm import EnergyParams
from .generator import FeedForwardNet, GeneratorParams, InferenceParams
from .tasks import CoupledEnergyParams, SymbolBlock, SymbolSpec

MAGIC = b"HEBM1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelBundle:
    beta: GeneratorParams = None
    phi: InferenceParams = None
    omega: EnergyParams = None
    wc: CoupledEnergyParams = None
    schedule: dict = None  # {"T": int, "alpha_bar_T": float}
    config: dict = field(default_factory=dict)
    seed: int = 0


def _net_info(net):
    return {"sizes": net.sizes(), "acts": list(net.activations)}


def _net_tensors(prefix, net):
    out = []
    for li, (w, b) in enumerate(zip(net.weights, net.biases)):
        out.append((f"{prefix}.w{li}", w))
        out.append((f"{prefix}.b{li}", b))
    return out


def _empty_net(info):
    sizes = info["sizes"]
    ws = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(b) for b in sizes[1:]]
    return FeedForwardNet(ws, bs, list(info["acts"]))


def _collect(bundle: ModelBundle):
    """Architecture manifest plus the ordered named-tensor list."""
    arch = {}
    tensors = []
    b = bundle.beta
    if b is not None:
        arch["beta"] = {"dims": list(b.dims), "obs_model": b.obs_model,
                        "prior_nets": [_net_info(n) for n in b.prior_nets],
                        "decoder": _net_info(b.decoder)}
        for i, net in enumerate(b.prior_nets):
            tensors += _net_tensors(f"beta.prior{i}", net)
        tensors += _net_tensors("beta.decoder", b.decoder)
        tensors.append(("beta.obs_log_var", b.obs_log_var))
    p = bundle.phi
    if p is not None:
        arch["phi"] = {"dims": list(p.dims),
                       "feature": _net_info(p.feature_net),
                       "post_nets": [_net_info(n) for n in p.post_nets]}
        tensors += _net_tensors("phi.feature", p.feature_net)
        for i, net in enumerate(p.post_nets):
            tensors += _net_tensors(f"phi.post{i}", net)
    w = bundle.omega
    if w is not None:
        arch["omega"] = {"dims": list(w.dims), "T": w.T,
                         "nets": [_net_info(n) for n in w.nets]}
        for i, net in enumerate(w.nets):
            tensors += _net_tensors(f"omega.layer{i}", net)
    c = bundle.wc
    if c is not None:
        arch["wc"] = {"dims": list(c.dims), "T": c.T,
                      "blocks": [{"arity": blk.arity,
                                  "layers": sorted(blk.layers)}
                                 for blk in c.spec.blocks],
                      "nets": [_net_info(n) for n in c.nets]}
        for i, net in enumerate(c.nets):
            tensors += _net_tensors(f"wc.layer{i}", net)
    return arch, tensors


def save_checkpoint(bundle: ModelBundle, path):
    arch, tensors = _collect(bundle)
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        data = np.asarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)),
                        "offset": offset})
        offset += len(data)
        blobs.append(data)
    manifest = {"arch": arch, "tensors": entries,
                "schedule": bundle.schedule, "config": bundle.config,
                "seed": bundle.seed}
    mjson = json.dumps(manifest, sort_keys=True,
                       separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(mjson)))
        fh.write(mjson)
        fh.write(b"".join(blobs))


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 12)
        if len(head) < len(MAGIC) + 12 or head[:len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a HEBM checkpoint")
        version, = struct.unpack("<I", head[len(MAGIC):len(MAGIC) + 4])
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported version {version} (want {VERSION})")
        mlen, = struct.unpack("<Q", head[len(MAGIC) + 4:])
        mjson = fh.read(mlen)
        if len(mjson) != mlen:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            return json.loads(mjson)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc


def load_checkpoint(path) -> ModelBundle:
    manifest = read_manifest(path)
    with open(path, "rb") as fh:
        fh.seek(len(MAGIC) + 4)
        mlen, = struct.unpack("<Q", fh.read(8))
        blob_start = len(MAGIC) + 12 + mlen
        fh.seek(blob_start)
        blob = fh.read()

    expected = sum(4 * int(np.prod(e["shape"], dtype=int) if e["shape"] else 1)
                   for e in manifest["tensors"])
    if len(blob) != expected:
        raise CheckpointError(
            f"{path}: weight blob is {len(blob)} bytes, expected {expected}")

    arch = manifest["arch"]
    bundle = ModelBundle(schedule=manifest["schedule"],
                         config=manifest.get("config", {}),
                         seed=manifest.get("seed", 0))
    if "beta" in arch:
        a = arch["beta"]
        bundle.beta = GeneratorParams(
            tuple(a["dims"]), [_empty_net(i) for i in a["prior_nets"]],
            _empty_net(a["decoder"]), a["obs_model"], np.zeros(1))
    if "phi" in arch:
        a = arch["phi"]
        bundle.phi = InferenceParams(
            tuple(a["dims"]), _empty_net(a["feature"]),
            [_empty_net(i) for i in a["post_nets"]])
    if "omega" in arch:
        a = arch["omega"]
        bundle.omega = EnergyParams(tuple(a["dims"]), a["T"],
                                    [_empty_net(i) for i in a["nets"]])
    if "wc" in arch:
        a = arch["wc"]
        spec = SymbolSpec([SymbolBlock(b["arity"], frozenset(b["layers"]))
                           for b in a["blocks"]])
        bundle.wc = CoupledEnergyParams(tuple(a["dims"]), a["T"], spec,
                                        [_empty_net(i) for i in a["nets"]])

    _, tensors = _collect(bundle)
    if len(tensors) != len(manifest["tensors"]):
        raise CheckpointError(f"{path}: tensor count mismatch")
    for (name, arr), entry in zip(tensors, manifest["tensors"]):
        if name != entry["name"] or list(np.shape(arr)) != entry["shape"]:
            raise CheckpointError(
                f"{path}: tensor {entry['name']} does not match architecture")
        numel = int(np.prod(entry["shape"], dtype=int)) if entry["shape"] else 1
        off = entry["offset"]
        vals = np.frombuffer(blob, dtype="<f4", count=numel, offset=off)
        arr[...] = vals.reshape(entry["shape"]).astype(np.float64)
    return bundle


def inspect_checkpoint(path) -> dict:
    m = read_manifest(path)
    info = {"version": VERSION, "models": sorted(m["arch"].keys()),
            "schedule": m["schedule"], "seed": m.get("seed"),
            "tensor_count": len(m["tensors"])}
    for key in ("beta", "omega", "wc"):
        if key in m["arch"]:
            info["dims"] = m["arch"][key]["dims"]
            break
    return info
