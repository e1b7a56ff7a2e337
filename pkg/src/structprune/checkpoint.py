"""Versioned binary checkpoint container.

Byte layout::

    0..3   magic b"SPCK"
    4      format version (uint8)
    5..8   header length N (uint32, little-endian)
    9..    N bytes of UTF-8 JSON header
    ...    raw little-endian float32 payloads, back to back

The header carries the model config, per-layer sizes, and a directory of
``{name, shape, offset, nbytes}`` entries (offsets relative to the start of
the payload). Masks and hard-concrete gates, when present, are stored as
extra tensors under ``mask.*`` and ``gates.*`` names.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError
from .gates import HardConcreteGates
from .transformer import GateMask, Model, TransformerConfig

MAGIC = b"SPCK"
VERSION = 1
_PREFIX = struct.Struct("<4sBI")


@dataclass
class Checkpoint:
    model: Model
    mask: GateMask | None = None
    gates_attn: HardConcreteGates | None = None
    gates_ff: HardConcreteGates | None = None


def _collect(model, mask, gates_attn, gates_ff):
    tensors = [(name, p.data) for name, p in model.named_parameters()]
    meta = {}
    if mask is not None:
        for family in ("attn", "ff"):
            vecs = getattr(mask, family)
            if vecs is not None:
                tensors.extend((f"mask.{family}.{l}", np.asarray(v)) for l, v in enumerate(vecs))
        meta["mask"] = {
            "families": [f for f in ("attn", "ff") if getattr(mask, f) is not None],
            "guard_events": [list(e) for e in mask.guard_events],
        }
    for family, gates in (("attn", gates_attn), ("ff", gates_ff)):
        if gates is None:
            continue
        tensors.extend((f"gates.{family}.{l}", la.data) for l, la in enumerate(gates.log_alpha))
        meta[f"gates_{family}"] = {
            "beta": gates.beta, "gamma_low": gates.gamma_low, "zeta": gates.zeta,
            "penalty": gates.penalty, "n_layers": len(gates.log_alpha),
        }  # fmt: skip
    return tensors, meta


def save_checkpoint(path, model, mask=None, gates_attn=None, gates_ff=None):
    tensors, meta = _collect(model, mask, gates_attn, gates_ff)
    directory, payloads, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "config": model.config.to_dict(),
        "heads_layer": model.heads_layer,
        "ff_layer": model.ff_layer,
        "tensors": directory,
        **meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for raw in payloads:
            fh.write(raw)
    return offset


def payload_bytes(model):
    """Size in bytes of the model's tensor payload (no header, no mask/gates)."""
    return 4 * sum(p.size for p in model.parameters())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise CheckpointError("file shorter than the fixed prefix", field="prefix")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", field="magic")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {VERSION})", field="version")
    start = _PREFIX.size
    if len(blob) < start + head_len:
        raise CheckpointError("truncated header", field="header")
    try:
        header = json.loads(blob[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}", field="header") from exc
    base = start + head_len
    arrays = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if entry["nbytes"] != expected:
            raise CheckpointError(f"{name}: directory nbytes {entry['nbytes']} != shape {shape}", field=name)
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{name}: payload truncated", field=name)
        arrays[name] = np.frombuffer(blob[lo:hi], dtype="<f4").astype(np.float32).reshape(shape)

    config = TransformerConfig.from_dict(header["config"])
    params = {
        name: Tensor(arr, requires_grad=True)
        for name, arr in arrays.items()
        if not name.startswith(("mask.", "gates."))
    }
    model = Model(config, params)
    try:
        model.check_consistency()
    except Exception as exc:
        raise CheckpointError(f"tensor directory inconsistent with config: {exc}", field="tensors") from exc
    if model.heads_layer != header["heads_layer"] or model.ff_layer != header["ff_layer"]:
        raise CheckpointError("per-layer sizes disagree with weight shapes", field="heads_layer")

    mask = None
    if "mask" in header:
        mask = GateMask(guard_events=[tuple(e) for e in header["mask"]["guard_events"]])
        for family in header["mask"]["families"]:
            setattr(mask, family, [arrays[f"mask.{family}.{l}"].copy() for l in range(config.n_layers)])
    gates = {}
    for family in ("attn", "ff"):
        meta = header.get(f"gates_{family}")
        if meta is None:
            gates[family] = None
            continue
        gates[family] = HardConcreteGates(
            [arrays[f"gates.{family}.{l}"].copy() for l in range(meta["n_layers"])],
            beta=meta["beta"], gamma_low=meta["gamma_low"], zeta=meta["zeta"], penalty=meta["penalty"],
        )  # fmt: skip
    return Checkpoint(model, mask, gates["attn"], gates["ff"])
