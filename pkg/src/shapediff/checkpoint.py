"""Binary checkpoints: magic, JSON header with a tensor manifest, raw payload.

Layout::

    b"SHAPEDIFF1" | uint64 header length (LE) | header JSON | payload

Each manifest entry gives name, shape, dtype code and byte offset into the
payload. All numbers are little-endian. Float32 tensors are stored as
``f4``; float64 tensors keep ``f8`` so double-precision runs resume exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

MAGIC = b"SHAPEDIFF1"

_CODES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
}
_TORCH = {v: k for k, v in _CODES.items()}


def save_checkpoint(path, tensors: dict, metadata: dict | None = None) -> None:
    manifest, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = torch.as_tensor(t).detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_CODES[t.dtype], copy=False).tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "dtype": _CODES[t.dtype], "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": manifest, "metadata": metadata or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos : pos + n])
    payload = memoryview(blob)[pos + n :]
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True)).reshape(
            entry["shape"]
        )
    return tensors, header["metadata"]


def _flatten_optimizer(state: dict) -> tuple[dict, dict]:
    tensors, meta = {}, {"param_groups": state["param_groups"], "state": {}}
    for idx, slots in state["state"].items():
        keys = []
        for key, val in slots.items():
            tensors[f"optim.{idx}.{key}"] = val
            keys.append(key)
        meta["state"][str(idx)] = keys
    return tensors, meta


def _unflatten_optimizer(tensors: dict, meta: dict) -> dict:
    state = {
        int(idx): {key: tensors[f"optim.{idx}.{key}"] for key in keys} for idx, keys in meta["state"].items()
    }
    return {"state": state, "param_groups": meta["param_groups"]}


def save_model(path, model: torch.nn.Module, kind: str, config: dict, extra: dict | None = None, training=None):
    """Model weights plus config; ``training`` is a trainer state dict for resuming."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = {"kind": kind, "config": config, **(extra or {})}
    if training is not None:
        opt_tensors, opt_meta = _flatten_optimizer(training["optimizer"])
        tensors.update(opt_tensors)
        tensors["rng_state"] = training["rng_state"]
        meta["training"] = {
            "step": training["step"],
            "optimizer": opt_meta,
            "lr_scheduler": training["lr_scheduler"],
            "history": training["history"],
        }
    save_checkpoint(path, tensors, meta)


def load_model_state(path) -> tuple[dict, dict, dict | None]:
    """Return ``(model_state, metadata, training_state_or_None)``."""
    tensors, meta = load_checkpoint(path)
    model_state = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    training = None
    if "training" in meta:
        tr = meta["training"]
        training = {
            "step": tr["step"],
            "optimizer": _unflatten_optimizer(tensors, tr["optimizer"]),
            "lr_scheduler": tr["lr_scheduler"],
            "rng_state": tensors["rng_state"],
            "history": tr["history"],
        }
    return model_state, meta, training
