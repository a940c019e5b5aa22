"""Checkpoint container shared by every trained model.

Layout: ``b"SSCK"`` magic, little-endian uint32 header length, UTF-8 JSON header,
then a little-endian float32 blob. The header's ``tensors`` list is the named
index into the blob: name, shape, byte offset and byte count.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .datamodel import atomic_write_bytes

MAGIC = b"SSCK"


def save_checkpoint(path, kind: str, state: dict, header: dict) -> None:
    blobs, index, offset = [], [], 0
    for name in sorted(state):
        arr = state[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr, dtype="<f4")  # tobytes() is C-ordered; ascontiguousarray would make 0-d arrays 1-d
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header, kind=kind, tensors=index)
    text = json.dumps(head, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, MAGIC + struct.pack("<I", len(text)) + text + b"".join(blobs))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + n].decode("utf-8"))
    base = 8 + n
    tensors = {}
    for t in header["tensors"]:
        raw = data[base + t["offset"] : base + t["offset"] + t["nbytes"]]
        tensors[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).copy()
    return header, tensors


def save_module(path, kind: str, module: torch.nn.Module, header: dict) -> None:
    save_checkpoint(path, kind, module.state_dict(), header)


def load_state_into(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> torch.nn.Module:
    own = module.state_dict()
    missing = set(own) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks tensors {sorted(missing)}")
    module.load_state_dict({k: torch.from_numpy(tensors[k]).to(own[k].dtype) for k in own})
    return module
