"""Training checkpoints as a single self-describing binary archive.

Layout::

    b"MSVSRCKP"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON: iteration, config snapshots, RNG
                           state, optimizer hyper-parameters, tensor index
    payload                little-endian float32 arrays, concatenated
    sha256                 32-byte digest of everything before it
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ChecksumMismatch, NotFound, VersionError

MAGIC = b"MSVSRCKP"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    iteration: int
    model_state: "OrderedDict[str, torch.Tensor]"
    optimizer_state: dict
    train_config: dict
    model_config: dict
    rng_state: dict = field(default_factory=dict)


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def _split_optimizer(state: dict):
    tensors = OrderedDict()
    scalars = {}
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            if torch.is_tensor(value) and value.dim() > 0:
                tensors[f"optim/{idx}/{key}"] = value
            else:
                scalars[f"{idx}/{key}"] = float(value)
    groups = []
    for g in state["param_groups"]:
        groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()})
    return tensors, scalars, groups


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opt_tensors, opt_scalars, groups = _split_optimizer(ckpt.optimizer_state)
    tensors = OrderedDict((f"model/{k}", v) for k, v in ckpt.model_state.items())
    tensors.update(opt_tensors)

    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        raw = _tensor_bytes(t)
        index.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    rng = dict(ckpt.rng_state)
    if "torch" in rng and torch.is_tensor(rng["torch"]):
        rng["torch"] = base64.b64encode(rng["torch"].numpy().tobytes()).decode("ascii")
    header = {
        "iteration": ckpt.iteration,
        "train_config": ckpt.train_config,
        "model_config": ckpt.model_config,
        "rng_state": rng,
        "optimizer": {"param_groups": groups, "scalars": opt_scalars},
        "tensors": index,
        "dtype": "float32-le",
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(chunks)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no checkpoint at {path}")
    data = path.read_bytes()
    fixed = len(MAGIC) + 12
    if len(data) < fixed + _DIGEST or data[: len(MAGIC)] != MAGIC:
        raise ChecksumMismatch(f"{path} is not a complete checkpoint archive")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch(f"checksum mismatch in {path}")
    version, head_len = struct.unpack("<IQ", body[len(MAGIC) : fixed])
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    header = json.loads(body[fixed : fixed + head_len].decode("utf-8"))
    payload = memoryview(body)[fixed + head_len :]

    model_state: OrderedDict = OrderedDict()
    opt_state: dict = {}
    for item in header["tensors"]:
        raw = payload[item["offset"] : item["offset"] + item["nbytes"]]
        t = torch.from_numpy(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(item["shape"]))
        kind, _, rest = item["name"].partition("/")
        if kind == "model":
            model_state[rest] = t
        else:
            idx, _, key = rest.partition("/")
            opt_state.setdefault(int(idx), {})[key] = t
    for name, value in header["optimizer"]["scalars"].items():
        idx, _, key = name.partition("/")
        opt_state.setdefault(int(idx), {})[key] = torch.tensor(value, dtype=torch.float32)

    rng = dict(header["rng_state"])
    if isinstance(rng.get("torch"), str):
        rng["torch"] = torch.from_numpy(np.frombuffer(base64.b64decode(rng["torch"]), dtype=np.uint8).copy())
    return Checkpoint(
        iteration=header["iteration"],
        model_state=model_state,
        optimizer_state={"state": opt_state, "param_groups": header["optimizer"]["param_groups"]},
        train_config=header["train_config"],
        model_config=header["model_config"],
        rng_state=rng,
    )
