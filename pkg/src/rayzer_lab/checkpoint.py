"""Self-describing binary checkpoint container.

Layout (all integers little-endian uint32)::

    b"RZCK" | version | header_len | header JSON (utf-8) | n_records | records...
    record = name_len | name (utf-8) | ndim | dims... | float32 LE data

The header carries ``format_version``, the model config and free-form
``meta`` (iteration, optimizer step counts). Optimizer moments are stored as
records under ``optim/<param name>/<state key>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ModelConfig
from .model import RayZer

MAGIC = b"RZCK"
FORMAT_VERSION = 1


class CheckpointError(OSError):
    pass


class CheckpointMismatch(ValueError):
    """Stored tensors or config do not fit the model they are loaded into."""


def _pack_records(records: dict) -> bytes:
    out = [struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def write_container(path, header: dict, records: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = json.dumps(header, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + _pack_records(records)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if buf[:4] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, head_len = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(buf[pos : pos + head_len].decode())
        pos += head_len
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        records = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + name_len].decode()
            pos += name_len
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            records[name] = arr.copy()
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return header, records


def save_checkpoint(path, model: RayZer, optimizer: Optional[torch.optim.Optimizer] = None,
                    iteration: int = 0, meta: Optional[dict] = None) -> None:
    records = {name: p.detach().cpu().float().numpy() for name, p in model.named_parameters()}
    info = dict(meta or {}, iteration=int(iteration))
    if optimizer is not None:
        steps = {}
        names = {id(p): name for name, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            name = names[id(p)]
            for key, value in state.items():
                if key == "step":
                    steps[name] = float(value)
                else:
                    records[f"optim/{name}/{key}"] = value.detach().cpu().float().numpy()
        info["optimizer_steps"] = steps
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.__dict__,
        "meta": info,
    }
    write_container(path, header, records)


def load_checkpoint(path, expected: Optional[ModelConfig] = None):
    """Rebuild the model stored at ``path``; returns ``(model, header, records)``.

    ``expected`` is checked against the stored config and any difference is
    reported as ``CheckpointMismatch``.
    """
    header, records = read_container(path)
    cfg = ModelConfig(**header["model_config"])
    if expected is not None and expected != cfg:
        diffs = [
            f"{k}: config {getattr(expected, k)!r} vs checkpoint {getattr(cfg, k)!r}"
            for k in cfg.__dict__
            if getattr(expected, k) != getattr(cfg, k)
        ]
        raise CheckpointMismatch("checkpoint does not match config: " + "; ".join(diffs))
    model = RayZer(cfg)
    load_parameters(model, records)
    return model, header, records


def load_parameters(model: RayZer, records: dict) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(records))
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    with torch.no_grad():
        for name, p in params.items():
            arr = records[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointMismatch(
                    f"parameter {name}: model shape {tuple(p.shape)} vs checkpoint shape {tuple(arr.shape)}"
                )
            p.copy_(torch.from_numpy(arr))


def restore_optimizer(model: RayZer, optimizer: torch.optim.Optimizer, header: dict, records: dict) -> None:
    steps = header["meta"].get("optimizer_steps", {})
    for name, p in model.named_parameters():
        if name not in steps:
            continue
        state = {"step": torch.tensor(steps[name])}
        prefix = f"optim/{name}/"
        for key, arr in records.items():
            if key.startswith(prefix):
                state[key[len(prefix):]] = torch.from_numpy(arr.copy())
        optimizer.state[p] = state
