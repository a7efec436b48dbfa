"""Checkpoint files.

Layout::

    VTPNET-CKPT\\n
    <header length in bytes>\\n
    <JSON header: version, config text, metadata, tensor manifest>
    <payload: contiguous little-endian float32 values>

Manifest entries are ``{"name", "shape", "offset", "nbytes"}`` with offsets
relative to the payload start. Model tensors are stored under ``model.``,
optimizer moments under ``optim.``. Float32 models round-trip bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atomic import atomic_write_bytes

MAGIC = b"VTPNET-CKPT\n"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_text: str = ""
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


def checkpoint_bytes(tensors: dict[str, np.ndarray], config_text: str = "", meta: dict | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"version": VERSION, "config": config_text, "meta": meta or {},
                         "payload_bytes": offset, "tensors": manifest}, indent=1).encode("utf-8")
    return MAGIC + f"{len(header)}\n".encode("ascii") + header + b"".join(chunks)


def save_checkpoint(path, model=None, optimizer=None, config_text: str = "", meta: dict | None = None) -> None:
    """Atomically write model parameters/buffers and optimizer moments."""
    tensors: dict[str, np.ndarray] = {}
    if model is not None:
        tensors.update({f"model.{k}": v for k, v in model.state_dict().items()})
    meta = dict(meta or {})
    if optimizer is not None:
        tensors.update({f"optim.{k}": v for k, v in optimizer.state_arrays().items()})
        meta.update(optimizer_kind=optimizer.kind, optimizer_step=optimizer.step_count,
                    optimizer_lr=optimizer.lr)
    atomic_write_bytes(path, checkpoint_bytes(tensors, config_text, meta))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    rest = blob[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl <= 0 or not rest[:nl].isdigit():
        raise CheckpointFormatError("malformed header length line")
    hlen = int(rest[:nl])
    raw_header = rest[nl + 1:nl + 1 + hlen]
    if len(raw_header) != hlen:
        raise CheckpointFormatError("truncated header")
    try:
        header = json.loads(raw_header)
    except ValueError as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {header.get('version')!r}")
    payload = rest[nl + 1 + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointFormatError(f"payload has {len(payload)} bytes, header says {header.get('payload_bytes')}")
    tensors, spans = {}, []
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        off, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or off < 0 or off + nbytes > len(payload):
            raise CheckpointFormatError(f"manifest entry {entry['name']!r} is inconsistent")
        spans.append((off, off + nbytes, entry["name"]))
        tensors[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off) \
            .astype(np.float32).reshape(shape)
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CheckpointFormatError(f"manifest entries {a!r} and {b!r} overlap")
    return Checkpoint(tensors, header.get("config", ""), header.get("meta", {}))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def restore(ckpt: Checkpoint, model=None, optimizer=None) -> None:
    """Copy checkpoint tensors into ``model`` (and ``optimizer``) in place."""
    if model is not None:
        model.load_state_dict(ckpt.section("model"))
    if optimizer is not None:
        state = ckpt.section("optim")
        own = optimizer.state_arrays()
        if set(state) != set(own):
            raise ValueError("checkpoint optimizer state does not match the optimizer")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != optimizer shape {arr.shape}")
        optimizer.load_state_arrays(state)
        optimizer.step_count = int(ckpt.meta.get("optimizer_step", 0))
        optimizer.lr = float(ckpt.meta.get("optimizer_lr", optimizer.lr))
