"""Self-describing, integrity-checked checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"RLVRCKPT"
    8       4     u32    format version (1)
    12      8     u64    header length H
    20      H     UTF-8 JSON header, keys sorted, no whitespace
    20+H    8*K   float64 little-endian tensor payload, row-major
    end-32  32    SHA-256 of every preceding byte

The header holds ``config``, ``vocab``, ``step``, ``rng`` (a numpy
bit-generator state or null), ``meta`` and ``tensors``: a list of
``{"name", "shape", "offset"}`` entries in payload order, ``offset``
counting float64 elements.  Loading and re-saving is a byte-for-byte identity.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "VERSION", "IntegrityError", "Checkpoint", "save_checkpoint", "load_checkpoint", "file_sha256"]

MAGIC = b"RLVRCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class IntegrityError(ValueError):
    """Checkpoint bytes are truncated, corrupted or of an unknown format."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    vocab: list[str] = field(default_factory=list)
    step: int = 0
    rng: dict | None = None
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _header_bytes(ckpt: Checkpoint) -> tuple[bytes, list[np.ndarray]]:
    index, arrays, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr, dtype="<f8")
        index.append({"name": name, "offset": offset, "shape": list(a.shape)})
        arrays.append(a)
        offset += a.size
    header = {
        "config": ckpt.config,
        "meta": ckpt.meta,
        "rng": ckpt.rng,
        "step": int(ckpt.step),
        "tensors": index,
        "vocab": list(ckpt.vocab),
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return text.encode("utf-8"), arrays


def to_bytes(ckpt: Checkpoint) -> bytes:
    header, arrays = _header_bytes(ckpt)
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(a.tobytes() for a in arrays)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write atomically; returns the hex digest stored in the trailer."""
    data = to_bytes(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return data[-_DIGEST:].hex()


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < _PREFIX.size + _DIGEST:
        raise IntegrityError(f"{source}: file too short to be a checkpoint")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise IntegrityError(f"{source}: bad magic {magic!r}")
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{source}: SHA-256 mismatch; refusing to load")
    if version != VERSION:
        raise IntegrityError(f"{source}: unsupported format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(body[start: start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{source}: unreadable header ({exc})") from None
    payload = np.frombuffer(body, dtype="<f8", offset=start + hlen)
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        off = entry["offset"]
        if off + n > payload.size:
            raise IntegrityError(f"{source}: tensor {entry['name']} overruns the payload")
        tensors[entry["name"]] = payload[off: off + n].reshape(tuple(entry["shape"])).astype(np.float64)
    return Checkpoint(tensors, header["config"], header["vocab"], header["step"], header["rng"], header["meta"])


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return from_bytes(path.read_bytes(), str(path))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
