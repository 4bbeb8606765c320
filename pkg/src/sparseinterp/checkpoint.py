"""Binary tensor container.

Layout::

    b"SPIC" | uint64 LE header length | JSON header | raw float32 LE buffers

The header holds free-form metadata plus, per tensor, its name, shape, byte
offset (relative to the start of the buffer section) and byte length.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"SPIC"


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, torch.Tensor], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    buffers = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(buffers)


def decode(blob: bytes) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    if 12 + hlen > len(blob):
        raise CheckpointError(f"truncated header: need {hlen} bytes")
    try:
        header = json.loads(blob[12 : 12 + hlen])
        entries = header["tensors"]
        meta = header["meta"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    data = memoryview(blob)[12 + hlen :]
    out = {}
    for e in entries:
        try:
            name, shape, off, nbytes = e["name"], e["shape"], e["offset"], e["nbytes"]
        except (KeyError, TypeError):
            raise CheckpointError(f"corrupt header entry {e!r}") from None
        count = int(np.prod(shape)) if shape else 1
        if nbytes != 4 * count:
            raise CheckpointError(f"entry {name!r}: {nbytes} bytes does not match shape {shape}")
        if off < 0 or off + nbytes > len(data):
            raise CheckpointError(f"entry {name!r}: truncated buffer")
        arr = np.frombuffer(data[off : off + nbytes], dtype="<f4").reshape(shape)
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out, meta


def save_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    return decode(Path(path).read_bytes())
