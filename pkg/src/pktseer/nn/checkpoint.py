"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PKTSEER1"
    u64 len, <len bytes of UTF-8 JSON config document>
    repeated until EOF:
        u64 len, <len bytes of UTF-8 parameter name>
        u64 rank, rank x u64 dims
        prod(dims) x float32 data
"""

import io
import json
import struct

import numpy as np

from .layers import ModelConfig, ModelParams
from .tensor import Tensor

MAGIC = b"PKTSEER1"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def dumps(params: ModelParams, meta: dict | None = None) -> bytes:
    doc = {"model": params.config.to_dict(), "meta": meta or {}}
    cfg = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_U64.pack(len(cfg)))
    out.write(cfg)
    for name, t in params.tensors.items():
        raw = name.encode()
        out.write(_U64.pack(len(raw)))
        out.write(raw)
        out.write(_U64.pack(t.data.ndim))
        for n in t.data.shape:
            out.write(_U64.pack(n))
        out.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return out.getvalue()


def loads(blob: bytes) -> tuple[ModelParams, dict]:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a PKTSEER1 checkpoint")
    pos = 8

    def u64():
        nonlocal pos
        if pos + 8 > len(view):
            raise CheckpointError("truncated checkpoint")
        (v,) = _U64.unpack_from(view, pos)
        pos += 8
        return v

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        b = bytes(view[pos : pos + n])
        pos += n
        return b

    doc = json.loads(take(u64()).decode())
    params = ModelParams(ModelConfig.from_dict(doc["model"]))
    while pos < len(view):
        name = take(u64()).decode()
        rank = u64()
        dims = tuple(u64() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        params.tensors[name] = Tensor(data, requires_grad=True)
    return params, doc.get("meta", {})


def save(path, params: ModelParams, meta: dict | None = None) -> bytes:
    blob = dumps(params, meta)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
