"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ADPOCKPT"                       magic
    u32 header_len, header_len bytes  canonical JSON header
    for each record:
        u16 name_len, name (utf-8)
        u8 ndim, ndim * u32 dims
        prod(dims) * f32 values, row-major

The header carries ``format_version``, ``arch_config``, ``seed``, ``step``,
free-form ``meta`` and an index of ``records`` (name + shape), so that a
truncated file can report exactly which record is missing.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"ADPOCKPT"
FORMAT_VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(
    tensors: dict[str, torch.Tensor],
    arch_config: dict | None = None,
    seed: int | None = None,
    step: int = 0,
    meta: dict | None = None,
) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "arch_config": arch_config,
        "seed": seed,
        "step": int(step),
        "meta": meta or {},
        "records": [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()],
    }
    hbytes = canonical_json(header)
    parts = [MAGIC, struct.pack("<I", len(hbytes)), hbytes]
    for name, t in tensors.items():
        nbytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nbytes)))
        parts.append(nbytes)
        parts.append(struct.pack("<B", t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        parts.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise CheckpointError("truncated checkpoint: header length missing")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + hlen:
        raise CheckpointError("truncated checkpoint: header incomplete")
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {version} is not supported (expected {FORMAT_VERSION}); "
            "migrate the file explicitly"
        )
    tensors: dict[str, torch.Tensor] = {}
    for rec in header["records"]:
        name, shape = rec["name"], rec["shape"]
        try:
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            stored = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = list(struct.unpack_from(f"<{ndim}I", data, pos))
            pos += 4 * ndim
        except struct.error:
            raise CheckpointError(f"truncated checkpoint: record {name!r} is missing") from None
        if stored != name or dims != shape:
            raise CheckpointError(f"record {name!r} does not match the header index")
        count = int(np.prod(dims)) if dims else 1
        end = pos + 4 * count
        if end > len(data):
            raise CheckpointError(f"truncated checkpoint: record {name!r} is missing")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        pos = end
    if pos != len(data):
        raise CheckpointError("trailing bytes after the last record")
    return header, tensors


def save_checkpoint(path, tensors, arch_config=None, seed=None, step=0, meta=None) -> str:
    """Atomically write a checkpoint; returns its sha256 hex digest."""
    data = encode_checkpoint(tensors, arch_config, seed, step, meta)
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    return decode_checkpoint(Path(path).read_bytes())


def save_model(path, model, step: int = 0, meta: dict | None = None) -> str:
    return save_checkpoint(
        path, dict(model.state_dict()), model.arch.to_dict(), model.seed, step, meta
    )


def load_model(path):
    """Rebuild a :class:`~adpo.toyvlm.ToyVLM` from a checkpoint file."""
    from .toyvlm import ArchConfig, ToyVLM

    header, tensors = load_checkpoint(path)
    model = ToyVLM(ArchConfig.from_dict(header["arch_config"]), seed=header["seed"])
    model.load_state_dict(tensors)
    return model.eval(), header


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    """sha256 over names and raw bytes of a tensor dict (order-independent)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
