"""The ``SMCG`` checkpoint container.

Layout (all integers little-endian)::

    4 bytes   magic  b"SMCG"
    u16       format version
    u16       length of kind tag, then the ASCII kind tag
              (SEGMENTER, GEN_G, GEN_F, DISC_X, DISC_Y, TRAIN_STATE, ...)
    u32       length of header, then a UTF-8 JSON header:
              {"arch": {...}, "meta": {...},
               "tensors": [{"name", "dtype", "shape"}, ...]}
    ...       raw C-order tensor bytes, one after another, in header order
    u32       CRC-32 of every preceding byte

Network parameters are stored in ``state_dict`` order, which is the order in
which the layers are registered by the network constructor.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, StorageError

MAGIC = b"SMCG"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}


@dataclass
class Container:
    kind: str
    arch: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors whose names start with ``prefix + '/'``, prefix stripped."""
        head = prefix + "/"
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}


def _dtype_name(t: torch.Tensor) -> str:
    name = str(t.dtype).replace("torch.", "")
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    return name


def encode(container: Container) -> bytes:
    entries = []
    blobs = []
    for name, tensor in container.tensors.items():
        t = tensor.detach().cpu().contiguous()
        entries.append({"name": name, "dtype": _dtype_name(t), "shape": list(t.shape)})
        arr = t.numpy()
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    header = json.dumps(
        {"arch": container.arch, "meta": container.meta, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    kind = container.kind.encode("ascii")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", FORMAT_VERSION, len(kind)))
    buf.write(kind)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for blob in blobs:
        buf.write(blob)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode(raw: bytes, expected_kind: str | None = None) -> Container:
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError("not an SMCG checkpoint (bad magic bytes)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is corrupt (CRC mismatch)")
    version, kind_len = struct.unpack_from("<HH", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    pos = 8
    kind = body[pos:pos + kind_len].decode("ascii")
    pos += kind_len
    (header_len,) = struct.unpack_from("<I", body, pos)
    pos += 4
    try:
        header = json.loads(body[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header unreadable: {exc}") from exc
    pos += header_len
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"expected a {expected_kind} checkpoint, found {kind}")
    tensors = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        np_dtype = np.dtype(entry["dtype"] if entry["dtype"] != "bool" else "?").newbyteorder("<")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * np_dtype.itemsize
        if pos + nbytes > len(body):
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(body, dtype=np_dtype, count=count, offset=pos).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(dtype)
        pos += nbytes
    if pos != len(body):
        raise CheckpointError("checkpoint has trailing bytes")
    return Container(kind, header.get("arch", {}), header.get("meta", {}), tensors)


def save(path, container: Container) -> None:
    path = Path(path)
    data = encode(container)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path, expected_kind: str | None = None) -> Container:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(raw, expected_kind)


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    head = f"{prefix}/" if prefix else ""
    return {head + k: v for k, v in module.state_dict().items()}


def load_module_tensors(module: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    expected = module.state_dict()
    if list(expected) != list(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"parameter layout mismatch (missing={missing[:3]}, extra={extra[:3]})")
    for name, value in tensors.items():
        if tuple(expected[name].shape) != tuple(value.shape):
            raise CheckpointError(f"shape mismatch for {name}: {tuple(value.shape)}")
    module.load_state_dict({k: v.to(expected[k].dtype) for k, v in tensors.items()})
