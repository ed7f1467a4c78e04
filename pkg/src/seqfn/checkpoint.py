"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SEQFNCKP"                 magic
    u32 format_version
    u32 header length, header   JSON: arch, model spec, optimizer hyperparameters, metadata
    u32 CRC32 of header
    u32 record count
    per record:
        u16 name length, name (UTF-8)
        u8 ndim, u32 * ndim shape
        u64 payload length      == 4 * prod(shape)
        payload                 float32, little-endian, row-major
        u32 CRC32 of name + shape + payload

Optimizer moments, when present, are extra records named ``optim.m/<param>``
and ``optim.v/<param>``.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .cnn import CnnSpec
from .errors import CheckpointError
from .mamba import ModelParams, ModelSpec
from .optim import OptimState

MAGIC = b"SEQFNCKP"
FORMAT_VERSION = 1
_M, _V = "optim.m/", "optim.v/"


@dataclass
class Checkpoint:
    arch: str
    spec: ModelSpec | CnnSpec
    params: dict[str, np.ndarray]
    optim: OptimState | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: ModelParams, optim: OptimState | None = None, metadata: dict | None = None,
                    copy: bool = True) -> Checkpoint:
        arch = "cnn" if isinstance(params.spec, CnnSpec) else "mamba"
        arrays = {k: (v.data.copy() if copy else v.data) for k, v in params.items()}
        return cls(arch, params.spec, arrays, optim, dict(metadata or {}))

    def to_params(self) -> ModelParams:
        return ModelParams(self.spec, {k: tn.parameter(v) for k, v in self.params.items()})

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "arch": self.arch,
            "spec": self.spec.to_dict(),
            "optim": self.optim.hyperparameters() if self.optim is not None else None,
            "metadata": _json_safe(self.metadata),
        }


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.generic):
        return _json_safe(value.item())
    return value


def _record(name: str, array: np.ndarray) -> bytes:
    name_b = name.encode("utf-8")
    shape = tuple(int(s) for s in np.shape(array))
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    dims = struct.pack(f"<B{len(shape)}I", len(shape), *shape)
    crc = zlib.crc32(name_b + dims + payload)
    return struct.pack("<H", len(name_b)) + name_b + dims + struct.pack("<Q", len(payload)) + payload + struct.pack("<I", crc)


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    records = [(k, v) for k, v in ckpt.params.items()]
    if ckpt.optim is not None:
        for k in ckpt.params:
            if k in ckpt.optim.m:
                records.append((_M + k, ckpt.optim.m[k]))
                records.append((_V + k, ckpt.optim.v[k]))
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    out.write(header)
    out.write(struct.pack("<II", zlib.crc32(header), len(records)))
    for name, arr in records:
        out.write(_record(name, arr))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _spec_from(arch: str, data: dict):
    if arch == "mamba":
        return ModelSpec.from_dict(data)
    if arch == "cnn":
        return CnnSpec.from_dict(data)
    raise CheckpointError(f"unknown architecture {arch!r}")


def _parse_header(r: _Reader) -> dict:
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = r.unpack("<II", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    header = r.take(hlen, "header")
    (crc,) = r.unpack("<I", "header checksum")
    if zlib.crc32(header) != crc:
        raise CheckpointError("header checksum mismatch")
    return json.loads(header.decode("utf-8"))


def read_header(data: bytes) -> dict:
    """Decode only the JSON header (spec, arch, metadata) of a checkpoint."""
    return _parse_header(_Reader(data))


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    header = _parse_header(r)
    (count,) = r.unpack("<I", "record count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "record name length")
        name_b = r.take(nlen, "record name")
        (ndim,) = r.unpack("<B", "record rank")
        shape = r.unpack(f"<{ndim}I", "record shape") if ndim else ()
        (plen,) = r.unpack("<Q", "payload length")
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if plen != expected:
            raise CheckpointError(f"record {name_b!r}: payload length {plen} != 4 * prod{tuple(shape)}")
        payload = r.take(plen, f"payload of {name_b!r}")
        (crc,) = r.unpack("<I", "record checksum")
        dims = struct.pack(f"<B{ndim}I", ndim, *shape)
        if zlib.crc32(name_b + dims + payload) != crc:
            raise CheckpointError(f"checksum mismatch in record {name_b.decode('utf-8', 'replace')!r}")
        arrays[name_b.decode("utf-8")] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} unexpected trailing bytes")

    params = {k: v for k, v in arrays.items() if not k.startswith((_M, _V))}
    optim = None
    if header.get("optim") is not None:
        optim = OptimState(**header["optim"])
        optim.m = {k[len(_M):]: v for k, v in arrays.items() if k.startswith(_M)}
        optim.v = {k[len(_V):]: v for k, v in arrays.items() if k.startswith(_V)}
    spec = _spec_from(header["arch"], header["spec"])
    return Checkpoint(header["arch"], spec, params, optim, header.get("metadata") or {})


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = to_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read())
