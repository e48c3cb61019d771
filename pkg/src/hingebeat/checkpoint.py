"""HGNM model checkpoints.

Layout (little-endian)::

    "HGNM" | u32 version | u32 n | n bytes of JSON config
    | u32 n_params | per parameter: u16 name length, name, u32 ndim, u32 dims..., f64 values
    | SHA-256 of everything before it

The JSON config records the model kind, its own config and the stub config,
so a checkpoint is enough to rebuild the full inference path.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .baselines import BaselineConfig, attach_adapter, attach_lora, linear_probe
from .foundation import FormatError, FoundationStub, StubConfig, build_stub
from .hingenet import HingeConfig, HingeModel

MAGIC = b"HGNM"
VERSION = 1
_DIGEST = 32

_BASELINE_BUILDERS = {"adapter": attach_adapter, "lora": attach_lora, "linear_probe": linear_probe}


def model_kind(model) -> str:
    if isinstance(model, HingeModel):
        return "hinge"
    return model.config.kind


def _config_blob(model, stub: FoundationStub) -> dict:
    blob = {"kind": model_kind(model), "model": model.config.to_dict(), "stub": stub.config.to_dict()}
    if isinstance(model, HingeModel):
        blob["hidden"] = model.hidden
        blob["n_layers"] = model.n_layers
    return blob


def dumps(model, stub: FoundationStub | None = None) -> bytes:
    stub = stub if stub is not None else getattr(model, "stub", None)
    if stub is None:
        raise ValueError("a stub is needed to record the feature extractor")
    config = json.dumps(_config_blob(model, stub), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(config)), config]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode()
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_model(model, path, stub: FoundationStub | None = None) -> None:
    Path(path).write_bytes(dumps(model, stub))


class _Reader:
    def __init__(self, raw: bytes, end: int):
        self.raw = raw
        self.end = end
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated {what}", self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def build_model(config: dict, stub: FoundationStub | None = None):
    """Rebuild an untrained model (and its stub) from a checkpoint config."""
    stub = stub or build_stub(StubConfig(**config["stub"]))
    kind = config["kind"]
    if kind == "hinge":
        return HingeModel(config["hidden"], config["n_layers"], HingeConfig.from_dict(config["model"])), stub
    if kind in _BASELINE_BUILDERS:
        return _BASELINE_BUILDERS[kind](stub, BaselineConfig(**config["model"])), stub
    raise FormatError(f"unknown model kind {kind!r}", 0)


def loads(raw: bytes):
    """Parse checkpoint bytes into ``(model, stub)``."""
    if len(raw) < len(MAGIC) + 8 + _DIGEST:
        raise FormatError("truncated header", 0)
    end = len(raw) - _DIGEST
    if hashlib.sha256(raw[:end]).digest() != raw[end:]:
        raise FormatError("checksum mismatch", end)
    r = _Reader(raw, end)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    version, n = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    try:
        config = json.loads(r.take(n, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config: {exc}", 12) from None
    try:
        model, stub = build_model(config)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid config: {exc}", 12) from None
    params = {p.name: p for p in model.parameters()}
    (count,) = r.unpack("<I", "parameter count")
    if count != len(params):
        raise FormatError(f"expected {len(params)} parameters, found {count}", r.pos - 4)
    for _ in range(count):
        start = r.pos
        (length,) = r.unpack("<H", "parameter name")
        name = r.take(length, "parameter name").decode()
        (ndim,) = r.unpack("<I", "parameter shape")
        shape = r.unpack(f"<{ndim}I", "parameter shape")
        if name not in params:
            raise FormatError(f"unknown parameter {name!r}", start)
        if tuple(shape) != params[name].data.shape:
            raise FormatError(f"{name}: shape {tuple(shape)} != {params[name].data.shape}", start)
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size, f"values of {name}"), dtype="<f8").reshape(shape)
        params[name].tensor.data = arr.astype(np.float64)
    if r.pos != end:
        raise FormatError("trailing bytes", r.pos)
    return model, stub


def load_model(path):
    return loads(Path(path).read_bytes())
