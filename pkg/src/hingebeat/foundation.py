"""Frozen stand-in foundation model and the HGFT feature-file format.

The stub is a small pre-layernorm transformer: a time-axis convolutional stem
followed by ``n_layers`` encoder blocks.  Its weights are drawn once from a
seeded Philox generator and never trained.  Every encoder block's output is
exposed so that layer-wise adapters can consume it.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import InvalidArgumentError, Parameter, Tensor

DEFAULT_FRAME_RATE = 50.0

HGFT_MAGIC = b"HGFT"
HGFT_VERSION = 1
_HGFT_HEADER = struct.Struct("<4sIIIIId")
# refuse payloads above 4 GiB of f32 values
_HGFT_MAX_VALUES = 1 << 30


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class StubConfig:
    n_layers: int = 4
    hidden: int = 48
    input_channels: int = 60
    n_heads: int = 1
    mlp_hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "hidden", "input_channels", "n_heads"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"StubConfig.{name} must be positive")
        if self.hidden % self.n_heads:
            raise InvalidArgumentError("hidden size must be divisible by n_heads")
        if self.n_heads != 1:
            raise InvalidArgumentError("the stub implements single-head attention only")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidArgumentError("seed must fit in 64 unsigned bits")

    @property
    def mlp_size(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else 4 * self.hidden

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerFeatureStack:
    """Per-layer encoder outputs, each ``(b, h, t)``."""

    layers: list[Tensor]
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("a feature stack needs at least one layer")
        shape = self.layers[0].shape
        if len(shape) != 3:
            raise InvalidArgumentError(f"layer tensors must be (b, h, t), got {shape}")
        for layer in self.layers[1:]:
            if layer.shape != shape:
                raise InvalidArgumentError(f"layer shapes differ: {layer.shape} vs {shape}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.layers[0].shape

    def detach(self) -> "LayerFeatureStack":
        return LayerFeatureStack([Tensor(t.data) for t in self.layers], self.frame_rate)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FoundationStub:
    """Frozen convolutional stem plus pre-layernorm encoder blocks.

    Parameters
    ----------
    config : StubConfig
        Architecture and seed.  Identical configs give bit-identical weights.

    Notes
    -----
    The stub accepts optional per-block hooks so that insertion-style
    baselines can modify the computation path without touching the frozen
    weights: ``lora`` adds a low-rank term to the query/value maps and
    ``adapter`` post-processes each block output.
    """

    def __init__(self, config: StubConfig | None = None):
        self.config = config or StubConfig()
        cfg = self.config
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        h, c_in, m = cfg.hidden, cfg.input_channels, cfg.mlp_size
        self._params: list[Parameter] = []

        def frozen(name, arr):
            p = Parameter(Tensor(arr), trainable=False, name=name)
            self._params.append(p)
            return p.tensor

        self.stem_w = frozen("stem.weight", _uniform(rng, (h, c_in, 3), c_in * 3))
        self.stem_b = frozen("stem.bias", _uniform(rng, (h,), c_in * 3))
        self.blocks = []
        for i in range(cfg.n_layers):
            blk = {
                "ln1_g": frozen(f"block{i}.ln1.gain", np.ones(h)),
                "ln1_b": frozen(f"block{i}.ln1.shift", np.zeros(h)),
            }
            for name in ("q", "k", "v", "o"):
                blk[f"w{name}"] = frozen(f"block{i}.{name}.weight", _uniform(rng, (h, h), h))
                blk[f"b{name}"] = frozen(f"block{i}.{name}.bias", _uniform(rng, (h,), h))
            blk["ln2_g"] = frozen(f"block{i}.ln2.gain", np.ones(h))
            blk["ln2_b"] = frozen(f"block{i}.ln2.shift", np.zeros(h))
            blk["w1"] = frozen(f"block{i}.mlp1.weight", _uniform(rng, (m, h), h))
            blk["b1"] = frozen(f"block{i}.mlp1.bias", _uniform(rng, (m,), h))
            blk["w2"] = frozen(f"block{i}.mlp2.weight", _uniform(rng, (h, m), m))
            blk["b2"] = frozen(f"block{i}.mlp2.bias", _uniform(rng, (h,), m))
            self.blocks.append(blk)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def hidden(self) -> int:
        return self.config.hidden

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def digest(self) -> str:
        """SHA-256 over every parameter's name, shape and bytes."""
        sha = hashlib.sha256()
        for p in self._params:
            sha.update(p.name.encode())
            sha.update(np.asarray(p.data.shape, dtype="<i8").tobytes())
            sha.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return sha.hexdigest()

    def _attention(self, x: Tensor, blk: dict, i: int, lora) -> Tensor:
        q = tc.linear(x, blk["wq"], blk["bq"])
        v = tc.linear(x, blk["wv"], blk["bv"])
        if lora is not None:
            q = lora(i, "q", x, q)
            v = lora(i, "v", x, v)
        k = tc.linear(x, blk["wk"], blk["bk"])
        # scores[b, query, key]
        scores = tc.scale(tc.bmm(tc.transpose(q), k), 1.0 / np.sqrt(self.hidden))
        attn = tc.softmax(scores, axis=2)
        ctx = tc.bmm(v, tc.transpose(attn))
        return tc.linear(ctx, blk["wo"], blk["bo"])

    def forward_all(self, x, lora=None, adapter=None) -> LayerFeatureStack:
        """Run the stem and all encoder blocks.

        Parameters
        ----------
        x : Tensor or ndarray
            ``(b, input_channels, t)`` input features.
        lora, adapter : callable, optional
            Hooks used by the insertion baselines.

        Returns
        -------
        LayerFeatureStack
            Outputs of blocks ``1..n_layers``; the stem output is not exposed.
        """
        x = tc.as_tensor(x)
        if x.data.ndim != 3 or x.shape[1] != self.config.input_channels:
            raise InvalidArgumentError(
                f"stub expects (b, {self.config.input_channels}, t) input, got {x.shape}"
            )
        if not np.all(np.isfinite(x.data)):
            raise InvalidArgumentError("stub input contains non-finite values")
        hid = tc.conv1d(x, self.stem_w, self.stem_b, dilation=1, axis="time")
        layers = []
        for i, blk in enumerate(self.blocks):
            a = tc.layernorm(hid, blk["ln1_g"], blk["ln1_b"])
            hid = tc.add(hid, self._attention(a, blk, i, lora))
            z = tc.layernorm(hid, blk["ln2_g"], blk["ln2_b"])
            z = tc.linear(tc.relu(tc.linear(z, blk["w1"], blk["b1"])), blk["w2"], blk["b2"])
            hid = tc.add(hid, z)
            if adapter is not None:
                hid = adapter(i, hid)
            layers.append(hid)
        return LayerFeatureStack(layers)


def build_stub(config: StubConfig | None = None) -> FoundationStub:
    return FoundationStub(config)


# ---------------------------------------------------------------------------
# HGFT feature files


def save_features(stack: LayerFeatureStack, path) -> None:
    """Write a stack as little-endian HGFT (f32 payload)."""
    n = stack.n_layers
    b, c, t = stack.shape
    header = _HGFT_HEADER.pack(HGFT_MAGIC, HGFT_VERSION, n, b, c, t, float(stack.frame_rate))
    payload = np.stack([layer.data for layer in stack.layers]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="C"))


def load_features(path) -> LayerFeatureStack:
    """Read an HGFT file.  Payload values are widened to float64."""
    raw = Path(path).read_bytes()
    return parse_features(raw)


def parse_features(raw: bytes) -> LayerFeatureStack:
    if len(raw) < _HGFT_HEADER.size:
        raise FormatError("truncated header", len(raw))
    magic, version, n, b, c, t, fps = _HGFT_HEADER.unpack_from(raw, 0)
    if magic != HGFT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != HGFT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n == 0:
        raise FormatError("n_layers must be at least 1", 8)
    if min(b, c, t) == 0:
        raise FormatError("zero-sized dimension", 12)
    count = n * b * c * t
    if count > _HGFT_MAX_VALUES:
        raise FormatError(f"dimension overflow: {count} values", 8)
    if not np.isfinite(fps) or fps <= 0:
        raise FormatError(f"invalid frame rate {fps}", 24)
    expected = _HGFT_HEADER.size + 4 * count
    if len(raw) < expected:
        raise FormatError("truncated payload", len(raw))
    if len(raw) > expected:
        raise FormatError("trailing bytes after payload", expected)
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_HGFT_HEADER.size)
    data = data.reshape(n, b, c, t).astype(np.float64)
    return LayerFeatureStack([Tensor(layer) for layer in data], frame_rate=fps)
