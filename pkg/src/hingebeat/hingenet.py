"""Harmonic-aware hinge network over frozen per-layer features.

For each encoder layer ``i`` the hinge projects the layer's features down by a
factor ``r``, mixes them with the previous core layer's output through a
sigmoid gate whose logit starts at zero, and refines the result with parallel
dilated convolutions whose dilations are the rounded distances between
adjacent harmonics on a log-frequency axis.  A linear + sigmoid head turns the
last core layer into beat and downbeat activations.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .foundation import DEFAULT_FRAME_RATE, LayerFeatureStack
from .tensorcore import InvalidArgumentError, Parameter, Tensor


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class HarmonicIntervalSpec:
    """Log-frequency resolution and harmonic-series length.

    The intervals do not depend on the fundamental frequency.
    """

    bins_per_octave: int = 12
    n_harmonics: int = 5


def harmonic_intervals(spec: HarmonicIntervalSpec | None = None, *,
                       bins_per_octave: int | None = None,
                       n_harmonics: int | None = None) -> list[int]:
    """Bin distances between adjacent harmonics ``k`` and ``k + 1``.

    ``round(Q * log2((k + 1) / k))`` for ``k = 1 .. n_harmonics - 1``,
    rounding halves away from zero.

    >>> harmonic_intervals(bins_per_octave=12, n_harmonics=5)
    [12, 7, 5, 4]
    """
    spec = spec or HarmonicIntervalSpec()
    q = spec.bins_per_octave if bins_per_octave is None else bins_per_octave
    n = spec.n_harmonics if n_harmonics is None else n_harmonics
    if int(q) != q or q < 1:
        raise InvalidArgumentError(f"bins_per_octave must be a positive integer, got {q}")
    if int(n) != n or n < 2:
        raise InvalidArgumentError(f"n_harmonics must be an integer >= 2, got {n}")
    return [_round_half_away(q * math.log2((k + 1) / k)) for k in range(1, int(n))]


@dataclass(frozen=True)
class HingeConfig:
    projection_factor: int = 6
    n_branches: int | None = None
    kernel_size: int = 3
    conv_axis: str = "channel"
    bins_per_octave: int = 12
    n_harmonics: int = 5
    ham_enabled: bool = True
    dilations: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if int(self.projection_factor) < 1:
            raise InvalidArgumentError("projection_factor must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgumentError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.conv_axis not in ("channel", "time"):
            raise InvalidArgumentError(f"conv_axis must be 'channel' or 'time', got {self.conv_axis!r}")
        dil = self.branch_dilations()
        if self.n_branches is not None and self.n_branches != len(dil):
            raise InvalidArgumentError(
                f"n_branches={self.n_branches} but {len(dil)} dilations {dil} are configured"
            )
        if any(d < 1 for d in dil):
            raise InvalidArgumentError(f"dilations must be positive, got {dil}")

    def branch_dilations(self) -> list[int]:
        if self.dilations is not None:
            return [int(d) for d in self.dilations]
        return harmonic_intervals(bins_per_octave=self.bins_per_octave,
                                  n_harmonics=self.n_harmonics)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["dilations"] is not None:
            d["dilations"] = list(d["dilations"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HingeConfig":
        d = dict(d)
        if d.get("dilations") is not None:
            d["dilations"] = tuple(d["dilations"])
        return cls(**d)


@dataclass
class ActivationPair:
    """Per-frame beat and downbeat probabilities, each ``(b, 1, t)``."""

    beat: Tensor
    downbeat: Tensor
    frame_rate: float = DEFAULT_FRAME_RATE

    def numpy(self, item: int = 0) -> tuple[np.ndarray, np.ndarray]:
        return self.beat.data[item, 0].copy(), self.downbeat.data[item, 0].copy()


class _ParamBuilder:
    def __init__(self, seed: int, prefix: str = ""):
        self.rng = np.random.Generator(np.random.Philox(seed))
        self.params: list[Parameter] = []
        self.prefix = prefix

    def uniform(self, name: str, shape, fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def add(self, name: str, arr) -> Tensor:
        p = Parameter(Tensor(arr), trainable=True, name=self.prefix + name)
        self.params.append(p)
        return p.tensor


class Head:
    """Linear map to two channels (beat, downbeat) followed by a sigmoid."""

    def __init__(self, builder: _ParamBuilder, in_channels: int):
        self.weight = builder.uniform("head.weight", (2, in_channels), in_channels)
        self.bias = builder.uniform("head.bias", (2,), in_channels)

    def __call__(self, x: Tensor, frame_rate: float = DEFAULT_FRAME_RATE) -> ActivationPair:
        probs = tc.sigmoid(tc.linear(x, self.weight, self.bias))
        beat, downbeat = tc.split(probs, [1, 1], axis=1)
        return ActivationPair(beat, downbeat, frame_rate)


class HarmonicAwareModule:
    """Parallel dilated convolutions, concatenated and mapped back by an MLP.

    With ``enabled=False`` the module is a single per-frame linear map, the
    ablation arm without harmonic branches.
    """

    def __init__(self, builder: _ParamBuilder, layer: int, channels: int, config: HingeConfig):
        self.channels = channels
        self.enabled = config.ham_enabled
        self.axis = config.conv_axis
        self.dilations = config.branch_dilations()
        c, k = channels, config.kernel_size
        pre = f"layer{layer}.ham."
        if not self.enabled:
            self.w = builder.uniform(pre + "linear.weight", (c, c), c)
            self.b = builder.uniform(pre + "linear.bias", (c,), c)
            return
        axis_len = c if self.axis == "channel" else None
        if axis_len is not None and axis_len < 1:
            raise InvalidArgumentError("harmonic convolution over an empty channel axis")
        self.branches = []
        for j, d in enumerate(self.dilations):
            if self.axis == "channel":
                w = builder.uniform(f"{pre}branch{j}.weight", (k,), k)
                b = builder.uniform(f"{pre}branch{j}.bias", (1,), k)
            else:
                w = builder.uniform(f"{pre}branch{j}.weight", (c, c, k), c * k)
                b = builder.uniform(f"{pre}branch{j}.bias", (c,), c * k)
            self.branches.append((w, b, d))
        m = len(self.dilations) * c
        self.w1 = builder.uniform(pre + "mlp1.weight", (c, m), m)
        self.b1 = builder.uniform(pre + "mlp1.bias", (c,), m)
        self.w2 = builder.uniform(pre + "mlp2.weight", (c, c), c)
        self.b2 = builder.uniform(pre + "mlp2.bias", (c,), c)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return tc.linear(x, self.w, self.b)
        outs = [tc.conv1d(x, w, b, dilation=d, axis=self.axis) for w, b, d in self.branches]
        z = tc.concat(outs, axis=1)
        return tc.linear(tc.relu(tc.linear(z, self.w1, self.b1)), self.w2, self.b2)


class HingeModel:
    """Trainable hinge stack over ``n_layers`` frozen feature maps.

    Parameters
    ----------
    hidden : int
        Channel count ``h`` of the incoming encoder features.
    n_layers : int
        Number of encoder layers consumed, one core layer each.
    config : HingeConfig
    """

    kind = "hinge"
    uses_frozen_features = True

    def __init__(self, hidden: int, n_layers: int, config: HingeConfig | None = None):
        self.config = config or HingeConfig()
        cfg = self.config
        if hidden % cfg.projection_factor:
            raise InvalidArgumentError(
                f"hidden size {hidden} is not divisible by projection factor {cfg.projection_factor}"
            )
        if n_layers < 1:
            raise InvalidArgumentError("n_layers must be >= 1")
        self.hidden = hidden
        self.n_layers = n_layers
        self.channels = hidden // cfg.projection_factor
        builder = _ParamBuilder(cfg.seed)
        c = self.channels
        self.proj = []
        self.gates: list[Tensor | None] = [None]
        self.hams = []
        for i in range(n_layers):
            self.proj.append((
                builder.uniform(f"layer{i}.proj.weight", (c, hidden), hidden),
                builder.uniform(f"layer{i}.proj.bias", (c,), hidden),
            ))
            if i > 0:
                self.gates.append(builder.add(f"layer{i}.gate", np.zeros(1)))
            self.hams.append(HarmonicAwareModule(builder, i, c, cfg))
        self.head = Head(builder, c)
        self._params = builder.params

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def gate_values(self) -> list[float]:
        """Sigmoid of every gate logit (layers 2..N)."""
        return [float(tc.sigmoid(g).data[0]) for g in self.gates[1:]]

    def project(self, i: int, features: Tensor) -> Tensor:
        w, b = self.proj[i]
        return tc.linear(features, w, b)

    def fuse(self, i: int, h_prev: Tensor | None, h_proj: Tensor) -> Tensor:
        """Gated mix of the previous core output and the projection.

        Layer 0 has no predecessor and returns the projection unchanged.
        """
        if i == 0:
            return h_proj
        if h_prev is None or h_prev.shape != h_proj.shape:
            raise InvalidArgumentError(
                f"fuse: previous output {None if h_prev is None else h_prev.shape} vs projection {h_proj.shape}"
            )
        mu = tc.sigmoid(self.gates[i])
        one_minus = tc.add(Tensor(np.ones(1)), tc.scale(mu, -1.0))
        return tc.add_scaled(h_prev, h_proj, mu, one_minus)

    def core_layer(self, i: int, features: Tensor, h_prev: Tensor | None) -> Tensor:
        return self.hams[i](self.fuse(i, h_prev, self.project(i, features)))

    def forward(self, stack: LayerFeatureStack, x=None) -> ActivationPair:
        if stack.n_layers != self.n_layers:
            raise InvalidArgumentError(
                f"model has {self.n_layers} core layers but the stack has {stack.n_layers}"
            )
        if stack.shape[1] != self.hidden:
            raise InvalidArgumentError(
                f"model expects {self.hidden} feature channels, stack has {stack.shape[1]}"
            )
        h = None
        for i, feats in enumerate(stack.layers):
            h = self.core_layer(i, feats, h)
        return self.head(h, stack.frame_rate)


def hinge_forward(model: HingeModel, stack: LayerFeatureStack) -> ActivationPair:
    return model.forward(stack)


@dataclass
class ParameterCount:
    trainable: int
    frozen: int
    fraction: float = field(init=False)

    def __post_init__(self):
        total = self.trainable + self.frozen
        self.fraction = self.trainable / total if total else 0.0


def count_parameters(*models) -> ParameterCount:
    """Count trainable and frozen scalars across one or more models.

    Parameters shared between models are counted once.
    """
    seen: set[int] = set()
    trainable = frozen = 0
    for model in models:
        for p in model.parameters():
            if id(p) in seen:
                continue
            seen.add(id(p))
            if p.trainable:
                trainable += p.size
            else:
                frozen += p.size
    return ParameterCount(trainable, frozen)

