"""Comparison arms: serial adapters, LoRA on attention maps, linear probe.

Adapters and LoRA change the frozen model's computation path, so they need
the raw input and a differentiable pass through the stub.  The linear probe
only reads the last encoder layer and can use cached features.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensorcore as tc
from .foundation import FoundationStub, LayerFeatureStack
from .hingenet import ActivationPair, Head, _ParamBuilder
from .tensorcore import InvalidArgumentError, Parameter, Tensor

BASELINE_KINDS = ("adapter", "lora", "linear_probe")


@dataclass(frozen=True)
class BaselineConfig:
    kind: str = "linear_probe"
    bottleneck: int = 16
    rank: int = 4
    lora_alpha: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise InvalidArgumentError(f"kind must be one of {BASELINE_KINDS}, got {self.kind!r}")
        if self.bottleneck < 1:
            raise InvalidArgumentError("bottleneck must be positive")
        if self.rank < 1:
            raise InvalidArgumentError("rank must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class _StubBaseline:
    uses_frozen_features = False

    def __init__(self, stub: FoundationStub, config: BaselineConfig):
        self.stub = stub
        self.config = config
        self.hidden = stub.hidden
        self.n_layers = stub.n_layers

    def parameters(self) -> list[Parameter]:
        return list(self._params)


class AdapterModel(_StubBaseline):
    """Residual bottleneck after every encoder block.

    The up-projection starts at zero so the initial model reproduces the
    frozen stub exactly.
    """

    kind = "adapter"

    def __init__(self, stub: FoundationStub, config: BaselineConfig | None = None):
        config = config or BaselineConfig(kind="adapter")
        super().__init__(stub, config)
        h, bn = self.hidden, config.bottleneck
        builder = _ParamBuilder(config.seed)
        self.adapters = []
        for i in range(self.n_layers):
            down_w = builder.uniform(f"adapter{i}.down.weight", (bn, h), h)
            down_b = builder.uniform(f"adapter{i}.down.bias", (bn,), h)
            up_w = builder.add(f"adapter{i}.up.weight", np.zeros((h, bn)))
            up_b = builder.add(f"adapter{i}.up.bias", np.zeros(h))
            self.adapters.append((down_w, down_b, up_w, up_b))
        self.head = Head(builder, h)
        self._params = builder.params

    def _hook(self, i: int, hid: Tensor) -> Tensor:
        dw, db, uw, ub = self.adapters[i]
        return tc.add(hid, tc.linear(tc.relu(tc.linear(hid, dw, db)), uw, ub))

    def forward(self, stack: LayerFeatureStack | None, x) -> ActivationPair:
        feats = self.stub.forward_all(x, adapter=self._hook)
        return self.head(feats.layers[-1], feats.frame_rate)


class LoRAModel(_StubBaseline):
    """Low-rank updates ``(alpha / rank) * B @ A`` on the query and value maps."""

    kind = "lora"

    def __init__(self, stub: FoundationStub, config: BaselineConfig | None = None):
        config = config or BaselineConfig(kind="lora")
        super().__init__(stub, config)
        h, r = self.hidden, config.rank
        if r > h:
            raise InvalidArgumentError(f"LoRA rank {r} exceeds hidden size {h}")
        self.scaling = config.lora_alpha / r
        builder = _ParamBuilder(config.seed)
        self.deltas = {}
        for i in range(self.n_layers):
            for target in ("q", "v"):
                a = builder.uniform(f"lora{i}.{target}.A", (r, h), h)
                b = builder.add(f"lora{i}.{target}.B", np.zeros((h, r)))
                self.deltas[(i, target)] = (a, b)
        self.head = Head(builder, h)
        self._params = builder.params

    def _hook(self, i: int, target: str, x: Tensor, base: Tensor) -> Tensor:
        a, b = self.deltas[(i, target)]
        delta = tc.linear(tc.linear(x, a), b)
        return tc.add(base, tc.scale(delta, self.scaling))

    def forward(self, stack: LayerFeatureStack | None, x) -> ActivationPair:
        feats = self.stub.forward_all(x, lora=self._hook)
        return self.head(feats.layers[-1], feats.frame_rate)


class LinearProbeModel(_StubBaseline):
    """Beat/downbeat head on the last frozen encoder layer only."""

    kind = "linear_probe"
    uses_frozen_features = True

    def __init__(self, stub: FoundationStub, config: BaselineConfig | None = None):
        config = config or BaselineConfig(kind="linear_probe")
        super().__init__(stub, config)
        builder = _ParamBuilder(config.seed)
        self.head = Head(builder, self.hidden)
        self._params = builder.params

    def forward(self, stack: LayerFeatureStack | None, x=None) -> ActivationPair:
        if stack is None:
            stack = self.stub.forward_all(x)
        return self.head(stack.layers[-1], stack.frame_rate)


def attach_adapter(stub: FoundationStub, config: BaselineConfig | None = None) -> AdapterModel:
    return AdapterModel(stub, config)


def attach_lora(stub: FoundationStub, config: BaselineConfig | None = None) -> LoRAModel:
    return LoRAModel(stub, config)


def linear_probe(stub: FoundationStub, config: BaselineConfig | None = None) -> LinearProbeModel:
    return LinearProbeModel(stub, config)
