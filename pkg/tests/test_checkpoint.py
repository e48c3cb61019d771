import numpy as np
import pytest

from hingebeat.baselines import BaselineConfig, attach_adapter, attach_lora, linear_probe
from hingebeat.checkpoint import dumps, load_model, loads, save_model
from hingebeat.foundation import FormatError, StubConfig, build_stub
from hingebeat.hingenet import HingeConfig, HingeModel
from hingebeat.tensorcore import Tensor

TOY = StubConfig(n_layers=2, hidden=12, input_channels=30, seed=4)


def _randomise(model, seed=0):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.tensor.data = rng.normal(size=p.data.shape)


def _models():
    stub = build_stub(TOY)
    return stub, [
        HingeModel(12, 2, HingeConfig(projection_factor=3, conv_axis="time", dilations=(2, 1))),
        attach_adapter(stub, BaselineConfig(kind="adapter", bottleneck=3)),
        attach_lora(stub, BaselineConfig(kind="lora", rank=2)),
        linear_probe(stub),
    ]


@pytest.mark.parametrize("index", range(4))
def test_round_trip_bit_exact(tmp_path, index):
    stub, models = _models()
    model = models[index]
    _randomise(model, index)
    save_model(model, tmp_path / "m.hgnm", stub)
    back, back_stub = load_model(tmp_path / "m.hgnm")
    assert back_stub.digest() == stub.digest()
    assert type(back) is type(model)
    for a, b in zip(model.parameters(), back.parameters()):
        assert a.name == b.name
        assert a.data.tobytes() == b.data.tobytes()
    assert dumps(back, back_stub) == (tmp_path / "m.hgnm").read_bytes()
    x = np.random.default_rng(9).normal(size=(1, 30, 7))
    fwd = lambda m, s: m.forward(s.forward_all(Tensor(x)) if m.uses_frozen_features else None, Tensor(x))
    assert fwd(model, stub).beat.data.tobytes() == fwd(back, back_stub).beat.data.tobytes()


def test_tampered_payload():
    stub, models = _models()
    raw = bytearray(dumps(models[0], stub))
    raw[len(raw) // 2] ^= 1
    with pytest.raises(FormatError, match="checksum"):
        loads(bytes(raw))


def test_truncated():
    stub, models = _models()
    with pytest.raises(FormatError):
        loads(dumps(models[0], stub)[:20])


def test_magic_checked_after_digest():
    import hashlib
    stub, models = _models()
    body = b"XXXX" + dumps(models[0], stub)[4:-32]
    with pytest.raises(FormatError, match="magic"):
        loads(body + hashlib.sha256(body).digest())
