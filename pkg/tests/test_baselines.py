import numpy as np
import pytest

from hingebeat import tensorcore as tc
from hingebeat.baselines import BaselineConfig, attach_adapter, attach_lora, linear_probe
from hingebeat.foundation import StubConfig, build_stub
from hingebeat.hingenet import count_parameters
from hingebeat.tensorcore import InvalidArgumentError, Tensor

from helpers import assert_grad_close, numerical_grad

TOY = StubConfig(n_layers=2, hidden=8, input_channels=5, seed=2)


def _copy_head(src, dst):
    dst.head.weight.data = src.head.weight.data.copy()
    dst.head.bias.data = src.head.bias.data.copy()


@pytest.fixture
def x():
    return np.random.default_rng(0).normal(size=(1, 60, 30))


@pytest.mark.parametrize("attach", [attach_adapter, attach_lora])
def test_zero_init_matches_linear_probe(attach, x):
    stub = build_stub()
    probe = linear_probe(stub)
    model = attach(stub)
    _copy_head(probe, model)
    a = probe.forward(None, Tensor(x))
    b = model.forward(None, Tensor(x))
    assert a.beat.data.tobytes() == b.beat.data.tobytes()
    assert a.downbeat.data.tobytes() == b.downbeat.data.tobytes()


def test_adapter_count():
    stub = build_stub()
    h, n, bn = stub.hidden, stub.n_layers, 16
    model = attach_adapter(stub, BaselineConfig(kind="adapter", bottleneck=bn))
    assert count_parameters(model).trainable == n * (2 * h * bn + bn + h) + 2 * h + 2


def test_lora_count():
    stub = build_stub()
    h, n, r = stub.hidden, stub.n_layers, 4
    model = attach_lora(stub, BaselineConfig(kind="lora", rank=r))
    assert count_parameters(model).trainable == n * 2 * (2 * h * r) + 2 * h + 2


def test_probe_count():
    stub = build_stub()
    assert count_parameters(linear_probe(stub)).trainable == 2 * stub.hidden + 2


def test_lora_rank_too_large():
    with pytest.raises(InvalidArgumentError):
        attach_lora(build_stub(TOY), BaselineConfig(kind="lora", rank=9))


def test_unknown_kind():
    with pytest.raises(InvalidArgumentError):
        BaselineConfig(kind="prefix")


def _randomise(model, seed):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.tensor.data = rng.uniform(-1, 1, size=p.data.shape)


@pytest.mark.parametrize("attach,cfg", [
    (attach_lora, BaselineConfig(kind="lora", rank=2)),
    (attach_adapter, BaselineConfig(kind="adapter", bottleneck=3)),
])
def test_gradients_through_insertions(attach, cfg):
    stub = build_stub(TOY)
    model = attach(stub, cfg)
    # move away from the zero init so every path carries gradient
    _randomise(model, 3)
    rng = np.random.default_rng(4)
    x = rng.uniform(-2, 2, size=(1, 5, 8))
    target = rng.uniform(0, 1, size=(1, 1, 8))

    def value():
        out = model.forward(None, Tensor(x))
        return float(tc.add(tc.bce_loss(out.beat, target), tc.bce_loss(out.downbeat, target)).data)

    out = model.forward(None, Tensor(x))
    tc.add(tc.bce_loss(out.beat, target), tc.bce_loss(out.downbeat, target)).backward()
    for p in model.parameters():
        assert_grad_close(p.grad, numerical_grad(value, p.tensor.data))
    assert all(p.grad is None for p in stub.parameters())


def test_trainables_live_outside_stub():
    stub = build_stub(TOY)
    stub_ids = {id(p) for p in stub.parameters()}
    for attach in (attach_adapter, attach_lora, linear_probe):
        model = attach(stub)
        assert all(p.trainable for p in model.parameters())
        assert not stub_ids & {id(p) for p in model.parameters()}
