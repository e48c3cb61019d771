import math

import numpy as np
import pytest

from hingebeat import tensorcore as tc
from hingebeat.foundation import LayerFeatureStack, StubConfig, build_stub
from hingebeat.hingenet import (HarmonicIntervalSpec, HingeConfig, HingeModel, count_parameters,
                                harmonic_intervals, hinge_forward)
from hingebeat.tensorcore import InvalidArgumentError, Tensor

from helpers import assert_grad_close, numerical_grad


def _stack(rng, n=3, b=1, h=8, t=6):
    return LayerFeatureStack([Tensor(rng.uniform(-2, 2, size=(b, h, t))) for _ in range(n)])


class TestHarmonicIntervals:
    def test_twelve_bins_five_harmonics(self):
        assert harmonic_intervals(HarmonicIntervalSpec(12, 5)) == [12, 7, 5, 4]

    @pytest.mark.parametrize("q", [1, 7, 12, 24, 36])
    def test_octave_identity(self, q):
        assert harmonic_intervals(bins_per_octave=q, n_harmonics=2) == [q]

    def test_twenty_four_bins(self):
        assert 24 * math.log2(1.5) == pytest.approx(14.039, abs=1e-3)
        assert harmonic_intervals(bins_per_octave=24, n_harmonics=3) == [24, 14]

    def test_strictly_decreasing_positive(self):
        for q in (12, 24, 36, 48):
            d = harmonic_intervals(bins_per_octave=q, n_harmonics=6)
            assert len(d) == 5
            assert all(x > 0 for x in d)
            assert all(a > b for a, b in zip(d, d[1:]))

    @pytest.mark.parametrize("q,n", [(0, 5), (12, 1), (-3, 4), (12.5, 3)])
    def test_invalid(self, q, n):
        with pytest.raises(InvalidArgumentError):
            harmonic_intervals(bins_per_octave=q, n_harmonics=n)


class TestProjection:
    def test_channel_arithmetic(self):
        assert HingeModel(768, 1, HingeConfig(projection_factor=6)).channels == 128
        rng = np.random.default_rng(0)
        model = HingeModel(64, 1, HingeConfig(projection_factor=4))
        out = model.project(0, Tensor(rng.normal(size=(2, 64, 9))))
        assert out.shape == (2, 16, 9)

    def test_zero_weights_give_zero(self):
        model = HingeModel(8, 1, HingeConfig(projection_factor=2))
        w, b = model.proj[0]
        w.data[:] = 0
        b.data[:] = 0
        out = model.project(0, Tensor(np.random.default_rng(1).normal(size=(1, 8, 5))))
        assert not out.data.any()

    def test_indivisible_hidden(self):
        with pytest.raises(InvalidArgumentError):
            HingeModel(64, 4, HingeConfig(projection_factor=6))


class TestGate:
    def test_init_is_half(self):
        model = HingeModel(12, 4, HingeConfig(projection_factor=2))
        assert model.gate_values() == [0.5, 0.5, 0.5]
        assert all(g.data[0] == 0.0 for g in model.gates[1:])

    def test_zero_gate_is_average(self):
        rng = np.random.default_rng(2)
        model = HingeModel(8, 2, HingeConfig(projection_factor=2))
        a, b = Tensor(rng.normal(size=(1, 4, 5))), Tensor(rng.normal(size=(1, 4, 5)))
        np.testing.assert_array_equal(model.fuse(1, a, b).data, 0.5 * a.data + 0.5 * b.data)

    def test_first_layer_passes_projection(self):
        rng = np.random.default_rng(3)
        model = HingeModel(8, 2, HingeConfig(projection_factor=2))
        p = Tensor(rng.normal(size=(1, 4, 5)))
        assert model.fuse(0, None, p) is p

    @pytest.mark.parametrize("alpha,which", [(20.0, "prev"), (-20.0, "proj")])
    def test_saturation(self, alpha, which):
        rng = np.random.default_rng(4)
        model = HingeModel(8, 2, HingeConfig(projection_factor=2))
        model.gates[1].data[:] = alpha
        a, b = Tensor(rng.normal(size=(1, 4, 5))), Tensor(rng.normal(size=(1, 4, 5)))
        out = model.fuse(1, a, b).data
        target = a.data if which == "prev" else b.data
        assert np.abs(out - target).max() < 1e-8

    def test_shape_mismatch(self):
        model = HingeModel(8, 2, HingeConfig(projection_factor=2))
        with pytest.raises(InvalidArgumentError):
            model.fuse(1, Tensor(np.ones((1, 4, 5))), Tensor(np.ones((1, 4, 6))))


class TestHam:
    def test_dilations_follow_harmonics(self):
        model = HingeModel(48, 2, HingeConfig(projection_factor=2))
        assert [d for _, _, d in model.hams[0].branches] == [12, 7, 5, 4]

    @pytest.mark.parametrize("axis", ["channel", "time"])
    @pytest.mark.parametrize("ham", [True, False])
    def test_shape_preserved(self, axis, ham):
        rng = np.random.default_rng(5)
        model = HingeModel(24, 1, HingeConfig(projection_factor=3, conv_axis=axis, ham_enabled=ham))
        x = Tensor(rng.normal(size=(2, 8, 11)))
        assert model.hams[0](x).shape == x.shape

    def test_disabled_has_fewer_parameters(self):
        on = count_parameters(HingeModel(48, 4, HingeConfig(projection_factor=4)))
        off = count_parameters(HingeModel(48, 4, HingeConfig(projection_factor=4, ham_enabled=False)))
        assert off.trainable < on.trainable

    def test_branch_count_must_match(self):
        with pytest.raises(InvalidArgumentError):
            HingeConfig(n_branches=3)
        assert HingeConfig(n_branches=4).branch_dilations() == [12, 7, 5, 4]

    @pytest.mark.parametrize("axis", ["channel", "time"])
    def test_core_layer_gradients(self, axis):
        rng = np.random.default_rng(6)
        cfg = HingeConfig(projection_factor=2, conv_axis=axis, dilations=(3, 2, 1))
        model = HingeModel(8, 2, cfg)
        for p in model.parameters():
            p.tensor.data = rng.uniform(-1, 1, size=p.data.shape)
        feats = Tensor(rng.uniform(-2, 2, size=(1, 8, 6)), requires_grad=True)
        prev = Tensor(rng.uniform(-2, 2, size=(1, 4, 6)), requires_grad=True)
        w = rng.uniform(-1, 1, size=(1, 4, 6))

        def value():
            return float((model.core_layer(1, Tensor(feats.data), Tensor(prev.data)).data * w).sum())

        out = model.core_layer(1, feats, prev)
        tc.mul(out, Tensor(w)).backward(np.ones_like(out.data))
        assert_grad_close(feats.grad, numerical_grad(value, feats.data))
        assert_grad_close(prev.grad, numerical_grad(value, prev.data))
        for p in model.parameters():
            if p.grad is None:
                continue
            assert_grad_close(p.grad, numerical_grad(value, p.tensor.data))


class TestForward:
    def test_shapes_and_range(self):
        rng = np.random.default_rng(7)
        model = HingeModel(8, 3, HingeConfig(projection_factor=2))
        out = hinge_forward(model, _stack(rng, n=3, t=17))
        assert out.beat.shape == (1, 1, 17) and out.downbeat.shape == (1, 1, 17)
        for a in (out.beat.data, out.downbeat.data):
            assert np.all((a > 0) & (a < 1))

    def test_stack_not_mutated(self):
        rng = np.random.default_rng(8)
        stack = _stack(rng)
        before = [l.data.copy() for l in stack.layers]
        hinge_forward(HingeModel(8, 3, HingeConfig(projection_factor=2)), stack)
        for a, b in zip(before, stack.layers):
            np.testing.assert_array_equal(a, b.data)

    def test_layer_count_mismatch(self):
        rng = np.random.default_rng(9)
        with pytest.raises(InvalidArgumentError):
            hinge_forward(HingeModel(8, 2, HingeConfig(projection_factor=2)), _stack(rng, n=3))

    def test_saturated_gates_ignore_later_layers(self):
        rng = np.random.default_rng(10)
        model = HingeModel(8, 4, HingeConfig(projection_factor=2))
        for g in model.gates[1:]:
            g.data[:] = 60.0
        stack = _stack(rng, n=4)
        base = hinge_forward(model, stack).beat.data
        perturbed = LayerFeatureStack([stack.layers[0]] + [
            Tensor(l.data + rng.normal(scale=3.0, size=l.shape)) for l in stack.layers[1:]
        ])
        assert np.abs(hinge_forward(model, perturbed).beat.data - base).max() < 1e-8

    def test_full_model_gradient(self):
        """Stub frozen, gradient of the hinge loss wrt the raw input and hinge weights."""
        stub = build_stub(StubConfig(n_layers=2, hidden=8, input_channels=5, seed=1))
        model = HingeModel(8, 2, HingeConfig(projection_factor=2, dilations=(2, 1)))
        rng = np.random.default_rng(11)
        x = Tensor(rng.uniform(-2, 2, size=(1, 5, 8)), requires_grad=True)
        target = rng.uniform(0, 1, size=(1, 1, 8))

        def value():
            out = model.forward(stub.forward_all(Tensor(x.data)))
            return float(tc.add(tc.bce_loss(out.beat, target), tc.bce_loss(out.downbeat, target)).data)

        out = model.forward(stub.forward_all(x))
        tc.add(tc.bce_loss(out.beat, target), tc.bce_loss(out.downbeat, target)).backward()
        assert_grad_close(x.grad, numerical_grad(value, x.data))
        for p in model.parameters():
            assert_grad_close(p.grad, numerical_grad(value, p.tensor.data))


class TestParameterCount:
    def test_stub_alone_has_no_trainables(self):
        c = count_parameters(build_stub())
        assert c.trainable == 0 and c.frozen > 0 and c.fraction == 0.0

    @pytest.mark.parametrize("axis", ["channel", "time"])
    def test_closed_form(self, axis):
        h, r, n, k = 64, 4, 4, 3
        model = HingeModel(h, n, HingeConfig(projection_factor=r, conv_axis=axis, kernel_size=k))
        c = h // r
        m = len(harmonic_intervals(bins_per_octave=12, n_harmonics=5))
        assert m == 4
        proj = h * c + c
        branch = (k + 1) if axis == "channel" else (c * c * k + c)
        mlp = (m * c) * c + c + c * c + c
        head = c * 2 + 2
        gates = n - 1
        expected = n * (proj + m * branch + mlp) + gates + head
        if axis == "channel":
            assert expected == 9509
        assert count_parameters(model).trainable == expected
        assert sum(p.size for p in model.parameters()) == expected

    def test_default_fraction_is_small(self):
        stub = build_stub()
        model = HingeModel(stub.hidden, stub.n_layers, HingeConfig())
        c = count_parameters(model, stub)
        assert c.frozen == count_parameters(stub).frozen
        assert 0 < c.fraction < 0.25
