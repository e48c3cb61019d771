from dataclasses import replace

import numpy as np
import pytest

from hingebeat.baselines import linear_probe
from hingebeat.data import DatasetSplits, SyntheticConfig, generate
from hingebeat.foundation import StubConfig, build_stub
from hingebeat.hingenet import HingeConfig, HingeModel
from hingebeat.tensorcore import InvalidArgumentError
from hingebeat.training import (EarlyStopping, FrozenParameterError, NumericalError, TrainConfig, batch_loss, crop_items,
                                prepare, train)

TOY_STUB = StubConfig(n_layers=2, hidden=24)


def _splits(n_train=2, seed=3, noise=0.0, duration=6.0):
    ex = generate(SyntheticConfig(n_items=n_train, duration_s=duration, noise_sigma=noise, seed=seed))
    return DatasetSplits(ex, [replace(ex[0], id="val")], [replace(e, id=e.id + "_test") for e in ex])


class TestEarlyStopping:
    def test_scripted_sequence(self):
        es = EarlyStopping(patience=2)
        stops = [es.update(v) for v in [1.0, 0.9, 0.91, 0.92]]
        assert stops == [False, False, False, True]
        assert es.best_epoch == 2 and es.best == 0.9

    def test_equal_loss_is_not_progress(self):
        es = EarlyStopping(patience=1)
        es.update(1.0)
        assert es.update(1.0)
        assert es.best_epoch == 1


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(lr=0)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(label_mode="hard")
    with pytest.raises(InvalidArgumentError):
        TrainConfig(crop_frames=4)


def test_overfit_two_items():
    stub = build_stub(TOY_STUB)
    before = stub.digest()
    model = HingeModel(24, 2, HingeConfig(projection_factor=2))
    rec = train(model, _splits(), TrainConfig(max_epochs=600, patience=600, lr=1e-2, crop_frames=None),
                stub=stub)
    assert rec.test_beat.f_measure >= 0.95
    assert rec.train_loss[-1] < rec.train_loss[0]
    assert stub.digest() == before


def test_best_epoch_restored():
    stub = build_stub(TOY_STUB)
    model = HingeModel(24, 2, HingeConfig(projection_factor=2))
    sp = _splits()
    rec = train(model, sp, TrainConfig(max_epochs=15, patience=3, lr=5e-2, crop_frames=None), stub=stub)
    assert rec.best_val_loss == min(rec.val_loss)
    assert rec.val_loss[rec.best_epoch - 1] == rec.best_val_loss
    assert rec.epochs_run <= 15
    again = float(batch_loss(model, prepare(model, stub, sp.val)).data)
    assert again == pytest.approx(rec.best_val_loss, rel=1e-12)


def test_augmentation_applied_to_training_items_only():
    stub = build_stub(TOY_STUB)
    model = linear_probe(stub)
    sp = _splits(n_train=3)
    calls = []

    def fake_stretch(ex, factor):
        calls.append((ex.id, factor))
        return ex

    train(model, sp, TrainConfig(max_epochs=4, patience=10, augment=True, crop_frames=None),
          stub=stub, augment_fn=fake_stretch)
    assert len(calls) == 4 * len(sp.train)
    assert {i for i, _ in calls} == {e.id for e in sp.train}
    assert all(0.8 <= f <= 1.25 for _, f in calls)


def test_nan_raises():
    stub = build_stub(TOY_STUB)
    model = HingeModel(24, 2, HingeConfig(projection_factor=2))
    model.head.weight.data[:] = np.nan
    with pytest.raises(NumericalError):
        train(model, _splits(), TrainConfig(max_epochs=2, crop_frames=None), stub=stub)


def test_overlapping_splits_rejected():
    sp = _splits()
    sp.val = [sp.train[0]]
    with pytest.raises(InvalidArgumentError, match="disjoint"):
        train(HingeModel(24, 2, HingeConfig(projection_factor=2)), sp, stub=build_stub(TOY_STUB))


def test_crops_are_consecutive_and_sized():
    stub = build_stub(TOY_STUB)
    model = HingeModel(24, 2, HingeConfig(projection_factor=2))
    items = prepare(model, stub, _splits(n_train=1).train)
    rng = np.random.default_rng(0)
    crops = crop_items(items, 64, rng)
    assert len(crops) >= 300 // 64 - 1
    assert all(c.stack.layers[0].shape[2] == 64 and len(c.beat) == 64 for c in crops)
    starts = [int(c.example.id.split("[")[1].split(":")[0]) for c in crops]
    assert all(b - a == 64 for a, b in zip(starts, starts[1:]))
    np.testing.assert_array_equal(crops[0].beat, items[0].beat[starts[0]:starts[0] + 64])


def test_same_seed_same_run():
    stub = build_stub(TOY_STUB)
    losses = []
    for _ in range(2):
        model = HingeModel(24, 2, HingeConfig(projection_factor=2, seed=1))
        rec = train(model, _splits(), TrainConfig(max_epochs=3, crop_frames=64, seed=9), stub=stub)
        losses.append(rec.train_loss)
    assert losses[0] == losses[1]


def test_stub_change_during_training_is_caught():
    stub = build_stub(TOY_STUB)
    model = linear_probe(stub)

    def tampering_stretch(example, factor):
        stub.parameters()[0].tensor.data[...] += 1e-12
        return example

    with pytest.raises(FrozenParameterError):
        train(model, _splits(), TrainConfig(max_epochs=1, augment=True, crop_frames=None),
              stub=stub, augment_fn=tampering_stretch)


def test_record_holds_stub_digest():
    stub = build_stub(TOY_STUB)
    rec = train(linear_probe(stub), _splits(), TrainConfig(max_epochs=1, crop_frames=None), stub=stub)
    assert rec.stub_digest == stub.digest()
