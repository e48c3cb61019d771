"""Multi-task training with early stopping, shared by every model kind."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .data import Example, broaden_labels, time_stretch
from .evaluation import MetricReport, evaluate, mean_report
from .foundation import FoundationStub, LayerFeatureStack
from .hingenet import ParameterCount, count_parameters
from .postprocess import BeatSequence, DbnConfig, assign_downbeats, viterbi_decode
from .tensorcore import InvalidArgumentError, Tensor

logger = logging.getLogger(__name__)

STRETCH_RANGE = (0.8, 1.25)


class NumericalError(FloatingPointError):
    """A loss or activation became NaN or infinite."""


class FrozenParameterError(RuntimeError):
    """Frozen stub parameters changed during training."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    patience: int = 20
    max_epochs: int = 200
    seed: int = 0
    augment: bool = False
    label_mode: str = "soft"
    crop_frames: int | None = 100

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise InvalidArgumentError("lr, batch_size, patience and max_epochs must be positive")
        if self.crop_frames is not None and self.crop_frames < 8:
            raise InvalidArgumentError("crop_frames must be at least 8 frames")
        if self.label_mode not in ("soft", "weighted"):
            raise InvalidArgumentError(f"label_mode must be 'soft' or 'weighted', got {self.label_mode!r}")


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` misses.

    Epochs are numbered from 1.  Only a strict decrease counts as progress.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, loss: float) -> bool:
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


@dataclass
class RunRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    epochs_run: int = 0
    test_beat: MetricReport | None = None
    test_downbeat: MetricReport | None = None
    counts: ParameterCount | None = None
    wall_clock_s: float = 0.0
    stub_digest: str = ""


@dataclass
class _Prepared:
    example: Example
    stack: LayerFeatureStack | None
    beat: np.ndarray
    downbeat: np.ndarray


def _targets(example: Example) -> tuple[np.ndarray | None, np.ndarray | None]:
    if example.annotation is None:
        return None, None
    t = example.n_frames
    return (broaden_labels(example.annotation, t, example.frame_rate, "beat"),
            broaden_labels(example.annotation, t, example.frame_rate, "downbeat"))


def prepare(model, stub: FoundationStub | None, examples: Sequence[Example]) -> list[_Prepared]:
    """Pre-compute targets and, when the model allows it, frozen features."""
    out = []
    for ex in examples:
        stack = None
        if isinstance(ex.features, LayerFeatureStack):
            stack = ex.features
        elif model.uses_frozen_features and stub is not None:
            stack = stub.forward_all(Tensor(ex.features.data)).detach()
            stack.frame_rate = ex.frame_rate
        out.append(_Prepared(ex, stack, *_targets(ex)))
    return out


def _slice_item(it: _Prepared, start: int, stop: int) -> _Prepared:
    ex = it.example
    feats = ex.features if isinstance(ex.features, LayerFeatureStack) else Tensor(ex.features.data[:, :, start:stop])
    ex = Example(feats, ex.annotation, id=f"{ex.id}[{start}:{stop}]", frame_rate=ex.frame_rate)
    stack = None
    if it.stack is not None:
        stack = LayerFeatureStack([Tensor(l.data[:, :, start:stop]) for l in it.stack.layers],
                                  it.stack.frame_rate)
        if isinstance(ex.features, LayerFeatureStack):
            ex.features = stack
    return _Prepared(ex, stack, it.beat[start:stop], it.downbeat[start:stop])


def crop_items(items: Sequence[_Prepared], size: int | None,
               rng: np.random.Generator) -> list[_Prepared]:
    """Cut items into consecutive excerpts of ``size`` frames.

    A random leading offset per item varies the cut points between epochs;
    leftovers shorter than ``size`` are dropped unless an item is shorter
    than one excerpt.
    """
    if size is None:
        return list(items)
    out = []
    for it in items:
        t = it.example.n_frames
        if t <= size:
            out.append(it)
            continue
        start = int(rng.integers(0, min(size, t - size) + 1))
        while start + size <= t:
            out.append(_slice_item(it, start, start + size))
            start += size
    return out


def _raw_input(ex: Example):
    return None if isinstance(ex.features, LayerFeatureStack) else Tensor(ex.features.data)


def _batch_forward(model, items: Sequence[_Prepared]):
    """Forward equal-length items stacked along the batch axis."""
    if len(items) == 1:
        it = items[0]
        return model.forward(it.stack, _raw_input(it.example))
    if all(it.stack is not None for it in items) and model.uses_frozen_features:
        layers = [Tensor(np.concatenate([it.stack.layers[i].data for it in items]))
                  for i in range(items[0].stack.n_layers)]
        return model.forward(LayerFeatureStack(layers, items[0].stack.frame_rate), None)
    x = Tensor(np.concatenate([it.example.features.data for it in items]))
    return model.forward(None, x)


def _loss(pred, items: Sequence[_Prepared], label_mode: str):
    beat_t = np.stack([it.beat for it in items])[:, None, :]
    down_t = np.stack([it.downbeat for it in items])[:, None, :]
    if label_mode == "weighted":
        bw = np.where(beat_t > 0, beat_t, 1.0)
        dw = np.where(down_t > 0, down_t, 1.0)
        beat_t, down_t = (beat_t > 0).astype(float), (down_t > 0).astype(float)
    else:
        bw = dw = None
    return tc.add(tc.bce_loss(pred.beat, beat_t, bw), tc.bce_loss(pred.downbeat, down_t, dw))


def _groups(items: Sequence[_Prepared]) -> list[list[_Prepared]]:
    by_len: dict[int, list[_Prepared]] = {}
    for it in items:
        by_len.setdefault(it.example.n_frames, []).append(it)
    return list(by_len.values())


def batch_loss(model, items: Sequence[_Prepared], label_mode: str = "soft"):
    """Mean over items of beat BCE + downbeat BCE."""
    total = None
    n = len(items)
    for group in _groups(items):
        pred = _batch_forward(model, group)
        part = tc.scale(_loss(pred, group, label_mode), len(group) / n)
        total = part if total is None else tc.add(total, part)
    return total


def _snapshot(params) -> list[np.ndarray]:
    return [p.tensor.data.copy() for p in params]


def _restore(params, snap) -> None:
    for p, arr in zip(params, snap):
        p.tensor.data = arr.copy()


def train(model, splits, config: TrainConfig | None = None, stub: FoundationStub | None = None,
          dbn: DbnConfig | None = None,
          augment_fn: Callable[[Example, float], Example] = time_stretch,
          log_every: int = 0) -> RunRecord:
    """Adam on summed beat/downbeat BCE with early stopping on validation loss.

    The parameters with the lowest validation loss are restored before the
    test split (if any) is decoded and scored.  Only training items are
    augmented.  Raises :class:`FrozenParameterError` if the stub digest
    differs after training.
    """
    cfg = config or TrainConfig()
    if not splits.train or not splits.val:
        raise InvalidArgumentError("train and validation splits must be non-empty")
    ids = [set(e.id for e in getattr(splits, k)) for k in ("train", "val", "test")]
    if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
        raise InvalidArgumentError("splits must be disjoint")
    stub = stub if stub is not None else getattr(model, "stub", None)
    start = time.perf_counter()
    digest = stub.digest() if stub is not None else ""
    params = [p for p in model.parameters() if p.trainable]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 1])))
    train_items = prepare(model, stub, splits.train) if not cfg.augment else None
    val_items = prepare(model, stub, splits.val)
    record = RunRecord()
    stopper = EarlyStopping(cfg.patience)
    best = _snapshot(params)

    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.augment:
            factors = rng.uniform(*STRETCH_RANGE, size=len(splits.train))
            train_items = prepare(model, stub, [augment_fn(ex, f) for ex, f in zip(splits.train, factors)])
        excerpts = crop_items(train_items, cfg.crop_frames, rng)
        order = rng.permutation(len(excerpts))
        epoch_loss = 0.0
        for s in range(0, len(order), cfg.batch_size):
            batch = [excerpts[i] for i in order[s:s + cfg.batch_size]]
            for p in params:
                p.tensor.zero_grad()
            loss = batch_loss(model, batch, cfg.label_mode)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            tc.adam_step(params, lr=cfg.lr)
            epoch_loss += value * len(batch)
        record.train_loss.append(epoch_loss / len(excerpts))
        val = float(batch_loss(model, val_items, cfg.label_mode).data)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        record.val_loss.append(val)
        stop = stopper.update(val)
        if stopper.improved:
            best = _snapshot(params)
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d train %.5f val %.5f", epoch, record.train_loss[-1], val)
        if stop:
            break

    _restore(params, best)
    if stub is not None and stub.digest() != digest:
        raise FrozenParameterError("frozen stub parameters changed during training")
    record.stub_digest = digest
    record.best_epoch = stopper.best_epoch
    record.best_val_loss = float(stopper.best)
    record.epochs_run = stopper.epoch
    record.counts = count_parameters(model, stub) if stub is not None else count_parameters(model)
    if splits.test:
        record.test_beat, record.test_downbeat = score_examples(model, splits.test, stub, dbn)
    record.wall_clock_s = time.perf_counter() - start
    return record


def predict_activations(model, examples: Sequence[Example], stub: FoundationStub | None = None):
    """Beat and downbeat activation arrays per example."""
    stub = stub if stub is not None else getattr(model, "stub", None)
    out = []
    for it in prepare(model, stub, examples):
        pred = model.forward(it.stack, _raw_input(it.example))
        out.append(pred.numpy())
    return out


def decode(beat: np.ndarray, downbeat: np.ndarray, frame_rate: float = 50.0,
           dbn: DbnConfig | None = None) -> BeatSequence:
    cfg = dbn or DbnConfig(frame_rate=frame_rate)
    beats = viterbi_decode(beat, cfg)
    if len(beats) == 0:
        return beats
    return assign_downbeats(beats, downbeat, frame_rate=cfg.frame_rate)


def score_examples(model, examples: Sequence[Example], stub=None, dbn=None):
    """Mean beat and downbeat metric reports over decoded examples."""
    beat_reps, down_reps = [], []
    for ex, (b, d) in zip(examples, predict_activations(model, examples, stub)):
        seq = decode(b, d, ex.frame_rate, dbn)
        beat_reps.append(evaluate(seq.times, ex.annotation.beat_times))
        down_reps.append(evaluate(seq.downbeats, ex.annotation.downbeat_times))
    return mean_report(beat_reps), mean_report(down_reps)
