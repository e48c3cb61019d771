"""scikit-learn style trackers wrapping the models and the training loop.

Every tracker takes a list of per-item feature matrices ``(channels, frames)``
and a matching list of beat annotations::

    tracker = HingeNetTracker(projection_factor=4, random_state=0)
    tracker.fit(X_train, y_train)
    beats = tracker.predict(X_test)        # list of BeatSequence
    proba = tracker.predict_proba(X_test)  # list of (frames, 2) arrays
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import BaselineConfig, attach_adapter, attach_lora, linear_probe
from .data import DatasetSplits, Example, split_examples
from .evaluation import evaluate, mean_report
from .foundation import StubConfig, build_stub
from .hingenet import HingeConfig, HingeModel, count_parameters
from .postprocess import BeatSequence, DbnConfig
from .tensorcore import Tensor
from .training import TrainConfig, decode, predict_activations, train
from .validation import check_annotations, check_features, check_seed


class _BaseTracker(BaseEstimator):
    """Shared fit/predict plumbing; subclasses only build the model."""

    def _build_model(self, stub, seed: int):
        raise NotImplementedError

    def _examples(self, X, y=None, prefix="item"):
        X = check_features(X, n_channels=getattr(self, "n_features_in_", None))
        anns = check_annotations(y, len(X)) if y is not None else [None] * len(X)
        out = []
        for k, (x, ann) in enumerate(zip(X, anns)):
            feats = x if not isinstance(x, np.ndarray) else Tensor(x[None])
            out.append(Example(feats, ann, id=f"{prefix}_{k}", frame_rate=self.frame_rate))
        return out

    def _train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, patience=self.patience,
                           max_epochs=self.max_epochs, seed=seed, augment=self.augment,
                           label_mode=self.label_mode, crop_frames=self.crop_frames)

    def _dbn(self) -> DbnConfig:
        return DbnConfig(frame_rate=self.frame_rate, tau_min=self.tau_min, tau_max=self.tau_max)

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on ``(X, y)``; early stopping uses ``(X_val, y_val)``.

        Without a validation set, 15% of the training items (at least one)
        are held out for early stopping.
        """
        seed = check_seed(self.random_state)
        X = check_features(X)
        if all(isinstance(x, np.ndarray) for x in X):
            channels = {x.shape[0] for x in X}
            if len(channels) != 1:
                raise ValueError(f"items disagree on channel count: {sorted(channels)}")
            self.n_features_in_ = channels.pop()
        else:
            self.n_features_in_ = None
        train_ex = self._examples(X, y, "train")
        if X_val is not None:
            splits = DatasetSplits(train_ex, self._examples(X_val, y_val, "val"), [])
        else:
            if len(train_ex) < 2:
                raise ValueError("need at least two items when no validation set is given")
            n_val = max(1, int(round(0.15 * len(train_ex))))
            frac = n_val / len(train_ex)
            splits = split_examples(train_ex, (1.0 - frac, frac, 0.0), seed=seed)
        self.stub_ = build_stub(StubConfig(input_channels=self.n_features_in_ or 60,
                                           seed=self.stub_seed))
        self.model_ = self._build_model(self.stub_, seed)
        self.record_ = train(self.model_, splits, self._train_config(seed), stub=self.stub_,
                             dbn=self._dbn())
        self.parameter_count_ = count_parameters(self.model_, self.stub_)
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per item, a ``(frames, 2)`` array of beat and downbeat probabilities."""
        check_is_fitted(self, "model_")
        acts = predict_activations(self.model_, self._examples(X), self.stub_)
        return [np.stack([b, d], axis=1) for b, d in acts]

    def predict(self, X) -> list[BeatSequence]:
        """Decoded beat sequences with bar positions."""
        return [decode(p[:, 0], p[:, 1], self.frame_rate, self._dbn()) for p in self.predict_proba(X)]

    def score(self, X, y) -> float:
        """Mean beat F-measure over items."""
        anns = check_annotations(y, len(check_features(X)))
        reports = [evaluate(seq.times, ann.beat_times) for seq, ann in zip(self.predict(X), anns)]
        return mean_report(reports).f_measure


class HingeNetTracker(_BaseTracker):
    """Hinge network on frozen stub features.

    Parameters
    ----------
    projection_factor : int
        Divides the encoder width before the harmonic-aware module.
    ham_enabled : bool
        ``False`` swaps the harmonic-aware module for one linear map.
    conv_axis : {"channel", "time"}
        Axis the dilated branch kernels slide along.
    bins_per_octave, n_harmonics : int
        Define the branch dilations.
    lr, batch_size, patience, max_epochs, crop_frames, label_mode, augment
        Training settings, see :class:`~hingebeat.training.TrainConfig`.
    frame_rate : float
        Frames per second of the inputs.
    tau_min, tau_max : int
        Beat period range of the decoder, in frames.
    stub_seed : int
        Seed of the frozen feature extractor.
    random_state : int, numpy Generator or None
        Seeds parameter init, splitting and batching.
    """

    def __init__(self, projection_factor=6, ham_enabled=True, conv_axis="channel", bins_per_octave=12,
                 n_harmonics=5, lr=1e-3, batch_size=16, patience=20, max_epochs=200, crop_frames=100,
                 label_mode="soft", augment=False, frame_rate=50.0, tau_min=15, tau_max=60,
                 stub_seed=0, random_state=None):
        self.projection_factor = projection_factor
        self.ham_enabled = ham_enabled
        self.conv_axis = conv_axis
        self.bins_per_octave = bins_per_octave
        self.n_harmonics = n_harmonics
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.crop_frames = crop_frames
        self.label_mode = label_mode
        self.augment = augment
        self.frame_rate = frame_rate
        self.tau_min = tau_min
        self.tau_max = tau_max
        self.stub_seed = stub_seed
        self.random_state = random_state

    def _build_model(self, stub, seed):
        cfg = HingeConfig(projection_factor=self.projection_factor, ham_enabled=self.ham_enabled,
                          conv_axis=self.conv_axis, bins_per_octave=self.bins_per_octave,
                          n_harmonics=self.n_harmonics, seed=seed)
        return HingeModel(stub.hidden, stub.n_layers, cfg)


class _BaselineTracker(_BaseTracker):
    _kind = ""
    _builders = {"adapter": attach_adapter, "lora": attach_lora, "linear_probe": linear_probe}

    def _baseline_config(self, seed) -> BaselineConfig:
        return BaselineConfig(kind=self._kind, seed=seed)

    def _build_model(self, stub, seed):
        return self._builders[self._kind](stub, self._baseline_config(seed))


def _train_init(self, kw):
    for k, v in kw.items():
        setattr(self, k, v)


class AdapterTracker(_BaselineTracker):
    """Residual bottleneck adapters after every stub block."""

    _kind = "adapter"

    def __init__(self, bottleneck=16, lr=1e-3, batch_size=16, patience=20, max_epochs=200,
                 crop_frames=100, label_mode="soft", augment=False, frame_rate=50.0, tau_min=15,
                 tau_max=60, stub_seed=0, random_state=None):
        self.bottleneck = bottleneck
        _train_init(self, dict(lr=lr, batch_size=batch_size, patience=patience, max_epochs=max_epochs,
                               crop_frames=crop_frames, label_mode=label_mode, augment=augment,
                               frame_rate=frame_rate, tau_min=tau_min, tau_max=tau_max,
                               stub_seed=stub_seed, random_state=random_state))

    def _baseline_config(self, seed):
        return BaselineConfig(kind="adapter", bottleneck=self.bottleneck, seed=seed)


class LoRATracker(_BaselineTracker):
    """Low-rank updates on the query and value maps of every stub block."""

    _kind = "lora"

    def __init__(self, rank=4, lora_alpha=8.0, lr=1e-3, batch_size=16, patience=20, max_epochs=200,
                 crop_frames=100, label_mode="soft", augment=False, frame_rate=50.0, tau_min=15,
                 tau_max=60, stub_seed=0, random_state=None):
        self.rank = rank
        self.lora_alpha = lora_alpha
        _train_init(self, dict(lr=lr, batch_size=batch_size, patience=patience, max_epochs=max_epochs,
                               crop_frames=crop_frames, label_mode=label_mode, augment=augment,
                               frame_rate=frame_rate, tau_min=tau_min, tau_max=tau_max,
                               stub_seed=stub_seed, random_state=random_state))

    def _baseline_config(self, seed):
        return BaselineConfig(kind="lora", rank=self.rank, lora_alpha=self.lora_alpha, seed=seed)


class LinearProbeTracker(_BaselineTracker):
    """Linear head on the last frozen stub layer."""

    _kind = "linear_probe"

    def __init__(self, lr=1e-3, batch_size=16, patience=20, max_epochs=200, crop_frames=100,
                 label_mode="soft", augment=False, frame_rate=50.0, tau_min=15, tau_max=60,
                 stub_seed=0, random_state=None):
        _train_init(self, dict(lr=lr, batch_size=batch_size, patience=patience, max_epochs=max_epochs,
                               crop_frames=crop_frames, label_mode=label_mode, augment=augment,
                               frame_rate=frame_rate, tau_min=tau_min, tau_max=tau_max,
                               stub_seed=stub_seed, random_state=random_state))
