"""Synthetic harmonic-shift corpus, annotation I/O, label broadening, stretching.

Randomness comes from numpy's Philox4x64 counter-based generator keyed by
``SeedSequence([seed, item_index])``, so every item is reproducible on its
own and across platforms.

Each synthetic item is a log-frequency feature map with a five-partial
harmonic stack (root plus 12, 19, 24 and 28 bins).  The root moves only at
beats, so harmonic changes mark beat positions; downbeat frames get an extra
broadband bump.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .foundation import LayerFeatureStack, load_features, save_features
from .tensorcore import InvalidArgumentError, Tensor

HARMONIC_OFFSETS = (0, 12, 19, 24, 28)
STACK_SPAN = HARMONIC_OFFSETS[-1] + 1
DOWNBEAT_BUMP = 0.3
BROADEN_STENCIL = (1.0, 0.5, 0.25)


class AnnotationParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class BeatAnnotation:
    beat_times: np.ndarray
    positions: np.ndarray | None = None

    def __post_init__(self):
        self.beat_times = np.asarray(self.beat_times, dtype=np.float64).reshape(-1)
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1)
            if len(self.positions) != len(self.beat_times):
                raise InvalidArgumentError("positions and beat_times differ in length")
        if np.any(np.diff(self.beat_times) <= 0):
            raise InvalidArgumentError("beat times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.beat_times)

    @property
    def downbeat_times(self) -> np.ndarray:
        if self.positions is None:
            return np.empty(0)
        return self.beat_times[self.positions == 1]

    @property
    def meter(self) -> int | None:
        if self.positions is None or len(self.positions) == 0:
            return None
        return int(self.positions.max())


@dataclass
class Example:
    features: Tensor
    annotation: BeatAnnotation
    id: str = ""
    frame_rate: float = 50.0

    @property
    def n_frames(self) -> int:
        return self.features.shape[2]


@dataclass(frozen=True)
class SyntheticConfig:
    n_items: int = 60
    duration_s: float = 20.0
    frame_rate: float = 50.0
    feature_dim: int = 60
    tempo_bpm: tuple[float, float] = (70.0, 180.0)
    meters: tuple[int, ...] = (3, 4)
    tempo_jitter: float = 0.02
    noise_sigma: float = 0.05
    harmonic_amplitudes: tuple[float, ...] = (1.0, 0.8, 0.6, 0.5, 0.4)
    root_step_max: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < STACK_SPAN:
            raise InvalidArgumentError(
                f"feature_dim must be at least {STACK_SPAN} to hold the harmonic stack"
            )
        if len(self.harmonic_amplitudes) != len(HARMONIC_OFFSETS):
            raise InvalidArgumentError("need one amplitude per harmonic")
        lo, hi = self.tempo_bpm
        if not 0 < lo <= hi:
            raise InvalidArgumentError(f"bad tempo range {self.tempo_bpm}")
        if self.n_items < 0 or self.duration_s <= 0 or self.frame_rate <= 0:
            raise InvalidArgumentError("n_items, duration_s and frame_rate must be positive")
        if not self.meters or min(self.meters) < 1:
            raise InvalidArgumentError("meters must be positive integers")
        if self.root_step_max < 0:
            raise InvalidArgumentError("root_step_max must be >= 0")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.frame_rate))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        for k in ("tempo_bpm", "meters", "harmonic_amplitudes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def _generate_item(cfg: SyntheticConfig, index: int) -> Example:
    rng = item_rng(cfg.seed, index)
    fps, t = cfg.frame_rate, cfg.n_frames
    bpm = rng.uniform(*cfg.tempo_bpm)
    meter = int(rng.choice(cfg.meters))
    period = 60.0 / bpm
    first = rng.uniform(0.0, period)
    phase0 = int(rng.integers(meter))
    times = []
    now = first
    while now < cfg.duration_s:
        frame = int(round(now * fps))
        if frame >= t:
            break
        times.append(now)
        now += period * (1.0 + rng.uniform(-cfg.tempo_jitter, cfg.tempo_jitter))
    times = np.array(times)
    positions = (np.arange(len(times)) + phase0) % meter + 1

    top = cfg.feature_dim - STACK_SPAN
    root = int(rng.integers(top + 1))
    amps = np.asarray(cfg.harmonic_amplitudes)
    feats = np.zeros((cfg.feature_dim, t))
    beat_frames = np.round(times * fps).astype(int)
    bounds = list(beat_frames) + [t]
    # segment before the first beat keeps the starting root
    segments = [(0, bounds[0] if len(beat_frames) else t)]
    segments += [(bounds[k], bounds[k + 1]) for k in range(len(beat_frames))]
    for k, (start, stop) in enumerate(segments):
        if k > 0 and cfg.root_step_max > 0:
            step = int(rng.integers(1, cfg.root_step_max + 1)) * (1 if rng.random() < 0.5 else -1)
            if not 0 <= root + step <= top:
                step = -step
            root = int(np.clip(root + step, 0, top))
        for off, amp in zip(HARMONIC_OFFSETS, amps):
            feats[root + off, start:stop] = amp
    feats[:, beat_frames[positions == 1]] += DOWNBEAT_BUMP
    if cfg.noise_sigma > 0:
        feats += rng.normal(0.0, cfg.noise_sigma, size=feats.shape)
    return Example(Tensor(feats[None]), BeatAnnotation(times, positions),
                   id=f"item_{index}", frame_rate=fps)


def generate(config: SyntheticConfig | None = None) -> list[Example]:
    """Build ``config.n_items`` deterministic synthetic examples."""
    cfg = config or SyntheticConfig()
    return [_generate_item(cfg, k) for k in range(cfg.n_items)]


def broaden_labels(annotation, n_frames: int, frame_rate: float = 50.0,
                   which: str = "beat") -> np.ndarray:
    """Per-frame target: 1 at annotated frames, 0.5 at +-1, 0.25 at +-2.

    Overlapping stencils keep the maximum; frames outside the clip are
    dropped.  ``which`` selects beats or downbeats from a
    :class:`BeatAnnotation`; a plain array of times is used as is.
    """
    if isinstance(annotation, BeatAnnotation):
        times = annotation.beat_times if which == "beat" else annotation.downbeat_times
    else:
        times = np.asarray(annotation, dtype=np.float64).reshape(-1)
    target = np.zeros(n_frames)
    frames = np.round(times * frame_rate).astype(np.int64)
    for off in range(-2, 3):
        idx = frames + off
        idx = idx[(idx >= 0) & (idx < n_frames)]
        np.maximum.at(target, idx, BROADEN_STENCIL[abs(off)])
    return target


def broadened_targets(example: Example) -> tuple[np.ndarray, np.ndarray]:
    t = example.n_frames
    return (broaden_labels(example.annotation, t, example.frame_rate, "beat"),
            broaden_labels(example.annotation, t, example.frame_rate, "downbeat"))


def time_stretch(example: Example, factor: float) -> Example:
    """Resample features along time by linear interpolation; scale beat times.

    The channel (pitch) axis is untouched.
    """
    if not 0.5 <= factor <= 2.0:
        raise InvalidArgumentError(f"stretch factor must lie in [0.5, 2], got {factor}")
    x = example.features.data
    t = x.shape[2]
    t_new = max(1, int(round(t * factor)))
    src = np.arange(t_new) / factor
    lo = np.clip(np.floor(src).astype(np.int64), 0, t - 1)
    hi = np.clip(lo + 1, 0, t - 1)
    w = np.clip(src - lo, 0.0, 1.0)[None, None, :]
    out = x[:, :, lo] * (1.0 - w) + x[:, :, hi] * w
    ann = example.annotation
    times = ann.beat_times * factor
    keep = np.round(times * example.frame_rate) < t_new
    positions = ann.positions[keep] if ann.positions is not None else None
    return replace(example, features=Tensor(out),
                   annotation=BeatAnnotation(times[keep], positions))


# ---------------------------------------------------------------------------
# annotation files


def parse_annotation(path) -> BeatAnnotation:
    """Read ``time [position]`` lines separated by spaces or tabs."""
    times, positions = [], []
    with_pos = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) > 2:
            raise AnnotationParseError(f"expected 'time [position]', got {line!r}", lineno)
        try:
            t = float(parts[0])
            p = int(float(parts[1])) if len(parts) == 2 else None
        except ValueError:
            raise AnnotationParseError(f"malformed line {line!r}", lineno) from None
        if not np.isfinite(t) or t < 0:
            raise AnnotationParseError(f"invalid time {parts[0]!r}", lineno)
        if times and t <= times[-1]:
            raise AnnotationParseError(f"time {t} does not increase", lineno)
        has = p is not None
        if with_pos is None:
            with_pos = has
        elif with_pos != has:
            raise AnnotationParseError("position column present on some lines only", lineno)
        times.append(t)
        positions.append(p)
    return BeatAnnotation(np.array(times), np.array(positions) if with_pos else None)


def write_annotation(annotation: BeatAnnotation, path) -> None:
    out = []
    for i, t in enumerate(annotation.beat_times):
        if annotation.positions is not None:
            out.append(f"{t:.6f}\t{int(annotation.positions[i])}\n")
        else:
            out.append(f"{t:.6f}\n")
    Path(path).write_text("".join(out))


# ---------------------------------------------------------------------------
# dataset directories


@dataclass
class DatasetSplits:
    train: list[Example] = field(default_factory=list)
    val: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def as_dict(self) -> dict[str, list[str]]:
        return {k: [e.id for e in getattr(self, k)] for k in ("train", "val", "test")}


def split_examples(examples: Sequence[Example], fractions=(0.7, 0.15, 0.15),
                   seed: int = 0) -> DatasetSplits:
    """Deterministic shuffled three-way split."""
    n = len(examples)
    order = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2**32]))).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    pick = [examples[i] for i in order]
    return DatasetSplits(pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:])


def save_dataset(splits: DatasetSplits, directory, config: SyntheticConfig | None = None,
                 seed: int | None = None) -> Path:
    """Write ``item_k.hgft`` + ``item_k.beats`` files and ``manifest.json``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    everything = splits.train + splits.val + splits.test
    for ex in sorted(everything, key=lambda e: _item_key(e.id)):
        stack = LayerFeatureStack([ex.features], frame_rate=ex.frame_rate)
        save_features(stack, root / f"{ex.id}.hgft")
        write_annotation(ex.annotation, root / f"{ex.id}.beats")
    manifest = {
        "format": "hingebeat-dataset",
        "version": 1,
        "seed": seed if seed is not None else (config.seed if config else None),
        "items": sorted((e.id for e in everything), key=_item_key),
        "splits": splits.as_dict(),
        "config": config.to_dict() if config else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _item_key(name: str):
    tail = name.rsplit("_", 1)[-1]
    return (0, int(tail), name) if tail.isdigit() else (1, 0, name)


def load_example(directory, item: str) -> Example:
    root = Path(directory)
    stack = load_features(root / f"{item}.hgft")
    if stack.n_layers != 1 or stack.shape[0] != 1:
        raise InvalidArgumentError(f"{item}.hgft must hold one layer with batch size one")
    ann = parse_annotation(root / f"{item}.beats")
    return Example(stack.layers[0], ann, id=item, frame_rate=stack.frame_rate)


def load_dataset(directory) -> DatasetSplits:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    return DatasetSplits(**{
        k: [load_example(root, name) for name in manifest["splits"].get(k, [])]
        for k in ("train", "val", "test")
    })
