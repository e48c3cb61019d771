"""Beat decoding: bar-pointer HMM with exact Viterbi, downbeat phase, peaks.

The state of the HMM is ``(phase, tempo)`` where ``tempo`` is an integer
number of frames per beat in ``[tau_min, tau_max]`` and ``phase`` counts
frames since the last beat.  Phase advances deterministically; when it wraps,
the tempo may change with probability proportional to
``exp(-lambda * |tau' / tau - 1|)``.  A frame is a beat when phase is zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorcore import InvalidArgumentError


@dataclass(frozen=True)
class DbnConfig:
    frame_rate: float = 50.0
    tau_min: int = 15
    tau_max: int = 60
    tempo_change_lambda: float = 25.0
    observation_epsilon: float = 1e-6

    def __post_init__(self):
        if not 1 <= self.tau_min < self.tau_max:
            raise InvalidArgumentError(
                f"need 1 <= tau_min < tau_max, got {self.tau_min}, {self.tau_max}"
            )
        if self.frame_rate <= 0:
            raise InvalidArgumentError("frame_rate must be positive")

    @property
    def tempi(self) -> np.ndarray:
        return np.arange(self.tau_min, self.tau_max + 1)

    @property
    def n_states(self) -> int:
        return int(self.tempi.sum())


@dataclass
class BeatSequence:
    """Beat times in seconds with optional metrical positions (1 = downbeat)."""

    times: np.ndarray
    positions: np.ndarray | None = None
    meter: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1)
            if len(self.positions) != len(self.times):
                raise InvalidArgumentError("positions and times differ in length")
        if np.any(self.times < 0):
            raise InvalidArgumentError("beat times must be non-negative")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidArgumentError("beat times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def downbeats(self) -> np.ndarray:
        if self.positions is None:
            return np.empty(0)
        return self.times[self.positions == 1]


def tempo_transition_matrix(config: DbnConfig) -> np.ndarray:
    """Log ``p(tau' | tau)``, rows indexed by the current tempo."""
    tau = config.tempi.astype(np.float64)
    ratio = tau[None, :] / tau[:, None]
    logits = -config.tempo_change_lambda * np.abs(ratio - 1.0)
    logits -= logits.max(axis=1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def _log_observations(activation: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(activation, dtype=np.float64)
    return np.log(np.maximum(a, eps)), np.log(np.maximum(1.0 - a, eps))


def viterbi_path(activation, config: DbnConfig | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Most probable ``(phase, tempo)`` state path.

    Returns
    -------
    phases, tempi : ndarray
        Per-frame decoded phase and tempo (frames per beat).
    log_prob : float
        Joint log-probability of the path and the observations.
    """
    cfg = config or DbnConfig()
    a = np.asarray(activation, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise InvalidArgumentError("cannot decode an empty activation")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError("activation contains non-finite values")
    tempi = cfg.tempi
    n_tempi = len(tempi)
    offsets = np.concatenate([[0], np.cumsum(tempi)[:-1]])
    last = offsets + tempi - 1
    n_states = int(tempi.sum())
    log_trans = tempo_transition_matrix(cfg)
    log_beat, log_off = _log_observations(a, cfg.observation_epsilon)

    is_beat = np.zeros(n_states, dtype=bool)
    is_beat[offsets] = True
    # predecessor of each non-beat state is the state just before it
    advance = np.ones(n_states, dtype=bool)
    advance[offsets] = False
    src_adv = np.flatnonzero(advance) - 1

    delta = np.full(n_states, -np.log(n_states))
    delta += np.where(is_beat, log_beat[0], log_off[0])
    back = np.empty((len(a), n_tempi), dtype=np.int32)
    for t in range(1, len(a)):
        new = np.empty(n_states)
        new[advance] = delta[src_adv]
        cand = delta[last][:, None] + log_trans
        best = np.argmax(cand, axis=0)
        back[t] = best
        new[offsets] = cand[best, np.arange(n_tempi)]
        new += np.where(is_beat, log_beat[t], log_off[t])
        delta = new

    state = int(np.argmax(delta))
    log_prob = float(delta[state])
    tempo_idx = np.searchsorted(offsets, state, side="right") - 1
    phase = state - offsets[tempo_idx]
    phases = np.empty(len(a), dtype=np.int64)
    tidx = np.empty(len(a), dtype=np.int64)
    for t in range(len(a) - 1, -1, -1):
        phases[t] = phase
        tidx[t] = tempo_idx
        if t == 0:
            break
        if phase > 0:
            phase -= 1
        else:
            tempo_idx = int(back[t, tempo_idx])
            phase = tempi[tempo_idx] - 1
    return phases, tempi[tidx], log_prob


def path_log_probability(activation, phases, tempi, config: DbnConfig | None = None) -> float:
    """Score an explicit state path under the HMM; ``-inf`` if it is invalid."""
    cfg = config or DbnConfig()
    a = np.asarray(activation, dtype=np.float64).reshape(-1)
    log_beat, log_off = _log_observations(a, cfg.observation_epsilon)
    log_trans = tempo_transition_matrix(cfg)
    lp = -np.log(cfg.n_states)
    for t in range(len(a)):
        ph, tau = int(phases[t]), int(tempi[t])
        if not (cfg.tau_min <= tau <= cfg.tau_max and 0 <= ph < tau):
            return -np.inf
        if t > 0:
            pph, ptau = int(phases[t - 1]), int(tempi[t - 1])
            if pph < ptau - 1:
                if not (ph == pph + 1 and tau == ptau):
                    return -np.inf
            else:
                if ph != 0:
                    return -np.inf
                lp += log_trans[ptau - cfg.tau_min, tau - cfg.tau_min]
        lp += log_beat[t] if ph == 0 else log_off[t]
    return float(lp)


def viterbi_decode(activation, config: DbnConfig | None = None) -> BeatSequence:
    """Decode beat times (seconds) from a per-frame beat activation."""
    cfg = config or DbnConfig()
    a = np.asarray(activation, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise InvalidArgumentError("cannot decode an empty activation")
    phases, _, _ = viterbi_path(a, cfg)
    frames = np.flatnonzero(phases == 0)
    return BeatSequence(frames / cfg.frame_rate)


def assign_downbeats(beats: BeatSequence, downbeat_activation, frame_rate: float = 50.0,
                     meters=(3, 4)) -> BeatSequence:
    """Pick the meter and bar offset whose downbeat candidates score highest.

    For each meter ``B`` and offset ``o`` the score is the mean downbeat
    activation at beats ``o, o + B, ...``.  Ties go to the smaller meter,
    then the smaller offset.
    """
    n = len(beats)
    if n == 0:
        raise InvalidArgumentError("cannot assign downbeats to an empty beat sequence")
    act = np.asarray(downbeat_activation, dtype=np.float64).reshape(-1)
    frames = np.clip(np.round(beats.times * frame_rate).astype(np.int64), 0, len(act) - 1)
    vals = act[frames]
    best = None
    for meter in sorted(meters):
        for off in range(meter):
            sel = vals[off::meter]
            if sel.size == 0:
                continue
            score = sel.mean()
            if best is None or score > best[0]:
                best = (score, meter, off)
    _, meter, off = best
    positions = (np.arange(n) - off) % meter + 1
    return BeatSequence(beats.times.copy(), positions, meter=meter)


def peak_pick(activation, threshold: float = 0.5, min_distance: int = 1,
              frame_rate: float = 50.0) -> BeatSequence:
    """Local maxima above ``threshold`` at least ``min_distance`` frames apart.

    Higher peaks win conflicts; equal heights keep the earlier frame.
    """
    a = np.asarray(activation, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return BeatSequence(np.empty(0))
    left = np.concatenate([[-np.inf], a[:-1]])
    right = np.concatenate([a[1:], [-np.inf]])
    cand = np.flatnonzero((a > threshold) & (a > left) & (a >= right))
    order = sorted(cand, key=lambda i: (-a[i], i))
    kept: list[int] = []
    for i in order:
        if all(abs(i - j) >= min_distance for j in kept):
            kept.append(i)
    return BeatSequence(np.sort(np.array(kept, dtype=np.int64)) / frame_rate)


def write_beats(beats: BeatSequence, path) -> None:
    """One line per beat: ``time<TAB>position`` with six decimals."""
    lines = []
    for i, t in enumerate(beats.times):
        if beats.positions is not None:
            lines.append(f"{t:.6f}\t{int(beats.positions[i])}")
        else:
            lines.append(f"{t:.6f}")
    Path(path).write_text("".join(line + "\n" for line in lines))


ACTIVATION_HEADER = "# hingebeat activations frame_rate="


class ActivationFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def write_activations(path, beat, downbeat, frame_rate: float) -> None:
    """Text file: a header with the frame rate, then ``beat downbeat`` per frame."""
    beat = np.asarray(beat, dtype=np.float64).reshape(-1)
    downbeat = np.asarray(downbeat, dtype=np.float64).reshape(-1)
    if beat.shape != downbeat.shape:
        raise InvalidArgumentError("beat and downbeat activations differ in length")
    rows = "".join(f"{b:.10f} {d:.10f}\n" for b, d in zip(beat, downbeat))
    Path(path).write_text(f"{ACTIVATION_HEADER}{frame_rate!r}\n{rows}")


def read_activations(path) -> tuple[np.ndarray, np.ndarray, float]:
    """Inverse of :func:`write_activations`; returns ``(beat, downbeat, frame_rate)``."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(ACTIVATION_HEADER):
        raise ActivationFormatError("missing activation header", 1)
    try:
        frame_rate = float(lines[0][len(ACTIVATION_HEADER):])
    except ValueError:
        raise ActivationFormatError("bad frame rate in header", 1) from None
    if not frame_rate > 0:
        raise ActivationFormatError("frame rate must be positive", 1)
    values = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 2:
            raise ActivationFormatError(f"expected two values, got {line!r}", lineno)
        try:
            pair = (float(parts[0]), float(parts[1]))
        except ValueError:
            raise ActivationFormatError(f"malformed values {line!r}", lineno) from None
        if not all(0.0 <= v <= 1.0 for v in pair):
            raise ActivationFormatError(f"activations must lie in [0, 1], got {line!r}", lineno)
        values.append(pair)
    if not values:
        raise ActivationFormatError("no frames", len(lines))
    arr = np.array(values)
    return arr[:, 0], arr[:, 1], frame_rate
