"""Beat tracking metrics: F-measure and continuity (CMLc/CMLt/AMLc/AMLt)."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensorcore import InvalidArgumentError

logger = logging.getLogger(__name__)

F_MEASURE_TOLERANCE = 0.07
CONTINUITY_THETA = 0.175

REPORT_COLUMNS = ("item", "F", "P", "R", "CMLc", "CMLt", "AMLc", "AMLt")


def _as_sorted(x, name: str) -> np.ndarray:
    arr = np.asarray(getattr(x, "times", x), dtype=np.float64).reshape(-1)
    if np.any(np.diff(arr) < 0):
        raise InvalidArgumentError(f"{name} beats must be sorted")
    return arr


def match_count(est, ref, tolerance: float = F_MEASURE_TOLERANCE) -> int:
    """Size of a maximum one-to-one matching with ``|e - r| <= tolerance``.

    A single sweep over both sorted lists is optimal for this interval
    relation: the earliest unmatched events are always safe to pair.
    """
    est = _as_sorted(est, "estimated")
    ref = _as_sorted(ref, "reference")
    i = j = n = 0
    while i < len(est) and j < len(ref):
        d = est[i] - ref[j]
        if abs(d) <= tolerance:
            n += 1
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    return n


def f_measure(est, ref, tolerance: float = F_MEASURE_TOLERANCE) -> tuple[float, float, float]:
    """Return ``(F, precision, recall)``.  Empty inputs score zero."""
    est = _as_sorted(est, "estimated")
    ref = _as_sorted(ref, "reference")
    if len(est) == 0 or len(ref) == 0:
        return 0.0, 0.0, 0.0
    n = match_count(est, ref, tolerance)
    p = n / len(est)
    r = n / len(ref)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return f, p, r


def _correct_beats(est: np.ndarray, ref: np.ndarray, theta: float) -> np.ndarray:
    """Per estimated beat: phase and period both within ``theta`` of the reference."""
    if len(est) < 2 or len(ref) < 2:
        return np.zeros(len(est), dtype=bool)
    ref_int = np.diff(ref)
    est_int = np.diff(est)
    ok = np.zeros(len(est), dtype=bool)
    for j, e in enumerate(est):
        i = int(np.argmin(np.abs(ref - e)))
        local = ref_int[i] if i < len(ref_int) else ref_int[-1]
        if abs(e - ref[i]) > theta * local:
            continue
        period = est_int[j - 1] if j > 0 else est_int[0]
        ok[j] = abs(period - local) <= theta * local
    return ok


def _longest_run(ok: np.ndarray) -> int:
    best = run = 0
    for v in ok:
        run = run + 1 if v else 0
        best = max(best, run)
    return best


def reference_variations(ref: np.ndarray) -> dict[str, np.ndarray]:
    """Original, off-beat, double tempo and both phases of half tempo."""
    mid = (ref[:-1] + ref[1:]) / 2
    double = np.empty(len(ref) + len(mid))
    double[0::2] = ref
    double[1::2] = mid
    return {
        "original": ref,
        "offbeat": mid,
        "double": double,
        "half_odd": ref[0::2],
        "half_even": ref[1::2],
    }


def continuity(est, ref, theta: float = CONTINUITY_THETA) -> tuple[float, float, float, float]:
    """Return ``(CMLc, CMLt, AMLc, AMLt)``.

    A beat counts when it lies within ``theta`` times the local reference
    interval of a reference beat and its own inter-beat interval agrees with
    that local interval to the same tolerance.  ``c`` variants use the
    longest run of consecutive correct beats, ``t`` variants all correct
    beats; both are normalised by ``max(len(est), len(ref))``.
    """
    est = _as_sorted(est, "estimated")
    ref = _as_sorted(ref, "reference")
    if len(ref) < 2:
        raise InvalidArgumentError("continuity needs at least two reference beats")
    scores = {}
    for name, var in reference_variations(ref).items():
        if len(var) < 2:
            scores[name] = (0.0, 0.0)
            continue
        ok = _correct_beats(est, var, theta)
        denom = max(len(est), len(var))
        scores[name] = (_longest_run(ok) / denom, ok.sum() / denom)
    cmlc, cmlt = scores["original"]
    amlc = max(c for c, _ in scores.values())
    amlt = max(t for _, t in scores.values())
    return float(cmlc), float(cmlt), float(amlc), float(amlt)


@dataclass
class MetricReport:
    f_measure: float
    precision: float
    recall: float
    cmlc: float
    cmlt: float
    amlc: float
    amlt: float
    n_matched: int = 0
    n_estimated: int = 0
    n_reference: int = 0

    def row(self) -> list[float]:
        return [self.f_measure, self.precision, self.recall,
                self.cmlc, self.cmlt, self.amlc, self.amlt]


def evaluate(est, ref, tolerance: float = F_MEASURE_TOLERANCE,
             theta: float = CONTINUITY_THETA) -> MetricReport:
    est = _as_sorted(est, "estimated")
    ref = _as_sorted(ref, "reference")
    f, p, r = f_measure(est, ref, tolerance)
    if len(ref) >= 2:
        cont = continuity(est, ref, theta)
    else:
        cont = (0.0, 0.0, 0.0, 0.0)
    return MetricReport(f, p, r, *cont, n_matched=match_count(est, ref, tolerance),
                        n_estimated=len(est), n_reference=len(ref))


@dataclass
class CorpusReport:
    items: list[tuple[str, MetricReport]]
    mean: MetricReport
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def n_excluded(self) -> int:
        return len(self.errors)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for name, rep in self.items:
                w.writerow([name] + [f"{v:.6f}" for v in rep.row()])
            w.writerow(["mean"] + [f"{v:.6f}" for v in self.mean.row()])


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    if not reports:
        raise InvalidArgumentError("no items")
    fields = ("f_measure", "precision", "recall", "cmlc", "cmlt", "amlc", "amlt")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in fields}
    return MetricReport(**means,
                        n_matched=sum(r.n_matched for r in reports),
                        n_estimated=sum(r.n_estimated for r in reports),
                        n_reference=sum(r.n_reference for r in reports))


def score_corpus(pairs: Iterable[tuple[str | Path, str | Path]],
                 tolerance: float = F_MEASURE_TOLERANCE,
                 theta: float = CONTINUITY_THETA) -> CorpusReport:
    """Score ``(estimate_file, reference_file)`` pairs; unweighted item mean.

    Items whose files are missing or malformed are recorded in
    :attr:`CorpusReport.errors` and left out of the mean.
    """
    from .data import AnnotationParseError, parse_annotation

    pairs = list(pairs)
    if not pairs:
        raise InvalidArgumentError("no items")
    items, errors = [], {}
    for est_path, ref_path in pairs:
        name = Path(ref_path).stem
        try:
            est = parse_annotation(est_path)
            ref = parse_annotation(ref_path)
        except (OSError, AnnotationParseError) as exc:
            logger.warning("skipping %s: %s", name, exc)
            errors[name] = str(exc)
            continue
        items.append((name, evaluate(est.beat_times, ref.beat_times, tolerance, theta)))
    if not items:
        raise InvalidArgumentError(f"no items could be scored ({len(errors)} excluded)")
    return CorpusReport(items, mean_report([r for _, r in items]), errors)


def report_dict(report: MetricReport) -> dict:
    return asdict(report)
