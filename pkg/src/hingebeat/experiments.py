"""Ablation and method-comparison harnesses with CSV/SVG/manifest output."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .baselines import BaselineConfig, attach_adapter, attach_lora, linear_probe
from .data import DatasetSplits
from .foundation import FoundationStub
from .hingenet import HingeConfig, HingeModel
from .postprocess import DbnConfig
from .training import TrainConfig, prepare, train

logger = logging.getLogger(__name__)

METHODS = ("hinge", "adapter", "lora", "linear_probe")
ABLATION_COLUMNS = ("metric", "r", "ham", "mean", "std", "n_seeds", "skipped")
COMPARISON_COLUMNS = ("method", "beat_f_mean", "beat_f_std", "downbeat_f_mean", "downbeat_f_std",
                      "trainable", "frozen", "fraction", "n_seeds")


def code_hash(version: str = __version__) -> str:
    """Git-style blob SHA-1 of the package version string."""
    data = version.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def cache_features(splits: DatasetSplits, stub: FoundationStub) -> DatasetSplits:
    """Replace raw features by frozen stub outputs, computed once.

    Only models that read frozen features can use the result; adapters and
    LoRA need the raw splits.
    """
    probe = linear_probe(stub)

    def convert(examples):
        return [replace(it.example, features=it.stack) for it in prepare(probe, stub, examples)]

    return DatasetSplits(convert(splits.train), convert(splits.val), convert(splits.test))


@dataclass
class CellResult:
    method: str
    seed: int
    beat_f: float
    downbeat_f: float
    trainable: int
    frozen: int
    epochs: int
    wall_clock_s: float
    r: int | None = None
    ham: bool | None = None


def _build(method: str, stub: FoundationStub, seed: int, r: int = 6, ham: bool = True,
           baseline: BaselineConfig | None = None):
    if method == "hinge":
        return HingeModel(stub.hidden, stub.n_layers,
                          HingeConfig(projection_factor=r, ham_enabled=ham, seed=seed))
    cfg = replace(baseline or BaselineConfig(kind=method), kind=method, seed=seed)
    return {"adapter": attach_adapter, "lora": attach_lora, "linear_probe": linear_probe}[method](stub, cfg)


def run_cell(method: str, seed: int, splits: DatasetSplits, stub: FoundationStub,
             config: TrainConfig, dbn: DbnConfig | None = None, r: int = 6, ham: bool = True,
             baseline: BaselineConfig | None = None) -> CellResult:
    """Train and test one configuration with one seed."""
    model = _build(method, stub, seed, r, ham, baseline)
    rec = train(model, splits, replace(config, seed=seed), stub=stub, dbn=dbn)
    logger.info("%s r=%s ham=%s seed=%d: beat F %.4f in %.1fs", method, r, ham, seed,
                rec.test_beat.f_measure, rec.wall_clock_s)
    return CellResult(method, seed, rec.test_beat.f_measure, rec.test_downbeat.f_measure,
                      rec.counts.trainable, rec.counts.frozen, rec.epochs_run, rec.wall_clock_s,
                      r if method == "hinge" else None, ham if method == "hinge" else None)


def _run_job(job):
    return run_cell(*job[0], **job[1])


def _run_all(jobs: list, n_jobs: int) -> list[CellResult]:
    if n_jobs <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        # map keeps submission order, so results merge deterministically
        return list(pool.map(_run_job, jobs))


@dataclass
class AblationTable:
    rows: list[dict]
    cells: list[CellResult] = field(default_factory=list)

    def mean(self, r: int, ham: bool, metric: str = "beat_f") -> float:
        for row in self.rows:
            if row["r"] == r and row["ham"] == ham and row["metric"] == metric:
                return row["mean"]
        raise KeyError((r, ham, metric))


def _summary(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def ablate_projection(splits: DatasetSplits, stub: FoundationStub, r_values=(2, 4, 6, 8),
                      seeds=(0, 1, 2), config: TrainConfig | None = None,
                      dbn: DbnConfig | None = None, jobs: int = 1) -> AblationTable:
    """Projection factor x HAM on/off grid, hinge only.

    ``splits`` may already hold cached stub features (see
    :func:`cache_features`).  Factors that do not divide the stub width are
    reported as skipped rows.
    """
    config = config or TrainConfig()
    grid, skipped = [], {}
    for r in r_values:
        if r < 1 or stub.hidden % r:
            skipped[r] = f"hidden size {stub.hidden} not divisible by r={r}"
            continue
        for ham in (True, False):
            grid += [((("hinge", s, splits, stub, config, dbn), {"r": r, "ham": ham})) for s in seeds]
    cells = _run_all(grid, jobs)
    rows = []
    for metric in ("beat_f", "downbeat_f"):
        for r in r_values:
            for ham in (True, False):
                if r in skipped:
                    rows.append({"metric": metric, "r": r, "ham": ham, "mean": float("nan"),
                                 "std": float("nan"), "n_seeds": 0, "skipped": skipped[r]})
                    continue
                vals = [getattr(c, metric) for c in cells if c.r == r and c.ham == ham]
                m, s = _summary(vals)
                rows.append({"metric": metric, "r": r, "ham": ham, "mean": m, "std": s,
                             "n_seeds": len(vals), "skipped": ""})
    return AblationTable(rows, cells)


def compare_methods(splits: DatasetSplits, stub: FoundationStub, methods=METHODS, seeds=(0, 1, 2),
                    config: TrainConfig | None = None, dbn: DbnConfig | None = None,
                    cached: DatasetSplits | None = None, r: int = 6, jobs: int = 1) -> list[dict]:
    """One row per method: mean/std beat and downbeat F plus parameter counts.

    Methods that read frozen features use ``cached`` when it is given.
    """
    config = config or TrainConfig()
    jobs_list = []
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
        use = cached if cached is not None and method in ("hinge", "linear_probe") else splits
        jobs_list += [((method, s, use, stub, config, dbn), {"r": r}) for s in seeds]
    cells = _run_all(jobs_list, jobs)
    rows = []
    for method in methods:
        mine = [c for c in cells if c.method == method]
        bm, bs = _summary([c.beat_f for c in mine])
        dm, ds = _summary([c.downbeat_f for c in mine])
        total = mine[0].trainable + mine[0].frozen
        rows.append({"method": method, "beat_f_mean": bm, "beat_f_std": bs, "downbeat_f_mean": dm,
                     "downbeat_f_std": ds, "trainable": mine[0].trainable, "frozen": mine[0].frozen,
                     "fraction": mine[0].trainable / total if total else 0.0, "n_seeds": len(mine)})
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def write_table(rows: Sequence[dict], columns: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_ablation_svg(table: AblationTable, path, metric: str = "beat_f") -> None:
    """Grouped bars (HAM on/off) per projection factor with one-stdev whiskers."""
    rows = [r for r in table.rows if r["metric"] == metric]
    rs = sorted({r["r"] for r in rows})
    width, height, left, bottom, top = 120 + 90 * len(rs), 300, 50, 40, 30
    plot_h = height - bottom - top
    y = lambda v: top + plot_h * (1.0 - v)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<text x="{width / 2}" y="18" text-anchor="middle">{escape(metric)} by projection factor</text>',
           f'<line x1="{left}" y1="{y(0)}" x2="{width - 20}" y2="{y(0)}" stroke="black"/>',
           f'<line x1="{left}" y1="{y(0)}" x2="{left}" y2="{y(1)}" stroke="black"/>']
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(f'<text x="{left - 5}" y="{y(tick) + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
    colours = {True: "#3b6ea5", False: "#c8c8c8"}
    for k, r in enumerate(rs):
        x0 = left + 20 + 90 * k
        for j, ham in enumerate((True, False)):
            row = next(row for row in rows if row["r"] == r and row["ham"] == ham)
            if row["skipped"]:
                continue
            m, s = row["mean"], row["std"]
            x = x0 + 30 * j
            out.append(f'<rect x="{x}" y="{y(m):.1f}" width="28" height="{y(0) - y(m):.1f}" '
                       f'fill="{colours[ham]}"/>')
            out.append(f'<line x1="{x + 14}" y1="{y(min(1.0, m + s)):.1f}" x2="{x + 14}" '
                       f'y2="{y(max(0.0, m - s)):.1f}" stroke="black"/>')
        out.append(f'<text x="{x0 + 29}" y="{y(0) + 15}" text-anchor="middle">r={r}</text>')
    lx = width - 110
    for j, ham in enumerate((True, False)):
        out.append(f'<rect x="{lx}" y="{top + 14 * j}" width="10" height="10" fill="{colours[ham]}"/>')
        out.append(f'<text x="{lx + 14}" y="{top + 9 + 14 * j}">HAM {"on" if ham else "off"}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def write_manifest(path, config: dict, seed: int, extra: dict | None = None) -> dict:
    manifest = {"version": __version__, "code_hash": code_hash(), "seed": seed, "config": config,
                "python": platform.python_version(), "numpy": np.__version__}
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest
