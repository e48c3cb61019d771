"""Command line entry point: ``hingebeat <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file format
error, 4 numerical failure.  Failures print one ``hingebeat: error: ...``
line to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .baselines import BaselineConfig
from .checkpoint import build_model, load_model, model_kind, save_model
from .data import (AnnotationParseError, SyntheticConfig, generate, load_dataset, save_dataset,
                   split_examples)
from .evaluation import score_corpus
from .experiments import (ABLATION_COLUMNS, COMPARISON_COLUMNS, METHODS, ablate_projection,
                          cache_features, compare_methods, write_ablation_svg, write_manifest,
                          write_table)
from .foundation import FormatError, StubConfig, build_stub
from .hingenet import HingeConfig, count_parameters, harmonic_intervals
from .postprocess import ActivationFormatError, DbnConfig, read_activations, write_activations, write_beats
from .tensorcore import InvalidArgumentError
from .training import NumericalError, TrainConfig, decode, predict_activations, train

logger = logging.getLogger("hingebeat")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration


def _fields(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _sections(kind: str) -> dict[str, type]:
    model = HingeConfig if kind == "hinge" else BaselineConfig
    return {"train": TrainConfig, "model": model, "stub": StubConfig, "dbn": DbnConfig}


def valid_keys(kind: str = "hinge") -> list[str]:
    keys = []
    for section, cls in _sections(kind).items():
        keys += [f"{section}.{name}" for name in _fields(cls) if not (section == "model" and name == "kind")]
    return keys


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(kind: str, path: str | None, overrides: list[str]) -> dict[str, dict]:
    """Merge a JSON file (nested by section) with ``section.key=value`` flags."""
    flat: dict[str, object] = {}
    if path:
        try:
            blob = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc.msg}", exc.pos) from None
        if not isinstance(blob, dict):
            raise InvalidArgumentError(f"config {path} must hold a JSON object")
        for section, values in blob.items():
            if not isinstance(values, dict):
                raise InvalidArgumentError(f"config section {section!r} must be an object")
            for key, value in values.items():
                flat[f"{section}.{key}"] = value
    for item in overrides:
        if "=" not in item:
            raise InvalidArgumentError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        flat[key.strip()] = _parse_value(value)
    allowed = valid_keys(kind)
    unknown = sorted(k for k in flat if k not in allowed)
    if unknown:
        raise InvalidArgumentError(f"unknown config keys {unknown}; valid keys: {', '.join(allowed)}")
    out: dict[str, dict] = {s: {} for s in _sections(kind)}
    for key, value in flat.items():
        section, name = key.split(".", 1)
        if isinstance(value, list):
            value = tuple(value)
        out[section][name] = value
    return out


def _build(cls, values: dict, **fixed):
    try:
        return cls(**{**values, **fixed})
    except TypeError as exc:
        raise InvalidArgumentError(str(exc)) from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_intervals(args) -> int:
    print(" ".join(str(d) for d in harmonic_intervals(bins_per_octave=args.Q, n_harmonics=args.n)))
    return 0


def cmd_gen_data(args) -> int:
    cfg = dict(_parse_value_dict(args.set))
    cfg.setdefault("seed", args.seed)
    config = _build(SyntheticConfig, _tuples(cfg))
    splits = split_examples(generate(config), seed=config.seed)
    save_dataset(splits, args.out, config)
    print(f"wrote {config.n_items} items to {args.out}")
    return 0


def _parse_value_dict(items: list[str]) -> dict:
    allowed = _fields(SyntheticConfig)
    out = {}
    for item in items:
        if "=" not in item:
            raise InvalidArgumentError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        if key not in allowed:
            raise InvalidArgumentError(f"unknown config keys ['{key}']; valid keys: {', '.join(allowed)}")
        out[key] = _parse_value(value)
    return out


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _stub_for(data_splits, stub_cfg: dict, seed: int):
    first = (data_splits.train or data_splits.val or data_splits.test)[0]
    values = {"input_channels": first.features.shape[1], "seed": seed, **stub_cfg}
    return build_stub(_build(StubConfig, values))


def cmd_train(args) -> int:
    cfg = resolve_config(args.model, args.config, args.set)
    splits = load_dataset(args.data)
    stub = _stub_for(splits, cfg["stub"], args.seed)
    train_cfg = _build(TrainConfig, {"seed": args.seed, **cfg["train"]})
    dbn = _build(DbnConfig, {"frame_rate": splits.train[0].frame_rate, **cfg["dbn"]})
    model_cfg = {"seed": args.seed, **cfg["model"]}
    if args.model == "hinge":
        blob = {"kind": "hinge", "model": _build(HingeConfig, model_cfg).to_dict(),
                "hidden": stub.hidden, "n_layers": stub.n_layers}
    else:
        blob = {"kind": args.model, "model": _build(BaselineConfig, model_cfg, kind=args.model).to_dict()}
    blob["stub"] = stub.config.to_dict()
    model, _ = build_model(blob, stub)
    record = train(model, splits, train_cfg, stub=stub, dbn=dbn)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out, stub)
    summary = {"best_epoch": record.best_epoch, "best_val_loss": record.best_val_loss,
               "epochs_run": record.epochs_run, "train_loss": record.train_loss,
               "val_loss": record.val_loss, "test_beat": record.test_beat,
               "test_downbeat": record.test_downbeat, "parameters": record.counts,
               "stub_digest": stub.digest()}
    Path(str(out) + ".json").write_text(_dump(summary))
    write_manifest(str(out) + ".manifest.json",
                   {"kind": args.model, "model": blob["model"], "stub": blob["stub"],
                    "train": dataclasses.asdict(train_cfg), "dbn": dataclasses.asdict(dbn),
                    "data": str(args.data)}, args.seed)
    beat_f = record.test_beat.f_measure if record.test_beat else float("nan")
    print(f"best epoch {record.best_epoch}, val loss {record.best_val_loss:.5f}, test beat F {beat_f:.4f}")
    return 0


def _select(splits, which: str):
    if which == "all":
        return splits.train + splits.val + splits.test
    return getattr(splits, which)


def cmd_decode(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dbn_over = resolve_config("hinge", None, args.set)["dbn"]
    jobs = []
    if args.checkpoint:
        if not args.data:
            raise UsageError("decode: --checkpoint needs --data")
        model, stub = load_model(args.checkpoint)
        examples = _select(load_dataset(args.data), args.items)
        for ex, (b, d) in zip(examples, predict_activations(model, examples, stub)):
            write_activations(out / f"{ex.id}.act", b, d, ex.frame_rate)
            jobs.append((ex.id, b, d, ex.frame_rate))
    for path in args.activations:
        b, d, fps = read_activations(path)
        jobs.append((Path(path).stem, b, d, fps))
    if not jobs:
        raise UsageError("decode: give activation files or --checkpoint with --data")
    for name, b, d, fps in jobs:
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(d))):
            raise NumericalError(f"non-finite activation in {name}")
        dbn = _build(DbnConfig, {"frame_rate": fps, **dbn_over})
        write_beats(decode(b, d, fps, dbn), out / f"{name}.beats")
    print(f"decoded {len(jobs)} items into {out}")
    return 0


def cmd_evaluate(args) -> int:
    est_dir, ref_dir = Path(args.est), Path(args.ref)
    if not est_dir.is_dir() or not ref_dir.is_dir():
        raise FileNotFoundError(f"not a directory: {est_dir if not est_dir.is_dir() else ref_dir}")
    names = sorted(p.stem for p in est_dir.glob("*.beats"))
    if args.items:
        names = [n for n in names if n in set(args.items)]
    report = score_corpus([(est_dir / f"{n}.beats", ref_dir / f"{n}.beats") for n in names])
    if args.out:
        report.write_csv(args.out)
    mean = {k: getattr(report.mean, k) for k in ("f_measure", "precision", "recall",
                                                 "cmlc", "cmlt", "amlc", "amlt")}
    print(json.dumps({"items": len(report.items), "excluded": report.n_excluded, "mean": mean},
                     sort_keys=True))
    return 0


def _experiment_inputs(args, kind="hinge"):
    cfg = resolve_config(kind, args.config, args.set)
    splits = load_dataset(args.data)
    stub = _stub_for(splits, cfg["stub"], args.seed)
    train_cfg = _build(TrainConfig, {"seed": args.seed, **cfg["train"]})
    dbn = _build(DbnConfig, {"frame_rate": splits.train[0].frame_rate, **cfg["dbn"]})
    seeds = tuple(args.seeds) if args.seeds else (args.seed, args.seed + 1, args.seed + 2)
    return cfg, splits, stub, train_cfg, dbn, seeds


def cmd_ablate(args) -> int:
    cfg, splits, stub, train_cfg, dbn, seeds = _experiment_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ablate_projection(cache_features(splits, stub), stub, tuple(args.r), seeds, train_cfg, dbn,
                              jobs=args.jobs)
    write_table(table.rows, ABLATION_COLUMNS, out / "ablation.csv")
    write_ablation_svg(table, out / "ablation_beat_f.svg", "beat_f")
    write_ablation_svg(table, out / "ablation_downbeat_f.svg", "downbeat_f")
    write_table([dataclasses.asdict(c) for c in table.cells],
                [f.name for f in dataclasses.fields(type(table.cells[0]))] if table.cells else ["method"],
                out / "ablation_runs.csv")
    write_manifest(out / "manifest.json", {"train": dataclasses.asdict(train_cfg), "stub": stub.config.to_dict(),
                                           "r_values": list(args.r), "seeds": list(seeds),
                                           "data": str(args.data)}, args.seed)
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_compare(args) -> int:
    cfg, splits, stub, train_cfg, dbn, seeds = _experiment_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = compare_methods(splits, stub, tuple(args.methods), seeds, train_cfg, dbn,
                           cached=cache_features(splits, stub), r=args.r, jobs=args.jobs)
    write_table(rows, COMPARISON_COLUMNS, out / "comparison.csv")
    write_manifest(out / "manifest.json", {"train": dataclasses.asdict(train_cfg), "stub": stub.config.to_dict(),
                                           "methods": list(args.methods), "seeds": list(seeds),
                                           "r": args.r, "data": str(args.data)}, args.seed)
    print(f"wrote {out / 'comparison.csv'}")
    return 0


def cmd_inspect(args) -> int:
    raw = Path(args.checkpoint).read_bytes()
    model, stub = load_model(args.checkpoint)
    counts = count_parameters(model, stub)
    info = {"kind": model_kind(model), "config": model.config.to_dict(), "stub": stub.config.to_dict(),
            "parameters": {"trainable": counts.trainable, "frozen": counts.frozen,
                           "fraction": counts.fraction},
            "stub_digest": stub.digest(), "file_sha256": hashlib.sha256(raw).hexdigest(),
            "tensors": {p.name: list(p.data.shape) for p in model.parameters()}}
    if model_kind(model) == "hinge":
        info["gates"] = model.gate_values()
        info["dilations"] = model.config.branch_dilations()
    print(_dump(info), end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hingebeat", description="Beat tracking with a hinge network over frozen features.")
    p.add_argument("--seed", type=int, default=0, help="single source of randomness (default 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = _Parser(add_help=False)
    # repeated on subcommands so "gen-data --seed 7" works; unset keeps the global value
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("intervals", parents=[common], help="print rounded harmonic intervals")
    s.add_argument("--Q", type=int, default=12, help="bins per octave")
    s.add_argument("--n", type=int, default=5, help="number of harmonics")
    s.set_defaults(func=cmd_intervals)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="synthetic config override, e.g. n_items=20")
    s.set_defaults(func=cmd_gen_data)

    def add_config(s):
        s.add_argument("--config", help="JSON file with train/model/stub/dbn sections")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value, e.g. train.max_epochs=50")

    s = sub.add_parser("train", parents=[common], help="train a model and save a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--model", choices=METHODS, default="hinge")
    add_config(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", parents=[common], help="decode activations into beat files")
    s.add_argument("activations", nargs="*", help="activation files")
    s.add_argument("--checkpoint", help="model checkpoint to compute activations with")
    s.add_argument("--data", help="dataset directory (with --checkpoint)")
    s.add_argument("--items", choices=("train", "val", "test", "all"), default="test")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--set", action="append", default=[], metavar="dbn.KEY=VALUE")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("evaluate", parents=[common], help="score estimated beat files against references")
    s.add_argument("--est", required=True, help="directory of estimated .beats files")
    s.add_argument("--ref", required=True, help="directory of reference .beats files")
    s.add_argument("--items", nargs="*", help="restrict to these item names")
    s.add_argument("--out", help="CSV report path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="projection factor x HAM grid")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--r", type=int, nargs="+", default=[2, 4, 6, 8])
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--jobs", type=int, default=1)
    add_config(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("compare", parents=[common], help="compare hinge, adapter, LoRA and linear probe")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    s.add_argument("--r", type=int, default=6, help="hinge projection factor")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--jobs", type=int, default=1)
    add_config(s)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("inspect", parents=[common], help="print checkpoint metadata as JSON")
    s.add_argument("checkpoint")
    s.set_defaults(func=cmd_inspect)
    return p


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        err, code, kind = exc, EXIT_USAGE, "usage"
    except (InvalidArgumentError, ValueError) as exc:
        if isinstance(exc, (FormatError, AnnotationParseError, ActivationFormatError)):
            err, code, kind = exc, EXIT_IO, "format"
        else:
            err, code, kind = exc, EXIT_USAGE, "config"
    except (NumericalError, FloatingPointError) as exc:
        err, code, kind = exc, EXIT_NUMERIC, "numeric"
    except OSError as exc:
        err, code, kind = exc, EXIT_IO, "io"
    print(f"hingebeat: error: {kind}: {_one_line(err)}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
