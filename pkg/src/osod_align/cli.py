"""Command-line entry point: ``osod-align <command> [flags]``.

Exit status is 0 on success, 1 when a library call rejects its input
(malformed files, diverged training, failed gradient checks) and 2 for usage
errors, including missing input files and unknown ``--set`` keys.
"""
from __future__ import annotations

import argparse
import dataclasses
import enum
import json
import math
import os
import sys
from typing import Optional, Sequence

from .embeddings import EmbeddingFormatError, load_embeddings
from .formats import (
    FormatError,
    atomic_write,
    emit_report,
    format_ablation,
    format_dataset,
    format_gradcheck,
    format_model,
    format_records,
    parse_dataset,
    parse_model,
    parse_records,
)
from .gradcheck import run_suite
from .harness import DatasetSpec, TrainConfig, ablate, generate_dataset, train_on
from .harness.ablation import ground_truth, predict_split
from .losses import LossConfig
from .metrics import evaluate

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# --set key=value overrides

_SECTIONS = {"data": DatasetSpec, "train": TrainConfig, "loss": LossConfig}
# fields not settable through --set: seeds come from --seed, the loss config is its own section
_RESERVED = {("data", "seed"), ("train", "seed"), ("train", "loss")}


def _coerce(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(current, enum.Enum):
            return type(current)(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, (list, tuple)):
            if raw.lstrip().startswith("["):
                value = json.loads(raw)
            else:
                value = [v for v in raw.split(",") if v]
                if current and isinstance(current[0], (int, float)) and not isinstance(current[0], bool):
                    value = [type(current[0])(v) for v in value]
            return type(current)(value) if isinstance(current, tuple) else list(value)
        return raw
    except (ValueError, TypeError) as exc:
        raise UsageError(f"--set {key}: {exc}") from None


def apply_overrides(pairs: Sequence[str], sections: Sequence[str]) -> dict:
    """Build the dataclass configs named in ``sections`` with ``key=value`` overrides applied.

    Keys are ``section.field`` or a bare field name when only one section has it.
    """
    configs = {name: _SECTIONS[name]() for name in sections}
    updates: dict[str, dict] = {name: {} for name in sections}
    owners: dict[str, list[str]] = {}
    for name in sections:
        for f in dataclasses.fields(_SECTIONS[name]):
            if (name, f.name) not in _RESERVED:
                owners.setdefault(f.name, []).append(name)
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if "." in key:
            section, fname = key.split(".", 1)
            if section not in configs or section not in owners.get(fname, []):
                raise UsageError(f"unknown --set key {key!r}")
        else:
            found = owners.get(key, [])
            if not found:
                raise UsageError(f"unknown --set key {key!r}")
            if len(found) > 1:
                raise UsageError(f"--set key {key!r} is ambiguous; use one of {[f'{s}.{key}' for s in found]}")
            section, fname = found[0], key
        updates[section][fname] = _coerce(raw, getattr(configs[section], fname), key)
    try:
        for name in sections:
            configs[name] = dataclasses.replace(configs[name], **updates[name])
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid --set value: {exc}") from None
    if "train" in configs and "loss" in configs:
        configs["train"] = dataclasses.replace(configs["train"], loss=configs["loss"])
    return configs


# ---------------------------------------------------------------------------
# argument parsing


def _optional_real(text: str) -> Optional[float]:
    if text.lower() == "none":
        return None
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a real number or 'none', got {text!r}") from None
    if math.isnan(value):
        raise argparse.ArgumentTypeError("threshold cannot be NaN")
    return value


def _unit_interval(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a real number, got {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1], got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osod-align", description="Open-set detection losses and metrics, with a synthetic harness.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p, *, seed=False, sets=False, out_required=False):
        if seed:
            p.add_argument("--seed", type=int, default=0, help="seed for data generation and training")
        if sets:
            p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config field (repeatable)")
        p.add_argument("--out", required=out_required, help="output file (stdout when omitted)" if not out_required else "output file")

    def eval_flags(p, entropy_default):
        p.add_argument("--entropy-threshold", type=_optional_real, default=entropy_default,
                       help="entropy above which detections become unknown; 'none' disables")
        p.add_argument("--iou", type=_unit_interval, default=0.5)
        p.add_argument("--recall-level", type=_unit_interval, default=0.8)

    def objectness_flag(p):
        p.add_argument("--objectness-threshold", type=_optional_real, default=0.5,
                       help="minimum objectness probability for a proposal to be kept; 'none' keeps all")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, seed=True, sets=True, out_required=True)

    p = sub.add_parser("train", help="train the toy detector on a dataset file")
    p.add_argument("--data", required=True)
    common(p, seed=True, sets=True, out_required=True)

    p = sub.add_parser("evaluate", help="predict on a dataset's test split and report metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--save-dets", help="also write the detections and ground truth in record format")
    common(p)
    eval_flags(p, 0.85)
    objectness_flag(p)

    p = sub.add_parser("metrics", help="score a detection file against a ground-truth file")
    p.add_argument("--dets", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--embeddings", help="embedding file whose class order fixes label indices")
    common(p)
    eval_flags(p, None)

    p = sub.add_parser("ablate", help="run the eight-case module ablation")
    common(p, seed=True, sets=True)
    eval_flags(p, 0.85)
    objectness_flag(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--saturated-trials", type=int, default=4)
    p.add_argument("--out")
    return parser


def _require_files(args, names: Sequence[str]) -> None:
    for name in names:
        path = getattr(args, name, None)
        if path is not None and not os.path.isfile(path):
            raise UsageError(f"--{name.replace('_', '-')}: no such file {path!r}")


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _emit(args, text: str) -> None:
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    spec = dataclasses.replace(apply_overrides(args.sets, ["data"])["data"], seed=args.seed)
    data = generate_dataset(spec)
    _emit(args, format_dataset(data, spec))
    return EXIT_OK


def cmd_train(args) -> int:
    _require_files(args, ["data"])
    cfg = apply_overrides(args.sets, ["train", "loss"])["train"]
    cfg = dataclasses.replace(cfg, seed=args.seed)
    data, _ = parse_dataset(_read(args.data))
    model = train_on(data.train, data.table, cfg)
    _emit(args, format_model(model))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require_files(args, ["data", "model"])
    data, spec = parse_dataset(_read(args.data))
    model = parse_model(_read(args.model))
    dets = predict_split(model, data.test, args.entropy_threshold, args.objectness_threshold)
    gts = ground_truth(data.test)
    report = evaluate(dets, gts, args.iou, args.recall_level)
    if args.save_dets:
        atomic_write(args.save_dets, format_records(dets, gts, spec.known_classes))
    _emit(args, emit_report(report, classes=spec.known_classes))
    return EXIT_OK


def cmd_metrics(args) -> int:
    _require_files(args, ["dets", "gts", "embeddings"])
    classes = None
    if args.embeddings:
        classes = list(load_embeddings(_read(args.embeddings)).names)
    if classes is None:
        # take the class order from the detection file, falling back to the union of names
        det_text, gt_text = _read(args.dets), _read(args.gts)
        _, _, classes = parse_records(det_text + "\n" + gt_text)
    dets, _, _ = parse_records(_read(args.dets), classes)
    _, gts, _ = parse_records(_read(args.gts), classes)
    report = evaluate(dets, gts, args.iou, args.recall_level, args.entropy_threshold)
    _emit(args, emit_report(report, classes=classes))
    return EXIT_OK


def cmd_ablate(args) -> int:
    configs = apply_overrides(args.sets, ["data", "train", "loss"])
    spec = dataclasses.replace(configs["data"], seed=args.seed)
    cfg = dataclasses.replace(configs["train"], seed=args.seed)
    rows = ablate(spec, cfg, args.entropy_threshold, args.iou, args.recall_level, args.objectness_threshold)
    _emit(args, format_ablation(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1 or not 0 <= args.saturated_trials <= args.trials:
        raise UsageError("--trials must be >= 1 and --saturated-trials within [0, trials]")
    results = run_suite(args.seed, args.trials, args.saturated_trials)
    _emit(args, format_gradcheck(results))
    ok = all(t.passed() for trials in results.values() for t in trials)
    return EXIT_OK if ok else EXIT_DOMAIN


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "metrics": cmd_metrics,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, EmbeddingFormatError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
