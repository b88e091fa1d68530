"""Line-oriented text formats: detections/ground truth, reports, datasets, checkpoints.

Every writer emits floats with ``repr`` (or fixed decimals for reports) so
that output bytes depend only on the values written.
"""
from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .embeddings import ClassEmbeddingTable
from .geometry import Box, DegenerateBoxError
from .metrics import UNKNOWN, Detection, EvalReport, GroundTruthObject

UNKNOWN_NAME = "__unknown__"
REPORT_HEADER = "WI AOSE mAP_k AP_u HMP"

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed input file; the message names the offending line."""


def atomic_write(path: PathLike, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file in the same directory and a rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        # mkstemp creates 0600 files; use the mode an ordinary open() would give
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def _floats(fields: Sequence[str], lineno: int) -> list[float]:
    try:
        return [float(f) for f in fields]
    except ValueError as exc:
        raise FormatError(f"line {lineno}: {exc}") from None


def _box(fields: Sequence[str], lineno: int) -> Box:
    try:
        return Box(*_floats(fields, lineno))
    except DegenerateBoxError as exc:
        raise FormatError(f"line {lineno}: {exc}") from None


# ---------------------------------------------------------------------------
# detections and ground truth


def _label_name(label: int, classes: Sequence[str]) -> str:
    if label == UNKNOWN:
        return UNKNOWN_NAME
    if not 0 <= label < len(classes):
        raise FormatError(f"label index {label} has no class name")
    return classes[label]


def format_records(
    dets: Iterable[Detection] = (),
    gts: Iterable[GroundTruthObject] = (),
    classes: Sequence[str] = (),
) -> str:
    """``D``/``G`` records preceded by a ``# classes`` line fixing the label order."""
    lines = ["# classes " + " ".join(classes)] if classes else []
    for d in dets:
        fields = ["D", str(d.image_id), _label_name(d.label, classes), _fmt(d.score), *map(_fmt, d.box.as_tuple())]
        if d.class_probs is not None:
            fields += [_fmt(p) for p in d.class_probs]
        lines.append(" ".join(fields))
    for g in gts:
        lines.append(" ".join(["G", str(g.image_id), _label_name(g.label, classes), *map(_fmt, g.box.as_tuple())]))
    return "\n".join(lines) + "\n"


def parse_records(
    text: str, classes: Optional[Sequence[str]] = None
) -> tuple[list[Detection], list[GroundTruthObject], list[str]]:
    """Parse ``D``/``G`` records.

    The known-class order comes from ``classes`` if given, else from a
    ``# classes`` directive, else from the sorted set of names in the file.
    Other ``#`` lines and blank lines are ignored.
    """
    raw: list[tuple[int, list[str]]] = []
    directive: Optional[list[str]] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0].startswith("#"):
            if parts[0] == "#" and len(parts) > 1 and parts[1] == "classes":
                directive = parts[2:]
            continue
        if parts[0] not in ("D", "G"):
            raise FormatError(f"line {lineno}: unknown record type {parts[0]!r}")
        raw.append((lineno, parts))

    if classes is None:
        if directive is not None:
            classes = directive
        else:
            classes = sorted({p[2] for _, p in raw if p[2] != UNKNOWN_NAME})
    classes = list(classes)
    if len(set(classes)) != len(classes):
        raise FormatError("duplicate class names in the class list")
    index = {n: i for i, n in enumerate(classes)}

    def label_of(name: str, lineno: int) -> int:
        if name == UNKNOWN_NAME:
            return UNKNOWN
        if name not in index:
            raise FormatError(f"line {lineno}: class {name!r} is not in the class list")
        return index[name]

    dets, gts = [], []
    for lineno, p in raw:
        if p[0] == "D":
            if len(p) < 8:
                raise FormatError(f"line {lineno}: detection record needs at least 8 fields, got {len(p)}")
            score = _floats(p[3:4], lineno)[0]
            probs = tuple(_floats(p[8:], lineno)) or None
            try:
                dets.append(Detection(p[1], _box(p[4:8], lineno), label_of(p[2], lineno), score, probs))
            except ValueError as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(f"line {lineno}: {exc}") from None
        else:
            if len(p) != 7:
                raise FormatError(f"line {lineno}: ground-truth record needs 7 fields, got {len(p)}")
            gts.append(GroundTruthObject(p[1], _box(p[3:7], lineno), label_of(p[2], lineno)))
    return dets, gts, classes


# ---------------------------------------------------------------------------
# evaluation reports


def emit_report(report: EvalReport, sink=None, classes: Optional[Sequence[str]] = None) -> str:
    """Header, one value row, then ``class AP`` lines and an optional flags line.

    Returns the text; when ``sink`` is given it is also written there.
    """
    lines = [
        REPORT_HEADER,
        f"{report.wi:.2f} {int(report.aose)} {report.map_k:.2f} {report.ap_u:.2f} {report.hmp:.2f}",
        "class AP",
    ]
    for label in sorted(report.per_class_ap):
        name = classes[label] if classes is not None and 0 <= label < len(classes) else str(label)
        lines.append(f"{name} {report.per_class_ap[label]:.2f}")
    if report.flags:
        lines.append("flags " + " ".join(report.flags))
    text = "\n".join(lines) + "\n"
    if sink is not None:
        sink.write(text)
    return text


def parse_report(text: str, classes: Optional[Sequence[str]] = None) -> EvalReport:
    """Inverse of :func:`emit_report`; per-class keys are indices into ``classes`` or integer names."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3 or lines[0].split() != REPORT_HEADER.split():
        raise FormatError(f"line 1: expected header {REPORT_HEADER!r}")
    row = lines[1].split()
    if len(row) != 5:
        raise FormatError(f"line 2: expected 5 values, got {len(row)}")
    wi, map_k, ap_u, hmp_ = _floats([row[0], row[2], row[3], row[4]], 2)
    try:
        aose_ = int(row[1])
    except ValueError:
        raise FormatError(f"line 2: AOSE {row[1]!r} is not an integer") from None
    if lines[2].split() != ["class", "AP"]:
        raise FormatError("line 3: expected 'class AP'")
    index = {n: i for i, n in enumerate(classes)} if classes is not None else None
    per_class, flags = {}, []
    for lineno, line in enumerate(lines[3:], start=4):
        parts = line.split()
        if parts[0] == "flags":
            flags = parts[1:]
            continue
        if len(parts) != 2:
            raise FormatError(f"line {lineno}: expected '<class> <AP>'")
        if index is not None:
            if parts[0] not in index:
                raise FormatError(f"line {lineno}: unknown class {parts[0]!r}")
            key = index[parts[0]]
        else:
            try:
                key = int(parts[0])
            except ValueError:
                raise FormatError(f"line {lineno}: class {parts[0]!r} needs a class list to resolve") from None
        per_class[key] = _floats(parts[1:], lineno)[0]
    return EvalReport(per_class, map_k, ap_u, wi, aose_, hmp_, flags)


# ---------------------------------------------------------------------------
# synthetic datasets


def format_dataset(data, spec) -> str:
    """Serialise a generated dataset together with the spec that produced it.

    Layout: ``dataset 1``, ``spec <json>``, the embedding table as ``E`` lines,
    then per scene an ``S <split> <image_id>`` line followed by its ``O``
    (object) and ``P`` (proposal) lines.
    """
    lines = ["dataset 1", "spec " + json.dumps(dataclasses.asdict(spec), sort_keys=True)]
    lines.append(f"dim {data.table.dim}")
    for name, vec in zip(data.table.names, data.table.vectors):
        lines.append("E " + name + " " + " ".join(map(_fmt, vec)))
    for split, scenes in (("train", data.train), ("test", data.test)):
        for scene in scenes:
            lines.append(f"S {split} {scene.image_id}")
            for obj in scene.objects:
                lines.append(" ".join(["O", str(obj.gt.label), obj.class_name,
                                       *map(_fmt, obj.gt.box.as_tuple()), *map(_fmt, obj.latent)]))
            for p in scene.proposals:
                lines.append(" ".join(["P", "1" if p.is_object else "0", str(p.object_index),
                                       *map(_fmt, p.box.as_tuple()), *map(_fmt, p.feature)]))
    return "\n".join(lines) + "\n"


def parse_dataset(text: str):
    """Inverse of :func:`format_dataset`; returns ``(SyntheticDataset, DatasetSpec)``."""
    from .harness.dataset import DatasetSpec, Proposal, SceneObject, SyntheticDataset, SyntheticScene

    lines = text.splitlines()
    if not lines or lines[0].strip() != "dataset 1":
        raise FormatError("line 1: expected 'dataset 1'")
    if len(lines) < 3 or not lines[1].startswith("spec "):
        raise FormatError("line 2: expected 'spec <json>'")
    try:
        spec = DatasetSpec(**json.loads(lines[1][5:]))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"line 2: {exc}") from None
    dim_parts = lines[2].split()
    if len(dim_parts) != 2 or dim_parts[0] != "dim":
        raise FormatError("line 3: expected 'dim <int>'")
    dim = int(dim_parts[1])

    names, vecs = [], []
    splits: dict[str, list] = {"train": [], "test": []}
    scene = None
    for lineno, line in enumerate(lines[3:], start=4):
        p = line.split()
        if not p:
            continue
        tag = p[0]
        if tag == "E":
            if len(p) != 2 + dim:
                raise FormatError(f"line {lineno}: embedding needs {dim} values")
            names.append(p[1])
            vecs.append(_floats(p[2:], lineno))
        elif tag == "S":
            if len(p) != 3 or p[1] not in splits:
                raise FormatError(f"line {lineno}: expected 'S <train|test> <image_id>'")
            scene = SyntheticScene(p[2], [], [])
            splits[p[1]].append(scene)
        elif tag in ("O", "P"):
            if scene is None:
                raise FormatError(f"line {lineno}: record before any scene line")
            if len(p) != 7 + spec.feature_dim:
                raise FormatError(f"line {lineno}: expected {7 + spec.feature_dim} fields, got {len(p)}")
            box = _box(p[3:7], lineno)
            vec = np.array(_floats(p[7:], lineno))
            if tag == "O":
                label = int(p[1])
                scene.objects.append(SceneObject(GroundTruthObject(scene.image_id, box, label), vec, p[2]))
            else:
                scene.proposals.append(Proposal(box, vec, p[1] == "1", int(p[2])))
        else:
            raise FormatError(f"line {lineno}: unknown record type {tag!r}")
    if not names:
        raise FormatError("no embedding records")
    table = ClassEmbeddingTable(names, vecs)
    return SyntheticDataset(splits["train"], splits["test"], table), spec


# ---------------------------------------------------------------------------
# model checkpoints


def format_model(model) -> str:
    """``model 1 depth=<d> rpn_on_projected=<0|1>``, one ``W`` line per tensor, then ``H`` history lines."""
    lines = [f"model 1 depth={model.depth} rpn_on_projected={int(model.rpn_on_projected)}"]
    for key in sorted(model.params):
        arr = model.params[key]
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"W {key} {shape} " + " ".join(map(_fmt, arr.reshape(-1))))
    if model.history:
        keys = list(model.history[0])
        lines.append("history " + " ".join(keys))
        for h in model.history:
            lines.append("H " + " ".join(str(h[k]) if k == "iteration" else _fmt(h[k]) for k in keys))
    return "\n".join(lines) + "\n"


def parse_model(text: str):
    from .harness.detector import ToyDetector

    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[:2] != ["model", "1"]:
        raise FormatError("line 1: expected 'model 1 depth=<d> rpn_on_projected=<0|1>'")
    try:
        opts = dict(f.split("=", 1) for f in head[2:])
        depth = int(opts["depth"])
        rpn_on_projected = opts["rpn_on_projected"] == "1"
    except (KeyError, ValueError):
        raise FormatError("line 1: bad model options") from None
    params, history, hkeys = {}, [], None
    for lineno, line in enumerate(lines[1:], start=2):
        p = line.split()
        if not p:
            continue
        if p[0] == "W":
            try:
                shape = tuple(int(s) for s in p[2].split("x"))
            except (IndexError, ValueError):
                raise FormatError(f"line {lineno}: bad tensor shape") from None
            values = _floats(p[3:], lineno)
            if len(values) != int(np.prod(shape)):
                raise FormatError(f"line {lineno}: {p[1]} expects {int(np.prod(shape))} values, got {len(values)}")
            params[p[1]] = np.array(values).reshape(shape)
        elif p[0] == "history":
            hkeys = p[1:]
        elif p[0] == "H":
            if hkeys is None or len(p) != len(hkeys) + 1:
                raise FormatError(f"line {lineno}: history row does not match the history header")
            row = {k: (int(v) if k == "iteration" else float(v)) for k, v in zip(hkeys, p[1:])}
            history.append(row)
        else:
            raise FormatError(f"line {lineno}: unknown record type {p[0]!r}")
    for key in ["cls.W", "cls.b", "reg.W", "reg.b", "obj.W", "obj.b", "ctr.W", "ctr.b"] + [
        f"proj.{i}.{t}" for i in range(depth) for t in "Wb"
    ]:
        if key not in params:
            raise FormatError(f"checkpoint is missing tensor {key!r}")
    for key, arr in params.items():
        if not np.isfinite(arr).all():
            raise FormatError(f"tensor {key!r} has non-finite values")
    return ToyDetector(params, depth, rpn_on_projected, history)


# ---------------------------------------------------------------------------
# ablation and gradient-check tables

ABLATION_HEADER = "case SC CD OF WI AOSE mAP_k AP_u HMP first_loss last_loss"
GRADCHECK_HEADER = "loss trials max_rel_error max_rel_error_saturated excluded status"


def format_ablation(rows) -> str:
    lines = [ABLATION_HEADER]
    for r in rows:
        rep = r.report
        lines.append(
            f"{r.name} {int(r.enable_sc)} {int(r.enable_cd)} {int(r.enable_of)} "
            f"{rep.wi:.2f} {int(rep.aose)} {rep.map_k:.2f} {rep.ap_u:.2f} {rep.hmp:.2f} "
            f"{r.first_loss:.2f} {r.last_loss:.2f}"
        )
    return "\n".join(lines) + "\n"


def parse_ablation(text: str) -> list[dict]:
    """Rows of an ablation table as dicts keyed by the header names."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split() != ABLATION_HEADER.split():
        raise FormatError(f"line 1: expected header {ABLATION_HEADER!r}")
    keys = ABLATION_HEADER.split()
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        p = line.split()
        if len(p) != len(keys):
            raise FormatError(f"line {lineno}: expected {len(keys)} fields, got {len(p)}")
        try:
            row = {"case": p[0], "SC": p[1] == "1", "CD": p[2] == "1", "OF": p[3] == "1", "AOSE": int(p[5])}
        except ValueError:
            raise FormatError(f"line {lineno}: AOSE must be an integer") from None
        for k, v in zip(keys, p):
            if k not in row:
                row[k] = _floats([v], lineno)[0]
        rows.append(row)
    return rows


def format_gradcheck(results, tol: float = 1e-4, saturated_tol: float = 1e-3) -> str:
    """One line per loss: worst errors in the normal and saturated regimes and a pass/fail status."""
    lines = [GRADCHECK_HEADER]
    for name, trials in results.items():
        normal = [t.result.max_rel_error for t in trials if not t.saturated] or [0.0]
        sat = [t.result.max_rel_error for t in trials if t.saturated] or [0.0]
        excluded = sum(len(t.result.excluded) for t in trials)
        ok = all(t.passed(tol, saturated_tol) for t in trials)
        lines.append(f"{name} {len(trials)} {max(normal):.2e} {max(sat):.2e} {excluded} {'pass' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"


def parse_gradcheck(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split() != GRADCHECK_HEADER.split():
        raise FormatError(f"line 1: expected header {GRADCHECK_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        p = line.split()
        if len(p) != 6 or p[5] not in ("pass", "FAIL"):
            raise FormatError(f"line {lineno}: malformed gradient-check row")
        a, b = _floats(p[2:4], lineno)
        rows.append({"loss": p[0], "trials": int(p[1]), "max_rel_error": a, "max_rel_error_saturated": b,
                     "excluded": int(p[4]), "passed": p[5] == "pass"})
    return rows
