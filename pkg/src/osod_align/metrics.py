"""Open-set detection metrics: AP, mAP_k, AP_u, WI, AOSE, HMP and entropy relabelling.

Labels are integer known-class indices; :data:`UNKNOWN` marks the unknown
class on both detections and ground truth.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Hashable, Iterable, Optional, Sequence

import numpy as np

from .geometry import Box, iou

UNKNOWN = -1
AOSE_SCORE_FLOOR = 0.05


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    box: Box
    label: int
    score: float
    class_probs: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.class_probs is not None:
            probs = tuple(float(p) for p in self.class_probs)
            if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-6:
                raise ValueError("class_probs must be a probability vector")
            object.__setattr__(self, "class_probs", probs)


@dataclass(frozen=True)
class GroundTruthObject:
    image_id: Hashable
    box: Box
    label: int


@dataclass
class MatchResult:
    order: list[int]  # detection indices, descending score
    tp: np.ndarray  # bool, aligned with ``order``
    matched: dict[int, int]  # gt index -> det index
    n_gt: int


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map_k: float
    ap_u: float
    wi: float
    aose: int
    hmp: float
    flags: list[str] = field(default_factory=list)


def entropy(probs: Sequence[float]) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    return -sum(p * math.log(p) for p in probs if p > 0)


def entropy_threshold(dets: Iterable[Detection], threshold: float = 0.85) -> list[Detection]:
    """Relabel detections whose class distribution has entropy above ``threshold``."""
    out = []
    for d in dets:
        if d.class_probs is None:
            raise ValueError(f"detection on image {d.image_id!r} carries no class_probs")
        if entropy(d.class_probs) > threshold:
            d = replace(d, label=UNKNOWN)
        out.append(d)
    return out


def _gts_by_image(gts: Sequence[GroundTruthObject], label: int) -> dict[Hashable, list[int]]:
    by_image: dict[Hashable, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        if g.label == label:
            by_image[g.image_id].append(j)
    return by_image


def _by_score(dets: Sequence[Detection], idx: Iterable[int]) -> list[int]:
    # stable: ties keep input order
    return sorted(idx, key=lambda i: -dets[i].score)


def match_class(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    label: int,
    iou_thresh: float = 0.5,
) -> MatchResult:
    """Greedy score-ordered matching of one label's detections to its ground truth."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    gt_index = _gts_by_image(gts, label)
    n_gt = sum(len(v) for v in gt_index.values())
    order = _by_score(dets, (i for i, d in enumerate(dets) if d.label == label))
    tp = np.zeros(len(order), dtype=bool)
    matched: dict[int, int] = {}
    for rank, i in enumerate(order):
        best_j, best_iou = -1, -1.0
        for j in gt_index.get(dets[i].image_id, ()):
            if j in matched:
                continue
            ov = iou(dets[i].box, gts[j].box)
            if ov > best_iou:
                best_j, best_iou = j, ov
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[best_j] = i
            tp[rank] = True
    return MatchResult(order, tp, matched, n_gt)


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP (percent) from score-ordered TP flags."""
    if n_gt <= 0:
        raise UndefinedMetricError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    rec = ctp / n_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]) * 100.0)


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    label: int,
    iou_thresh: float = 0.5,
) -> float:
    m = match_class(dets, gts, label, iou_thresh)
    return ap_from_flags(m.tp, m.n_gt)


def known_labels(gts: Iterable[GroundTruthObject]) -> list[int]:
    return sorted({g.label for g in gts if g.label != UNKNOWN})


def per_class_ap(dets, gts, iou_thresh: float = 0.5) -> dict[int, float]:
    return {c: average_precision(dets, gts, c, iou_thresh) for c in known_labels(gts)}


def map_known(dets, gts, iou_thresh: float = 0.5) -> float:
    aps = per_class_ap(dets, gts, iou_thresh)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def ap_unknown(dets, gts, iou_thresh: float = 0.5) -> float:
    if not any(g.label == UNKNOWN for g in gts):
        return 0.0
    return average_precision(dets, gts, UNKNOWN, iou_thresh)


def wilderness_impact(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    recall_level: float = 0.8,
    iou_thresh: float = 0.5,
) -> float:
    """Relative precision drop caused by known-class detections on unknown objects."""
    if not 0.0 < recall_level <= 1.0:
        raise ValueError("recall_level must lie in (0, 1]")
    by_image: dict[Hashable, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_image[g.image_id].append(j)

    def best_is_unknown(d: Detection) -> bool:
        # the false positive's highest-IoU ground truth (any label; first on ties)
        best_j, best_iou = -1, -1.0
        for j in by_image.get(d.image_id, ()):
            ov = iou(d.box, gts[j].box)
            if ov > best_iou:
                best_j, best_iou = j, ov
        return best_j >= 0 and best_iou >= iou_thresh and gts[best_j].label == UNKNOWN

    p_closed, p_open = [], []
    for c in known_labels(gts):
        m = match_class(dets, gts, c, iou_thresh)
        tp = fp_k = fp_u = 0
        for rank, i in enumerate(m.order):
            if m.tp[rank]:
                tp += 1
            else:
                if best_is_unknown(dets[i]):
                    fp_u += 1
                else:
                    fp_k += 1
            if tp / m.n_gt >= recall_level:
                p_closed.append(tp / (tp + fp_k))
                p_open.append(tp / (tp + fp_k + fp_u))
                break
    if not p_closed:
        raise UndefinedMetricError(f"no known class reaches recall {recall_level}")
    return (float(np.mean(p_closed)) / float(np.mean(p_open)) - 1.0) * 100.0


def aose(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_thresh: float = 0.5,
    score_floor: float = AOSE_SCORE_FLOOR,
) -> int:
    """Number of unknown objects claimed by a known-class detection."""
    unknown_index = _gts_by_image(gts, UNKNOWN)
    if not unknown_index:
        return 0
    order = _by_score(dets, (i for i, d in enumerate(dets) if d.label != UNKNOWN and d.score >= score_floor))
    taken: set[int] = set()
    for i in order:
        best_j, best_iou = -1, -1.0
        for j in unknown_index.get(dets[i].image_id, ()):
            if j in taken:
                continue
            ov = iou(dets[i].box, gts[j].box)
            if ov > best_iou:
                best_j, best_iou = j, ov
        if best_j >= 0 and best_iou >= iou_thresh:
            taken.add(best_j)
    return len(taken)


def hmp(map_k: float, ap_u: float) -> float:
    if map_k < 0 or ap_u < 0:
        raise ValueError("precisions must be non-negative")
    if map_k + ap_u == 0:
        return 0.0
    return 2.0 * map_k * ap_u / (map_k + ap_u)


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_thresh: float = 0.5,
    recall_level: float = 0.8,
    entropy_thresh: Optional[float] = None,
) -> EvalReport:
    dets = list(dets)
    gts = list(gts)
    if entropy_thresh is not None:
        dets = entropy_threshold(dets, entropy_thresh)
    flags = []
    aps = per_class_ap(dets, gts, iou_thresh)
    map_k = float(np.mean(list(aps.values()))) if aps else 0.0
    if not any(g.label == UNKNOWN for g in gts):
        flags.append("no_unknown_gt")
    ap_u = ap_unknown(dets, gts, iou_thresh)
    try:
        wi = wilderness_impact(dets, gts, recall_level, iou_thresh)
    except UndefinedMetricError:
        wi = 0.0
        flags.append("wi_undefined")
    return EvalReport(
        per_class_ap=aps,
        map_k=map_k,
        ap_u=ap_u,
        wi=wi,
        aose=aose(dets, gts, iou_thresh),
        hmp=hmp(map_k, ap_u),
        flags=flags,
    )
