"""Slow, independent reference implementations used as test oracles.

Nothing here imports the package's metric code. Matching is recomputed from
scratch for every prefix of the ranked detection list, and AP is the area
under the interpolated precision envelope computed by brute force over all
cut points.
"""
from __future__ import annotations

UNKNOWN = -1


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def ranked(dets, keep):
    """Indices of detections passing ``keep``, by descending score, ties in input order."""
    idx = [i for i, d in enumerate(dets) if keep(d)]
    for a in range(len(idx)):
        for b in range(len(idx) - 1 - a):
            if dets[idx[b]]["score"] < dets[idx[b + 1]]["score"]:
                idx[b], idx[b + 1] = idx[b + 1], idx[b]
    return idx


def greedy_claims(dets, gts, order, gt_ok, thr):
    """Walk ``order``; each detection claims the best unclaimed eligible GT in its image.

    Returns the claimed GT index (or None) per position of ``order``.
    """
    claimed = set()
    out = []
    for i in order:
        d = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if j in claimed or g["image"] != d["image"] or not gt_ok(g):
                continue
            v = box_iou(d["box"], g["box"])
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= thr:
            claimed.add(best)
            out.append(best)
        else:
            out.append(None)
    return out


def pr_points(dets, gts, label, thr):
    """(recall, precision) after each prefix of the ranked list, matched from scratch per prefix."""
    order = ranked(dets, lambda d: d["label"] == label)
    n_gt = sum(1 for g in gts if g["label"] == label)
    points = []
    for cut in range(1, len(order) + 1):
        claims = greedy_claims(dets, gts, order[:cut], lambda g: g["label"] == label, thr)
        tp = sum(c is not None for c in claims)
        points.append((tp / n_gt, tp / cut))
    return points, order, n_gt


def ap(dets, gts, label, thr=0.5):
    points, _, n_gt = pr_points(dets, gts, label, thr)
    if n_gt == 0:
        raise ValueError("no ground truth")
    area, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            envelope = max(p for rr, p in points if rr >= r)
            area += (r - prev_r) * envelope
            prev_r = r
    return 100.0 * area


def hmp(a, b):
    return 0.0 if a + b == 0 else 2 * a * b / (a + b)


def wi(dets, gts, recall_level=0.8, thr=0.5):
    labels = sorted({g["label"] for g in gts if g["label"] != UNKNOWN})
    pk, pku = [], []
    for c in labels:
        order = ranked(dets, lambda d: d["label"] == c)
        n_gt = sum(1 for g in gts if g["label"] == c)
        for cut in range(1, len(order) + 1):
            claims = greedy_claims(dets, gts, order[:cut], lambda g: g["label"] == c, thr)
            tp = sum(x is not None for x in claims)
            if tp / n_gt >= recall_level:
                fp_u = 0
                for pos, i in enumerate(order[:cut]):
                    if claims[pos] is not None:
                        continue
                    same = [g for g in gts if g["image"] == dets[i]["image"]]
                    if not same:
                        continue
                    ious = [box_iou(dets[i]["box"], g["box"]) for g in same]
                    top = ious.index(max(ious))
                    if ious[top] >= thr and same[top]["label"] == UNKNOWN:
                        fp_u += 1
                fp_k = cut - tp - fp_u
                pk.append(tp / (tp + fp_k))
                pku.append(tp / cut)
                break
    if not pk:
        return None
    return (sum(pk) / len(pk) / (sum(pku) / len(pku)) - 1.0) * 100.0


def aose(dets, gts, thr=0.5, floor=0.05):
    order = ranked(dets, lambda d: d["label"] != UNKNOWN and d["score"] >= floor)
    claims = greedy_claims(dets, gts, order, lambda g: g["label"] == UNKNOWN, thr)
    return sum(c is not None for c in claims)


def evaluate(dets, gts, thr=0.5, recall_level=0.8):
    """Dict with per_class_ap, map_k, ap_u, wi (None if undefined), aose, hmp."""
    labels = sorted({g["label"] for g in gts if g["label"] != UNKNOWN})
    per_class = {c: ap(dets, gts, c, thr) for c in labels}
    map_k = sum(per_class.values()) / len(per_class) if per_class else 0.0
    ap_u = ap(dets, gts, UNKNOWN, thr) if any(g["label"] == UNKNOWN for g in gts) else 0.0
    return {
        "per_class_ap": per_class,
        "map_k": map_k,
        "ap_u": ap_u,
        "wi": wi(dets, gts, recall_level, thr),
        "aose": aose(dets, gts, thr),
        "hmp": hmp(map_k, ap_u),
    }
