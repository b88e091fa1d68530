"""Box arithmetic, IoU and centerness targets for proposal/ground-truth pairs."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in corner form."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DegenerateBoxError(
                f"box needs positive width and height, got {self.as_tuple()}"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class CenterBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateBoxError(f"center box needs w, h > 0, got w={self.w} h={self.h}")


@dataclass(frozen=True)
class BoxDeltas:
    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"non-finite box deltas {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh)


def to_center(b: Box) -> CenterBox:
    w = b.x2 - b.x1
    h = b.y2 - b.y1
    if w <= 0 or h <= 0:
        raise DegenerateBoxError(f"cannot convert degenerate box {b.as_tuple()}")
    return CenterBox((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0, w, h)


def to_corners(c: CenterBox) -> Box:
    return Box(c.cx - c.w / 2.0, c.cy - c.h / 2.0, c.cx + c.w / 2.0, c.cy + c.h / 2.0)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_deltas(gt: CenterBox, p: CenterBox) -> BoxDeltas:
    """Offsets of ``gt`` relative to proposal ``p``, normalised by the proposal size."""
    return BoxDeltas(
        (gt.cx - p.cx) / p.w,
        (gt.cy - p.cy) / p.h,
        math.log(gt.w / p.w),
        math.log(gt.h / p.h),
    )


def apply_deltas(p: CenterBox, d: BoxDeltas) -> CenterBox:
    return CenterBox(p.cx + d.dx * p.w, p.cy + d.dy * p.h, p.w * math.exp(d.dw), p.h * math.exp(d.dh))


def centerness_target(d: BoxDeltas, eps: float = 1e-8) -> Optional[float]:
    """Centerness in [0, 1], or None when any delta is negative.

    Both ratios are eps-smoothed, so all-zero deltas give exactly 1.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if d.dx < 0 or d.dy < 0 or d.dw < 0 or d.dh < 0:
        return None
    r_center = (min(d.dx, d.dy) + eps) / (max(d.dx, d.dy) + eps)
    r_size = (min(d.dw, d.dh) + eps) / (max(d.dw, d.dh) + eps)
    return min(1.0, max(0.0, math.sqrt(r_center * r_size)))
