"""Axis-aligned boxes in ``(x, y, w, h)`` form, IoU and box-delta coding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidBox, ValidationError, ZeroSizeAnchor


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite box coordinates {vals}")
        if self.w < 0 or self.h < 0:
            raise InvalidBox(f"negative box size {vals}")

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(float(x1), float(y1), float(x2 - x1), float(y2 - y1))

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Box":
        if len(values) != 4:
            raise InvalidBox(f"bbox needs 4 values, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def cx(self) -> float:
        return self.x + 0.5 * self.w

    @property
    def cy(self) -> float:
        return self.y + 0.5 * self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    def xyxy(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.x2, self.y2


@dataclass(frozen=True)
class BoxDelta:
    """Center offsets scaled by anchor size, log size ratios."""

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dw, self.dh)):
            raise ValidationError("non-finite box delta")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


@dataclass(frozen=True)
class ImageExtent:
    width: int
    height: int

    def __post_init__(self) -> None:
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValidationError(f"image extent must be integral, got {self.width}x{self.height}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image extent must be positive, got {self.width}x{self.height}")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner differences, so iou(a, a) is exactly 1
    union = (a.x2 - a.x) * (a.y2 - a.y) + (b.x2 - b.x) * (b.y2 - b.y) - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def _check_anchor(anchor: Box) -> None:
    if anchor.w <= 0 or anchor.h <= 0:
        raise ZeroSizeAnchor(f"anchor has zero size: {anchor}")


def encode_deltas(anchor: Box, target: Box) -> BoxDelta:
    _check_anchor(anchor)
    if target.w <= 0 or target.h <= 0:
        raise ZeroSizeAnchor(f"target has zero size: {target}")
    return BoxDelta(
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        math.log(target.w / anchor.w),
        math.log(target.h / anchor.h),
    )


def decode_deltas(anchor: Box, delta: BoxDelta) -> Box:
    _check_anchor(anchor)
    cx = anchor.cx + delta.dx * anchor.w
    cy = anchor.cy + delta.dy * anchor.h
    w = anchor.w * math.exp(delta.dw)
    h = anchor.h * math.exp(delta.dh)
    if not (math.isfinite(w) and math.isfinite(h)):
        raise ValidationError(f"delta {delta} overflows anchor {anchor}")
    return Box(cx - 0.5 * w, cy - 0.5 * h, w, h)


def clip(b: Box, extent: ImageExtent) -> Box:
    """Clamp ``b`` to ``[0, width] x [0, height]``.

    A box entirely outside collapses to a zero-area box on the nearest edge.
    """
    x1 = min(max(b.x, 0.0), extent.width)
    y1 = min(max(b.y, 0.0), extent.height)
    x2 = min(max(b.x2, 0.0), extent.width)
    y2 = min(max(b.y2, 0.0), extent.height)
    if b.x >= 0 and b.y >= 0 and b.x2 <= extent.width and b.y2 <= extent.height:
        return b
    return Box(x1, y1, max(0.0, x2 - x1), max(0.0, y2 - y1))


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """Stack boxes into an ``(n, 4)`` float64 array of ``x, y, w, h``."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([(b.x, b.y, b.w, b.h) for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized IoU between two ``(n, 4)`` / ``(m, 4)`` xywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    union = ((ax2 - ax1) * (ay2 - ay1)) + ((bx2 - bx1) * (by2 - by1))[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(overlap & (union > 0), inter / union, 0.0)
    return np.minimum(out, 1.0)


def pairwise_iou(A: Sequence[Box], B: Sequence[Box]) -> np.ndarray:
    return iou_matrix(boxes_to_array(A), boxes_to_array(B))
