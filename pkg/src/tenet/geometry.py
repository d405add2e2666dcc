"""Axis-aligned box arithmetic in center-size coordinates.

Boxes live in continuous pixel space as (cx, cy, w, h). Corner form
(x0, y0, x1, y1) is derived on demand; nothing in the package stores
corners.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import AlignmentError, DegenerateBoxError, OrderingError, ValidationError

__all__ = [
    "Box",
    "BoxSequence",
    "iou",
    "giou",
    "box_miou",
    "clamp_to_frame",
]


@dataclass(frozen=True)
class Box:
    """One axis-aligned box, center-size parameterization."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"box component {name} is not finite: {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) with x0 < x1 and y0 < y1."""
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


def _intersection(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes. In [0, 1]."""
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: iou minus the non-covered share of the enclosing box.

    Equals iou when one box contains the other; tends to -1 as the boxes
    move infinitely far apart. Range [-1, 1].
    """
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (enclose - union) / enclose


def clamp_to_frame(box: Box, width: int, height: int) -> Box:
    """Clip a box to the frame rectangle [0, width] x [0, height].

    Raises DegenerateBoxError when the clipped box has zero area, i.e. the
    box lies entirely outside the frame (or only touches its border).
    """
    x0, y0, x1, y1 = box.corners()
    x0, x1 = max(0.0, x0), min(float(width), x1)
    y0, y1 = max(0.0, y0), min(float(height), y1)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise DegenerateBoxError(
            f"box {box.to_list()} degenerates to zero area in a {width}x{height} frame"
        )
    return Box.from_corners(x0, y0, x1, y1)


@dataclass(frozen=True)
class BoxSequence:
    """Per-frame boxes of one object prompt within one video.

    Frames are 1-based and strictly increasing. A finalized prompt covers
    1..T contiguously; partial sequences are legal while being assembled.
    """

    video_id: str
    frames: tuple[int, ...]
    boxes: tuple[Box, ...]

    def __post_init__(self):
        if len(self.frames) != len(self.boxes):
            raise ValidationError(
                f"{len(self.frames)} frame indices vs {len(self.boxes)} boxes"
            )
        prev = 0
        for f in self.frames:
            if f <= prev:
                raise OrderingError(f"frame indices must strictly increase, got {list(self.frames)}")
            prev = f

    def __len__(self) -> int:
        return len(self.frames)

    @classmethod
    def from_pairs(cls, video_id: str, pairs) -> "BoxSequence":
        pairs = list(pairs)
        return cls(video_id, tuple(f for f, _ in pairs), tuple(b for _, b in pairs))

    def box_at(self, frame: int) -> Box:
        i = self.frames.index(frame)
        return self.boxes[i]


def box_miou(a: BoxSequence, b: BoxSequence) -> float:
    """Mean per-frame IoU of two aligned box sequences.

    Both sequences must belong to the same video and cover exactly the
    same frame set; anything else raises AlignmentError.
    """
    if a.video_id != b.video_id:
        raise AlignmentError(f"video ids differ: {a.video_id!r} vs {b.video_id!r}")
    if a.frames != b.frames:
        raise AlignmentError(
            f"frame coverage differs: {len(a.frames)} frames vs {len(b.frames)} frames"
        )
    if not a.frames:
        raise AlignmentError("empty sequences have no mean IoU")
    total = 0.0
    for ba, bb in zip(a.boxes, b.boxes):
        total += iou(ba, bb)
    return total / len(a.frames)
