"""Bounding-box arithmetic.

All functions here are pure. Boxes are axis-aligned rectangles in pixel
coordinates with the origin at the top-left corner, stored as
``(x_min, y_min, x_max, y_max)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

from eggloc.errors import DegenerateBoxError, ValidationError

__all__ = [
    "BoundingBox",
    "MatchRecord",
    "MatchStatus",
    "area",
    "clamp_to_image",
    "intersection",
    "iou",
    "match_boxes",
]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with strictly positive area and non-negative coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = []
        for name in ("x_min", "y_min", "x_max", "y_max"):
            value = getattr(self, name)
            try:
                value = float(value)
            except (TypeError, ValueError):
                raise ValidationError(f"{name} must be a real number, got {value!r}") from None
            if not math.isfinite(value):
                raise ValidationError(f"{name} must be finite, got {value!r}")
            if value < 0:
                raise ValidationError(f"{name} must be >= 0, got {value!r}")
            object.__setattr__(self, name, value)
            coords.append(value)
        if not (coords[0] < coords[2] and coords[1] < coords[3]):
            raise DegenerateBoxError(f"box has no area: {tuple(coords)}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_xywh(self) -> list[float]:
        """COCO-style ``[x, y, w, h]``."""
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> BoundingBox:
        return cls(x, y, x + w, y + h)


BoxLike = Union[BoundingBox, Sequence[float]]


def _coords(box: BoxLike) -> tuple[float, float, float, float]:
    if isinstance(box, BoundingBox):
        return box.as_tuple()
    if len(box) != 4:
        raise ValidationError(f"expected 4 coordinates, got {len(box)}")
    x0, y0, x1, y1 = (float(c) for c in box)
    if not all(math.isfinite(c) for c in (x0, y0, x1, y1)):
        raise ValidationError(f"coordinates must be finite: {tuple(box)}")
    return x0, y0, x1, y1


def area(box: BoundingBox) -> float:
    """Area of ``box`` in square pixels."""
    if not isinstance(box, BoundingBox):
        box = BoundingBox(*box)
    return box.width * box.height


def intersection(a: BoundingBox, b: BoundingBox) -> float:
    """Overlap area of two boxes, 0 when they are disjoint or only touch."""
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes.

    Symmetric in its arguments and always within ``[0, 1]``.
    """
    if not isinstance(a, BoundingBox):
        a = BoundingBox(*a)
    if not isinstance(b, BoundingBox):
        b = BoundingBox(*b)
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    union = area(a) + area(b) - inter
    return min(1.0, inter / union)


def clamp_to_image(box: BoxLike, width: int, height: int) -> BoundingBox:
    """Clamp ``box`` into ``[0, width] x [0, height]``.

    ``box`` may be a :class:`BoundingBox` or raw coordinates, which are allowed
    to be negative or exceed the image (that is the point of clamping).

    Raises:
        ValidationError: if ``width`` or ``height`` is not positive.
        DegenerateBoxError: if nothing of the box is left inside the image.
    """
    if width <= 0 or height <= 0:
        raise ValidationError(f"image size must be positive, got {width}x{height}")
    x0, y0, x1, y1 = _coords(box)
    cx0 = min(max(x0, 0.0), width)
    cy0 = min(max(y0, 0.0), height)
    cx1 = min(max(x1, 0.0), width)
    cy1 = min(max(y1, 0.0), height)
    if not (cx0 < cx1 and cy0 < cy1):
        raise DegenerateBoxError(
            f"box {(x0, y0, x1, y1)} has no area inside a {width}x{height} image"
        )
    return BoundingBox(cx0, cy0, cx1, cy1)


class MatchStatus(str, Enum):
    MATCHED = "matched"
    MISSED_GT = "missed_gt"
    FALSE_POSITIVE = "false_positive"


@dataclass(frozen=True)
class MatchRecord:
    """Outcome of pairing one ground-truth box and/or one prediction."""

    gt_index: Optional[int]
    pred_index: Optional[int]
    iou: float
    status: MatchStatus

    def __post_init__(self):
        status = MatchStatus(self.status)
        object.__setattr__(self, "status", status)
        if not 0.0 <= self.iou <= 1.0:
            raise ValidationError(f"iou out of range: {self.iou}")
        if status is MatchStatus.MATCHED:
            if self.gt_index is None or self.pred_index is None or self.iou <= 0:
                raise ValidationError("matched record needs both indices and iou > 0")
        elif status is MatchStatus.MISSED_GT:
            if self.gt_index is None or self.pred_index is not None or self.iou != 0:
                raise ValidationError("missed_gt record needs gt_index only and iou 0")
        elif self.pred_index is None or self.gt_index is not None or self.iou != 0:
            raise ValidationError("false_positive record needs pred_index only and iou 0")


def match_boxes(
    preds: Sequence[BoundingBox], gts: Sequence[BoundingBox]
) -> list[MatchRecord]:
    """Greedy one-to-one matching of predictions to ground truth.

    Repeatedly takes the remaining (prediction, ground truth) pair with the
    highest positive IoU. Ties are broken by prediction index, then ground
    truth index, so the result is deterministic.

    Returns:
        One record per ground-truth box, in ground-truth order, followed by a
        ``false_positive`` record for every unmatched prediction in prediction
        order.
    """
    preds = [p if isinstance(p, BoundingBox) else BoundingBox(*p) for p in preds]
    gts = [g if isinstance(g, BoundingBox) else BoundingBox(*g) for g in gts]

    candidates = []
    for pi, p in enumerate(preds):
        for gi, g in enumerate(gts):
            score = iou(p, g)
            if score > 0.0:
                candidates.append((-score, pi, gi))
    candidates.sort()

    gt_to_pred: dict[int, tuple[int, float]] = {}
    used_preds: set[int] = set()
    for neg_score, pi, gi in candidates:
        if pi in used_preds or gi in gt_to_pred:
            continue
        gt_to_pred[gi] = (pi, -neg_score)
        used_preds.add(pi)

    records = []
    for gi in range(len(gts)):
        if gi in gt_to_pred:
            pi, score = gt_to_pred[gi]
            records.append(MatchRecord(gi, pi, score, MatchStatus.MATCHED))
        else:
            records.append(MatchRecord(gi, None, 0.0, MatchStatus.MISSED_GT))
    for pi in range(len(preds)):
        if pi not in used_preds:
            records.append(MatchRecord(None, pi, 0.0, MatchStatus.FALSE_POSITIVE))
    return records
