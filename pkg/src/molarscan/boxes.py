"""Axis-aligned bounding boxes in corner convention."""

import math
from dataclasses import dataclass

from .errors import InputError


@dataclass(frozen=True)
class BBox:
    """Box ``(x1, y1, x2, y2)`` in pixel units.

    Boxes produced by clamping may collapse to zero width or height;
    ``is_empty`` reports that. Boxes parsed from user input go through
    :meth:`from_list`, which requires a strictly positive extent.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InputError(f"non-finite box coordinates {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise InputError(f"box corners out of order {coords}")

    @classmethod
    def from_list(cls, values):
        if len(values) != 4:
            raise InputError(f"box needs 4 coordinates, got {values!r}")
        box = cls(*(float(v) for v in values))
        if box.is_empty:
            raise InputError(f"box has zero area: {values!r}")
        return box

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    @property
    def is_empty(self):
        return self.x2 <= self.x1 or self.y2 <= self.y1

    def to_list(self):
        return [self.x1, self.y1, self.x2, self.y2]

    def clip(self, width, height):
        return BBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def intersection(self, other):
        w = min(self.x2, other.x2) - max(self.x1, other.x1)
        h = min(self.y2, other.y2) - max(self.y1, other.y1)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h
