"""Stage 1: turn raw detector output into labeled third-molar detections."""

import enum
from dataclasses import dataclass

import numpy as np

from .boxes import BBox
from .errors import InputError, ModelError, VocabularyError
from .imaging import invert_box

DEFAULT_CONF = 0.25
DEFAULT_IOU = 0.45


class _Vocabulary(enum.Enum):
    @classmethod
    def parse(cls, text):
        for member in cls:
            if str(text).lower() in (member.value.lower(), member.name.lower()):
                return member
        allowed = ", ".join(m.value for m in cls)
        raise VocabularyError(f"unknown {cls.__name__.lower()} {text!r} (expected one of {allowed})")


class Quadrant(_Vocabulary):
    UR = "UR"
    UL = "UL"
    LL = "LL"
    LR = "LR"


class Angulation(_Vocabulary):
    """Winter's classification of third-molar angulation."""

    VERTICAL = "vertical"
    MESIOANGULAR = "mesioangular"
    HORIZONTAL = "horizontal"
    DISTOANGULAR = "distoangular"


QUADRANTS = tuple(Quadrant)
ANGULATIONS = tuple(Angulation)


def composite_class(idx):
    """Split a composite label ``4 * quadrant + angulation`` into its parts."""
    if not 0 <= idx < 16:
        raise InputError(f"composite class index {idx} outside 0..15")
    q, a = divmod(int(idx), 4)
    return QUADRANTS[q], ANGULATIONS[a]


def composite_index(quadrant, angulation):
    return 4 * QUADRANTS.index(quadrant) + ANGULATIONS.index(angulation)


@dataclass(frozen=True)
class Detection:
    box: BBox
    quadrant: Quadrant
    angulation: Angulation
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InputError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def class_index(self):
        return composite_index(self.quadrant, self.angulation)

    def to_json(self):
        return {
            "box": self.box.to_list(),
            "quadrant": self.quadrant.value,
            "angulation": self.angulation.value,
            "confidence": self.confidence,
        }

    @classmethod
    def from_json(cls, data):
        try:
            return cls(
                BBox.from_list(data["box"]),
                Quadrant.parse(data["quadrant"]),
                Angulation.parse(data["angulation"]),
                float(data.get("confidence", 1.0)),
            )
        except KeyError as exc:
            raise InputError(f"detection record missing field {exc}") from None


def iou(a, b):
    inter = a.intersection(b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def decode(raw, conf_threshold=DEFAULT_CONF, transform=None):
    """Decode a ``(4 + 16) x N`` detector tensor into detections.

    Rows 0-3 hold ``cx, cy, w, h`` in letterboxed pixels, rows 4-19 the
    per-class scores. Boxes are mapped back through ``transform`` when given;
    boxes that collapse after clamping are dropped.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3 and raw.shape[0] == 1:
        raw = raw[0]
    if raw.ndim != 2 or raw.shape[0] != 20:
        raise InputError(f"raw detector output must be 20 x N, got {raw.shape}")
    if not 0.0 <= conf_threshold <= 1.0:
        raise InputError(f"confidence threshold {conf_threshold} outside [0, 1]")
    if raw.shape[1] == 0:
        return []
    scores = raw[4:]
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ModelError("detector class scores must lie in [0, 1]", stage="detect")
    best = scores.argmax(axis=0)
    conf = scores[best, np.arange(raw.shape[1])]

    out = []
    for n in np.flatnonzero(conf >= conf_threshold):
        cx, cy, w, h = (float(v) for v in raw[:4, n])
        box = BBox.from_center(cx, cy, w, h)
        if transform is not None:
            box = invert_box(box, transform)
        if box.is_empty:
            continue
        quadrant, angulation = composite_class(best[n])
        out.append(Detection(box, quadrant, angulation, float(conf[n])))
    return out


def _rank(dets):
    """Indices by confidence descending, then smaller area, then input order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].box.area, i))


def nms(dets, iou_threshold=DEFAULT_IOU):
    """Greedy class-aware non-maximum suppression."""
    kept = []
    for i in _rank(dets):
        d = dets[i]
        if all(k.class_index != d.class_index or iou(k.box, d.box) < iou_threshold for k in kept):
            kept.append(d)
    return kept


def dedupe_per_quadrant(dets):
    """Keep the most confident detection per quadrant (first one on ties)."""
    best = {}
    for i, d in enumerate(dets):
        if d.quadrant not in best or d.confidence > dets[best[d.quadrant]].confidence:
            best[d.quadrant] = i
    return [dets[i] for i in sorted(best.values())]
