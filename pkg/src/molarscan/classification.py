"""Stage 2: normal vs. pericoronitis scoring of ROI patches."""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ModelError, VocabularyError
from .graph import CLASSIFIER, forward

DEFAULT_THRESHOLD = 0.5


class CaseLabel(enum.Enum):
    NORMAL = "normal"
    PERICORONITIS = "pericoronitis"

    @classmethod
    def parse(cls, text):
        for member in cls:
            if str(text).lower() == member.value:
                return member
        raise VocabularyError(f"unknown case label {text!r} (expected normal or pericoronitis)")


@dataclass(frozen=True)
class ClassScores:
    p_normal: float
    p_pericoronitis: float

    def __post_init__(self):
        for p in (self.p_normal, self.p_pericoronitis):
            if not 0.0 <= p <= 1.0:
                raise InputError(f"probability {p} outside [0, 1]")
        if abs(self.p_normal + self.p_pericoronitis - 1.0) > 1e-9:
            raise InputError("class scores must sum to 1")


def preprocess(roi):
    """Standardize a patch to ``(pixel - 0.5) / 0.5`` as a 1x1xHxW tensor."""
    pixels = np.asarray(getattr(roi, "pixels", roi), dtype=np.float64)
    return ((pixels - 0.5) / 0.5)[None, None]


def softmax(logits):
    z0, z1 = (float(v) for v in np.ravel(logits))
    m = max(z0, z1)
    e0, e1 = math.exp(z0 - m), math.exp(z1 - m)
    total = e0 + e1
    p1 = e1 / total
    return ClassScores(1.0 - p1, p1)


def decide(scores, threshold=DEFAULT_THRESHOLD):
    """Pericoronitis iff its probability reaches the threshold (inclusive)."""
    if not 0.0 < threshold < 1.0:
        raise InputError(f"decision threshold {threshold} outside (0, 1)")
    return CaseLabel.PERICORONITIS if scores.p_pericoronitis >= threshold else CaseLabel.NORMAL


def logits(model, roi):
    if model.kind != CLASSIFIER:
        raise ModelError(f"model {model.name} is a {model.kind}, not a classifier", stage="classify")
    (out,) = forward(model, preprocess(roi)).values()
    return out.ravel()


def classify(model, roi, threshold=DEFAULT_THRESHOLD):
    scores = softmax(logits(model, roi))
    return scores, decide(scores, threshold)


def classification_json(scores, label, threshold):
    return {
        "p_normal": scores.p_normal,
        "p_pericoronitis": scores.p_pericoronitis,
        "label": label.value,
        "threshold": threshold,
    }
