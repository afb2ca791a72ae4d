"""Detection and classification metrics.

Detection: class-aware greedy matching, 101-point interpolated AP, mAP at
IoU 0.5 and averaged over 0.50:0.05:0.95. Classification: confusion matrix
(pericoronitis is the positive class), per-class precision/recall/F1,
ROC curve and trapezoidal AUC.
"""

import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .classification import CaseLabel
from .detection import iou
from .errors import InputError

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_LEVELS = tuple(i / 100 for i in range(101))


def round_half_up(value, digits=2):
    return float(Decimal(repr(float(value))).quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP))


def _ratio(num, den):
    return num / den if den else 0.0


# -- classification ----------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix2:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise InputError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self):
        """The same matrix with Normal treated as the positive class."""
        return ConfusionMatrix2(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)

    def to_json(self):
        return [[self.tp, self.fn], [self.fp, self.tn]]


def _label(value):
    if isinstance(value, CaseLabel):
        return value
    if isinstance(value, (bool, np.bool_)):
        return CaseLabel.PERICORONITIS if value else CaseLabel.NORMAL
    return CaseLabel.parse(value)


def confusion(preds, truths):
    preds = [_label(p) for p in preds]
    truths = [_label(t) for t in truths]
    if len(preds) != len(truths):
        raise InputError(f"{len(preds)} predictions for {len(truths)} ground-truth labels")
    counts = defaultdict(int)
    for p, t in zip(preds, truths):
        counts[p is CaseLabel.PERICORONITIS, t is CaseLabel.PERICORONITIS] += 1
    return ConfusionMatrix2(
        tp=counts[True, True], fp=counts[True, False], fn=counts[False, True], tn=counts[False, False]
    )


def f1_score(precision, recall):
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ClassRow:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


def class_report(cm):
    """Rows for Normal and Pericoronitis, each computed with itself as positive."""
    rows = []
    for label, m in ((CaseLabel.NORMAL, cm.swapped()), (CaseLabel.PERICORONITIS, cm)):
        p = _ratio(m.tp, m.tp + m.fp)
        r = _ratio(m.tp, m.tp + m.fn)
        rows.append(ClassRow(label.value, p, r, f1_score(p, r), m.tp + m.fn))
    return rows


@dataclass(frozen=True)
class RocCurve:
    points: tuple
    auc: float


def roc_auc(scores, truths):
    """ROC over every distinct score (descending) with trapezoidal AUC.

    Tied scores form a single threshold step, so they contribute a
    diagonal segment, which is the half-credit of the pairwise statistic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.array([_label(t) is CaseLabel.PERICORONITIS for t in truths])
    if scores.shape != positive.shape:
        raise InputError(f"{scores.size} scores for {positive.size} labels")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("ROC needs at least one positive and one negative case")

    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positive[order]
    last_of_run = np.append(s[1:] != s[:-1], True)
    tps = np.cumsum(y)[last_of_run]
    fps = np.cumsum(~y)[last_of_run]
    tps = np.concatenate([[0], tps]).astype(np.int64)
    fps = np.concatenate([[0], fps]).astype(np.int64)
    # doubled trapezoid area in integer units, divided once
    area2 = int(np.sum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1])))
    points = tuple((fp / n_neg, tp / n_pos) for fp, tp in zip(fps.tolist(), tps.tolist()))
    return RocCurve(points, area2 / (2 * n_pos * n_neg))


# -- detection -----------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    image: object
    cls: int
    box: object
    confidence: float


@dataclass(frozen=True)
class GroundTruth:
    image: object
    cls: int
    box: object


def match_predictions(preds, gts, iou_thr):
    """Greedy matching in confidence order; returns one TP flag per prediction.

    Each prediction takes the unmatched ground truth of the same image and
    class with the highest IoU (first one on ties), provided IoU >= iou_thr.
    """
    pools = defaultdict(list)
    for j, g in enumerate(gts):
        pools[g.image, g.cls].append(j)
    taken = set()
    flags = [False] * len(preds)
    for i in sorted(range(len(preds)), key=lambda i: -preds[i].confidence):
        p = preds[i]
        best, best_iou = None, -1.0
        for j in pools.get((p.image, p.cls), ()):
            if j in taken:
                continue
            ov = iou(p.box, gts[j].box)
            if ov >= iou_thr and ov > best_iou:
                best, best_iou = j, ov
        if best is not None:
            taken.add(best)
            flags[i] = True
    return flags


def _ap_single_class(preds, gts, iou_thr):
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    preds = [preds[i] for i in order]
    flags = match_predictions(preds, gts, iou_thr)
    if not preds:
        return 0.0
    tp = np.cumsum(flags)
    k = np.arange(1, len(preds) + 1)
    precision = tp / k
    recall = tp / len(gts)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.array(RECALL_LEVELS)
    idx = np.searchsorted(recall, levels, side="left")
    interp = [float(envelope[i]) if i < len(preds) else 0.0 for i in idx]
    return math.fsum(interp) / len(RECALL_LEVELS)


def class_average_precision(preds, gts, iou_thr=0.5):
    """AP per class that has at least one ground truth."""
    by_class_p, by_class_g = defaultdict(list), defaultdict(list)
    for p in preds:
        by_class_p[p.cls].append(p)
    for g in gts:
        by_class_g[g.cls].append(g)
    return {c: _ap_single_class(by_class_p[c], by_class_g[c], iou_thr) for c in sorted(by_class_g)}


def average_precision(preds, gts, iou_thr=0.5):
    """Mean AP over classes with ground truth; 0.0 when there is none at all."""
    per_class = class_average_precision(preds, gts, iou_thr)
    if not per_class:
        return 0.0
    return math.fsum(per_class.values()) / len(per_class)


@dataclass(frozen=True)
class DetectionReport:
    precision: float
    recall: float
    map50: float
    map50_95: float

    def to_json(self):
        return asdict(self)


def map_range(preds, gts, conf_threshold=0.0):
    """Table-style detection summary.

    Precision and recall count predictions with ``confidence >=
    conf_threshold`` matched at IoU 0.5; the mAP values use every
    prediction.
    """
    operating = [p for p in preds if p.confidence >= conf_threshold]
    tp = sum(match_predictions(operating, gts, 0.5))
    aps = [average_precision(preds, gts, t) for t in IOU_THRESHOLDS]
    return DetectionReport(
        precision=_ratio(tp, len(operating)),
        recall=_ratio(tp, len(gts)),
        map50=aps[0],
        map50_95=math.fsum(aps) / len(aps),
    )


# -- aggregate report ---------------------------------------------------------------


@dataclass
class EvaluationReport:
    detection: DetectionReport = None
    per_class: list = None
    confusion: ConfusionMatrix2 = None
    roc: RocCurve = None
    agreement: float = None

    def to_json(self):
        out = {}
        if self.detection is not None:
            out["detection"] = self.detection.to_json()
        if self.confusion is not None:
            cls = {
                "per_class": [asdict(r) for r in self.per_class],
                "confusion": self.confusion.to_json(),
            }
            if self.roc is not None:
                cls["auc"] = self.roc.auc
                cls["roc"] = [list(p) for p in self.roc.points]
            out["classification"] = cls
        if self.agreement is not None:
            out["agreement"] = self.agreement
        return out


def classification_report(labels_pred, labels_true, scores=None):
    cm = confusion(labels_pred, labels_true)
    roc = None
    if scores is not None:
        truths = [_label(t) for t in labels_true]
        if len(set(truths)) == 2:
            roc = roc_auc(scores, truths)
    return EvaluationReport(per_class=class_report(cm), confusion=cm, roc=roc)
