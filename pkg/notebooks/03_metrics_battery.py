"""
Evaluation battery
==================

Per-class precision/recall/F1, confusion matrix, ROC/AUC and detection
mAP, on small hand-built inputs.
"""

from molarscan.boxes import BBox
from molarscan.metrics import (
    ConfusionMatrix2,
    GroundTruth,
    Prediction,
    class_report,
    map_range,
    roc_auc,
    round_half_up,
)

# a confusion matrix with 119 pericoronitis and 114 normal cases
cm = ConfusionMatrix2(tp=96, fp=7, fn=23, tn=107)
for row in class_report(cm):
    print(f"{row.label:14s} P={round_half_up(row.precision)} R={round_half_up(row.recall)} "
          f"F1={round_half_up(row.f1)} support={row.support}")
print("confusion [[tp, fn], [fp, tn]] =", cm.to_json())

# the F1 of the two-decimal (P, R) pair is not the F1 of the counts
print("F1(0.93, 0.81) =", 2 * 0.93 * 0.81 / (0.93 + 0.81))

# ROC: tied scores form one diagonal step
curve = roc_auc([0.9, 0.8, 0.4, 0.3], ["pericoronitis", "normal", "pericoronitis", "normal"])
print("AUC", curve.auc, "points", curve.points)

# detection: classes are composite indices 4 * quadrant + angulation
gts = [GroundTruth("a", 3, BBox(0, 0, 10, 10)), GroundTruth("a", 9, BBox(50, 50, 60, 60))]
preds = [
    Prediction("a", 3, BBox(1, 1, 11, 11), 0.9),
    Prediction("a", 9, BBox(52, 50, 62, 60), 0.8),
    Prediction("a", 9, BBox(20, 20, 30, 30), 0.7),
]
print(map_range(preds, gts, conf_threshold=0.25).to_json())
