"""Two-stage orchestration: detect, classify, explain, report."""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import classification, detection, explainability, imaging, metrics
from .classification import CaseLabel
from .dataset import ManifestEntry
from .errors import InputError, ModelError
from .graph import forward

EXPLAIN_CLASSES = {"predicted": None, "normal": 0, "pericoronitis": 1}


@dataclass(frozen=True)
class PipelineConfig:
    conf_threshold: float = detection.DEFAULT_CONF
    nms_iou: float = detection.DEFAULT_IOU
    cls_threshold: float = classification.DEFAULT_THRESHOLD
    overlay_alpha: float = 0.5
    explain_class: str = "predicted"
    seed: int = 0

    def __post_init__(self):
        for name in ("conf_threshold", "nms_iou", "overlay_alpha"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InputError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.0 < self.cls_threshold < 1.0:
            raise InputError(f"cls_threshold must lie in (0, 1), got {self.cls_threshold}")
        if self.explain_class not in EXPLAIN_CLASSES:
            raise InputError(f"explain_class must be one of {sorted(EXPLAIN_CLASSES)}")


@dataclass
class Finding:
    detection: detection.Detection
    scores: classification.ClassScores
    label: CaseLabel
    explained_class: int
    heatmap_path: str = None
    overlay_path: str = None

    def to_json(self, threshold):
        out = self.detection.to_json()
        out["classification"] = classification.classification_json(self.scores, self.label, threshold)
        out["explained_class"] = self.explained_class
        out["heatmap"] = self.heatmap_path
        out["overlay"] = self.overlay_path
        return out


@dataclass
class CaseReport:
    image_path: str
    findings: list
    config: PipelineConfig
    models: dict = field(default_factory=dict)

    @property
    def detections(self):
        return [f.detection for f in self.findings]

    def to_json(self):
        return {
            "image": self.image_path,
            "detections": [f.to_json(self.config.cls_threshold) for f in self.findings],
            "config": asdict(self.config),
            "models": self.models,
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=2) + "\n"


def model_identity(model):
    ident = {"name": model.name, "head": model.head_kind}
    if "sha256" in model.metadata:
        ident["sha256"] = model.metadata["sha256"]
    return ident


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ModelError as exc:
        if exc.stage:
            raise
        raise ModelError(str(exc), stage=name) from exc


def detect(image, detector, config):
    """Grayscale, letterbox, run the detector, decode, NMS, one box per quadrant."""
    gray = imaging.to_grayscale(image)
    boxed, transform = imaging.letterbox_resize(gray, imaging.DETECTOR_SIZE)
    x = boxed.plane[None, None]
    (raw,) = _stage("detect", forward, detector, x).values()
    dets = _stage("detect", detection.decode, raw, config.conf_threshold, transform)
    return gray, detection.dedupe_per_quadrant(detection.nms(dets, config.nms_iou))


def run_case(image, detector, classifier, config=None, out_dir=None, case_id=None, image_name=None):
    """Full two-stage assessment of one radiograph.

    ``image`` is a path or a :class:`RadiographImage`. Heatmaps (16-bit PNG)
    and overlays (RGB PNG) are written to ``out_dir`` when given; report
    paths are relative to it. ``image_name`` overrides the image path
    recorded in the report.
    """
    config = config or PipelineConfig()
    if isinstance(image, (str, Path)):
        image_path = str(image)
        case_id = case_id or Path(image).stem
        image = imaging.load_image(image)
    else:
        image_path = None
        case_id = case_id or "case"
    gray, dets = detect(image, detector, config)

    findings = []
    for i, det in enumerate(dets):
        roi = imaging.crop_roi(gray, det.box)
        scores, label = _stage("classify", classification.classify, classifier, roi, config.cls_threshold)
        target = EXPLAIN_CLASSES[config.explain_class]
        if target is None:
            target = 1 if label is CaseLabel.PERICORONITIS else 0
        heatmap = _stage("explain", explainability.explain, classifier, roi, target)
        finding = Finding(det, scores, label, target)
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            stem = f"{case_id}_{i}_{det.quadrant.value}"
            finding.heatmap_path = f"{stem}_heatmap.png"
            finding.overlay_path = f"{stem}_overlay.png"
            imaging.save_png16(out_dir / finding.heatmap_path, heatmap.values)
            overlay = imaging.render_overlay(roi.as_image(), heatmap, config.overlay_alpha)
            imaging.save_image(out_dir / finding.overlay_path, overlay)
        findings.append(finding)

    models = {"detector": model_identity(detector), "classifier": model_identity(classifier)}
    return CaseReport(image_name or image_path, findings, config, models)


@dataclass
class BatchResult:
    reports: list
    evaluation: metrics.EvaluationReport = None

    def to_json(self):
        out = {"cases": [r.to_json() for r in self.reports]}
        if self.evaluation is not None:
            out["evaluation"] = self.evaluation.to_json()
        return out


def run_batch(entries, detector, classifier, config=None, parallelism=1, out_dir=None, base_dir=None):
    """Run every manifest entry; output order follows the manifest.

    Aggregate metrics are computed from the serialized case reports, so
    they can be reproduced offline with :func:`evaluate_cases`.
    """
    config = config or PipelineConfig()
    base = Path(base_dir) if base_dir is not None else Path(".")

    def one(item):
        index, entry = item
        case_id = f"{index:04d}_{Path(entry.image_path).stem}"
        return run_case(
            base / entry.image_path, detector, classifier, config, out_dir, case_id, entry.image_path
        )

    items = list(enumerate(entries))
    if parallelism > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            reports = list(pool.map(one, items))
    else:
        reports = [one(item) for item in items]
    evaluation = evaluate_cases([r.to_json() for r in reports], entries, config.conf_threshold)
    return BatchResult(reports, evaluation)


def case_score(case_json):
    """Case-level pericoronitis score: the most suspicious ROI, 0 without ROIs."""
    return max((d["classification"]["p_pericoronitis"] for d in case_json["detections"]), default=0.0)


def case_label(case_json):
    labels = [d["classification"]["label"] for d in case_json["detections"]]
    return CaseLabel.PERICORONITIS if "pericoronitis" in labels else CaseLabel.NORMAL


def evaluate_cases(case_jsons, entries, conf_threshold=0.0):
    """Metrics for case reports (JSON form) against their manifest entries.

    Returns ``None`` when the manifest carries no ground truth.
    """
    if len(case_jsons) != len(entries):
        raise InputError(f"{len(case_jsons)} case reports for {len(entries)} manifest entries")
    report = metrics.EvaluationReport()

    if any(e.gt_detections for e in entries):
        preds, gts = [], []
        for idx, (case, entry) in enumerate(zip(case_jsons, entries)):
            for d in case["detections"]:
                det = detection.Detection.from_json(d)
                preds.append(metrics.Prediction(idx, det.class_index, det.box, det.confidence))
            for g in entry.gt_detections:
                gts.append(metrics.GroundTruth(idx, detection.composite_index(g.quadrant, g.angulation), g.box))
        report.detection = metrics.map_range(preds, gts, conf_threshold)

    labeled = [(c, e) for c, e in zip(case_jsons, entries) if e.gt_label is not None]
    if labeled:
        cls = metrics.classification_report(
            [case_label(c) for c, _ in labeled],
            [e.gt_label for _, e in labeled],
            [case_score(c) for c, _ in labeled],
        )
        report.per_class, report.confusion, report.roc = cls.per_class, cls.confusion, cls.roc

    if report.detection is None and report.confusion is None:
        return None
    return report


__all__ = [
    "BatchResult",
    "CaseReport",
    "Finding",
    "ManifestEntry",
    "PipelineConfig",
    "detect",
    "evaluate_cases",
    "run_batch",
    "run_case",
]
