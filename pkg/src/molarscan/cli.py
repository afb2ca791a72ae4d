"""Command-line entry point: ``molarscan <subcommand> ...``.

Model arguments take an ONNX path or ``reference:detector_stub`` /
``reference:classifier_stub`` for the built-in stand-in networks.

Exit codes: 0 success, 1 input error, 2 model error, 3 internal error.
"""

import argparse
import json
import logging
import random
import sys
from pathlib import Path

from . import classification, dataset, detection, explainability, imaging, metrics, pipeline
from .boxes import BBox
from .classification import CaseLabel
from .errors import InputError, MolarScanError
from .graph import CLASSIFIER, DETECTOR, export_reference_models, load_model, reference_net

log = logging.getLogger("molarscan")


def _model(spec, kind):
    if spec.startswith("reference:"):
        name = spec.split(":", 1)[1]
        if name == "detector_stub" and kind == DETECTOR:
            return reference_net(name)
        if name == "classifier_stub" and kind == CLASSIFIER:
            return reference_net(name, input_size=imaging.ROI_SIZE)
        raise InputError(f"no reference {kind} called {name!r}")
    return load_model(spec, kind)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON in {path}: {exc}") from None


def _emit(payload, out=None):
    text = json.dumps(payload, indent=2) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _config(args):
    return pipeline.PipelineConfig(
        conf_threshold=args.conf,
        nms_iou=args.iou,
        cls_threshold=args.threshold,
        overlay_alpha=args.alpha,
        explain_class=getattr(args, "explain_class", "predicted"),
        seed=args.seed,
    )


def _roi_from_file(path):
    img = imaging.to_grayscale(imaging.load_image(path))
    return imaging.crop_roi(img, BBox(0, 0, img.width, img.height))


# -- subcommands ------------------------------------------------------------------


def cmd_detect(args):
    model = _model(args.model, DETECTOR)
    config = pipeline.PipelineConfig(conf_threshold=args.conf, nms_iou=args.iou)
    _, dets = pipeline.detect(imaging.load_image(args.image), model, config)
    _emit({"image": args.image, "detections": [d.to_json() for d in dets]}, args.out)


def cmd_classify(args):
    model = _model(args.model, CLASSIFIER)
    scores, label = classification.classify(model, _roi_from_file(args.roi), args.threshold)
    _emit(classification.classification_json(scores, label, args.threshold))


def cmd_explain(args):
    model = _model(args.model, CLASSIFIER)
    roi = _roi_from_file(args.roi)
    scores, label = classification.classify(model, roi, args.threshold)
    target = pipeline.EXPLAIN_CLASSES[args.explain_class]
    if target is None:
        target = 1 if label is CaseLabel.PERICORONITIS else 0
    heatmap = explainability.explain(model, roi, target)
    prefix = args.out_prefix or str(Path(args.roi).with_suffix(""))
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    heat_path, overlay_path = f"{prefix}_heatmap.png", f"{prefix}_overlay.png"
    imaging.save_png16(heat_path, heatmap.values)
    imaging.save_image(overlay_path, imaging.render_overlay(roi.as_image(), heatmap, args.alpha))
    out = classification.classification_json(scores, label, args.threshold)
    out.update(explained_class=target, heatmap=heat_path, overlay=overlay_path)
    _emit(out)


def cmd_pipeline(args):
    if bool(args.image) == bool(args.manifest):
        raise InputError("pass exactly one of --image or --manifest")
    detector = _model(args.detector, DETECTOR)
    classifier = _model(args.classifier, CLASSIFIER)
    config = _config(args)
    out_dir = Path(args.out_dir)
    if args.image:
        report = pipeline.run_case(args.image, detector, classifier, config, out_dir)
        payload = report.to_json()
    else:
        entries = dataset.load_manifest(args.manifest)
        result = pipeline.run_batch(
            entries, detector, classifier, config, args.parallelism, out_dir, Path(args.manifest).parent
        )
        payload = result.to_json()
    _emit(payload, out_dir / "report.json")
    _emit(payload)


def _detection_records(preds_json, gts_entries):
    index = {e.image_path: i for i, e in enumerate(gts_entries)}

    def image_id(name):
        if name not in index:
            raise InputError(f"prediction for unknown image {name!r}")
        return index[name]

    preds = []
    if "cases" in preds_json:
        records = [dict(d, image=c["image"]) for c in preds_json["cases"] for d in c["detections"]]
    else:
        records = preds_json.get("predictions", [])
    for rec in records:
        det = detection.Detection.from_json(rec)
        preds.append(metrics.Prediction(image_id(rec.get("image")), det.class_index, det.box, det.confidence))
    gts = [
        metrics.GroundTruth(i, detection.composite_index(g.quadrant, g.angulation), g.box)
        for i, e in enumerate(gts_entries)
        for g in e.gt_detections
    ]
    return preds, gts


def cmd_eval_det(args):
    entries = dataset.load_manifest(args.gts, check_images=False)
    preds, gts = _detection_records(_read_json(args.preds), entries)
    report = metrics.EvaluationReport(detection=metrics.map_range(preds, gts, args.conf))
    _emit(report.to_json(), args.out)


def cmd_eval_cls(args):
    preds_json, gts_json = _read_json(args.preds), _read_json(args.gts)
    if "cases" in preds_json:
        scores = {c["image"]: pipeline.case_score(c) for c in preds_json["cases"]}
    else:
        scores = {str(p["case"]): float(p["p_pericoronitis"]) for p in preds_json.get("predictions", [])}
    if "labels" in gts_json:
        truths = {str(g["case"]): CaseLabel.parse(g["label"]) for g in gts_json["labels"]}
    else:
        entries = [dataset.parse_entry(e, f"entry {i}") for i, e in enumerate(gts_json.get("entries", []))]
        truths = {e.image_path: e.gt_label for e in entries if e.gt_label is not None}
    missing = sorted(set(truths) - set(scores))
    if missing:
        raise InputError(f"no prediction for cases {missing[:5]}")
    cases = sorted(truths)
    s = [scores[c] for c in cases]
    preds = [
        classification.decide(classification.ClassScores(1.0 - v, v), args.threshold) for v in s
    ]
    report = metrics.classification_report(preds, [truths[c] for c in cases], s)
    _emit(report.to_json(), args.out)


def cmd_split(args):
    entries = dataset.load_manifest(args.manifest, check_images=False)
    train, val = dataset.stratified_split(entries, args.ratio, args.seed)
    dataset.save_manifest(args.out_train, train)
    dataset.save_manifest(args.out_val, val)
    _emit({"train": len(train), "val": len(val), "ratio": args.ratio, "seed": args.seed})


def cmd_agreement(args):
    reviews = dataset.load_reviews(args.reviews)
    _emit({"reviews": len(reviews), "agreeing": sum(r.agrees for r in reviews),
           "agreement": dataset.agreement_tally(reviews)})


AUGMENT_OPS = ("hflip", "rotate90", "rotate180", "rotate270", "mosaic")

# quadrant relabeling for ops that mirror the patient's sides or jaws
_Q = detection.Quadrant
QUADRANT_REMAP = {
    "hflip": {_Q.UR: _Q.UL, _Q.UL: _Q.UR, _Q.LL: _Q.LR, _Q.LR: _Q.LL},
    "rotate180": {_Q.UR: _Q.LL, _Q.LL: _Q.UR, _Q.UL: _Q.LR, _Q.LR: _Q.UL},
}


def cmd_augment(args):
    ops = [op.strip() for op in args.ops.split(",") if op.strip()]
    unknown = [op for op in ops if op not in AUGMENT_OPS]
    if unknown:
        raise InputError(f"unknown augmentation ops {unknown}; choose from {AUGMENT_OPS}")
    base = Path(args.manifest).parent
    entries = dataset.load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = [imaging.to_grayscale(imaging.load_image(base / e.image_path)) for e in entries]
    produced = []

    def write(name, img, boxes, gt_src, label, op=None):
        imaging.save_image(out_dir / name, img)
        remap = QUADRANT_REMAP.get(op, {})
        dets = tuple(
            dataset.GroundTruthBox(b, remap.get(g.quadrant, g.quadrant), g.angulation)
            for b, g in zip(boxes, gt_src)
        )
        produced.append(dataset.ManifestEntry(name, dets, label))

    for e, img in zip(entries, images):
        stem = Path(e.image_path).stem
        boxes = [g.box for g in e.gt_detections]
        for op in ops:
            if op == "hflip":
                out, moved = imaging.hflip(img, boxes)
            elif op.startswith("rotate"):
                out, moved = imaging.rotate(img, boxes, int(op[len("rotate"):]))
            else:
                continue
            write(f"{stem}_{op}.png", out, moved, e.gt_detections, e.gt_label, op)

    if "mosaic" in ops:
        order = list(range(len(entries)))
        random.Random(args.seed).shuffle(order)
        for k in range(len(order) // 4):
            group = order[4 * k:4 * k + 4]
            tiles, tile_boxes = [], []
            for i in group:
                boxed, t = imaging.letterbox_resize(images[i], args.size)
                tiles.append(boxed)
                tile_boxes.append([t.forward_box(g.box) for g in entries[i].gt_detections])
            canvas, kept, origins = imaging.mosaic(tiles, tile_boxes, seed=args.seed + k)
            src = [entries[group[t]].gt_detections[j] for t, j in origins]
            write(f"mosaic_{k:03d}.png", canvas, kept, src, None)

    dataset.save_manifest(out_dir / "manifest.json", produced)
    _emit({"written": len(produced), "manifest": str(out_dir / "manifest.json")})


def cmd_export_reference(args):
    paths = export_reference_models(args.out_dir)
    _emit({k: str(v) for k, v in paths.items()})


# -- argument parsing --------------------------------------------------------------


def _threshold_flags(p):
    p.add_argument("--conf", type=float, default=detection.DEFAULT_CONF, help="detector confidence threshold")
    p.add_argument("--iou", type=float, default=detection.DEFAULT_IOU, help="NMS IoU threshold")
    p.add_argument("--threshold", type=float, default=classification.DEFAULT_THRESHOLD,
                   help="pericoronitis decision threshold")
    p.add_argument("--alpha", type=float, default=0.5, help="overlay opacity")
    p.add_argument("--class", dest="explain_class", default="predicted", choices=sorted(pipeline.EXPLAIN_CLASSES))
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="molarscan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="stage 1 only: labeled third-molar boxes")
    p.add_argument("--image", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--conf", type=float, default=detection.DEFAULT_CONF)
    p.add_argument("--iou", type=float, default=detection.DEFAULT_IOU)
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("classify", help="stage 2 only: score one ROI image")
    p.add_argument("--roi", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=classification.DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("explain", help="Grad-CAM heatmap and overlay for one ROI image")
    p.add_argument("--roi", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--class", dest="explain_class", default="predicted", choices=sorted(pipeline.EXPLAIN_CLASSES))
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=classification.DEFAULT_THRESHOLD)
    p.add_argument("--out-prefix")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("pipeline", help="full two-stage run on an image or a manifest")
    p.add_argument("--image")
    p.add_argument("--manifest")
    p.add_argument("--detector", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--parallelism", type=int, default=1)
    _threshold_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval-det", help="precision, recall, mAP50, mAP50-95")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--conf", type=float, default=0.0, help="operating threshold for precision/recall")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_det)

    p = sub.add_parser("eval-cls", help="per-class P/R/F1, confusion matrix, ROC/AUC")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--threshold", type=float, default=classification.DEFAULT_THRESHOLD)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_cls)

    p = sub.add_parser("split", help="seeded stratified train/val split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-val", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("agreement", help="reader agreement fraction")
    p.add_argument("--reviews", required=True)
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("augment", help="flip/rotate/mosaic a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ops", default="hflip,rotate90,mosaic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=416, help="mosaic tile size")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("export-reference", help="write the reference stub models as ONNX")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_reference)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except MolarScanError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (OSError, KeyError, TypeError, ValueError) as exc:
        log.error("input error: %s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.error("internal error: %r", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
