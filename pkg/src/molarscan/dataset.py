"""Manifest loading, stratified splitting and reader-study tallies.

Manifest schema::

    {"entries": [{"image": "opg_001.png",
                  "detections": [{"box": [x1, y1, x2, y2], "quadrant": "LL",
                                  "angulation": "vertical"}],
                  "label": "pericoronitis" | "normal" | null}]}

Review schema: ``{"reviews": [{"case": "id", "agrees": true}]}``.
"""

import json
import logging
import math
import random
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from .boxes import BBox
from .classification import CaseLabel
from .detection import Angulation, Quadrant
from .errors import InputError, VocabularyError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundTruthBox:
    box: BBox
    quadrant: Quadrant
    angulation: Angulation

    def to_json(self):
        return {"box": self.box.to_list(), "quadrant": self.quadrant.value, "angulation": self.angulation.value}


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    gt_detections: tuple = ()
    gt_label: CaseLabel = None
    split: str = None

    def to_json(self):
        out = {
            "image": self.image_path,
            "detections": [d.to_json() for d in self.gt_detections],
            "label": self.gt_label.value if self.gt_label else None,
        }
        if self.split:
            out["split"] = self.split
        return out


@dataclass(frozen=True)
class ReaderReview:
    case_id: str
    agrees: bool
    overlay_path: str = None


def _read_json(path):
    text = Path(path).read_text()
    if not text.strip():
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON in {path}: {exc}") from None


def parse_entry(raw, where="entry"):
    if not isinstance(raw, dict) or "image" not in raw:
        raise InputError(f"{where}: expected an object with an 'image' field")
    try:
        dets = tuple(
            GroundTruthBox(
                BBox.from_list(d["box"]),
                Quadrant.parse(d["quadrant"]),
                Angulation.parse(d["angulation"]),
            )
            for d in raw.get("detections") or ()
        )
        label = raw.get("label")
        label = CaseLabel.parse(label) if label is not None else None
    except VocabularyError as exc:
        raise VocabularyError(f"{where} ({raw['image']}): {exc}") from None
    except (KeyError, TypeError) as exc:
        raise InputError(f"{where} ({raw['image']}): malformed detection {exc}") from None
    split = raw.get("split")
    if split not in (None, "train", "val"):
        raise InputError(f"{where}: unknown split tag {split!r}")
    return ManifestEntry(str(raw["image"]), dets, label, split)


def load_manifest(path, check_images=True):
    """Parse a manifest; entries whose image file is missing are skipped.

    Relative image paths are resolved against the manifest's directory.
    """
    data = _read_json(path)
    if data is None:
        return []
    if not isinstance(data, dict) or not isinstance(data.get("entries", []), list):
        raise InputError(f"{path}: expected {{'entries': [...]}}")
    base = Path(path).parent
    entries, skipped = [], 0
    for i, raw in enumerate(data.get("entries", [])):
        entry = parse_entry(raw, where=f"entry {i}")
        resolved = base / entry.image_path
        if check_images and not resolved.is_file():
            log.warning("entry %d: image %s not found, skipping", i, resolved)
            skipped += 1
            continue
        entries.append(entry)
    if skipped:
        log.warning("%s: skipped %d of %d entries with missing images", path, skipped, skipped + len(entries))
    return entries


def save_manifest(path, entries):
    Path(path).write_text(json.dumps({"entries": [e.to_json() for e in entries]}, indent=2) + "\n")


def stratum(entry):
    """Label for classification entries, else (quadrant, angulation) of the first box."""
    if entry.gt_label is not None:
        return (entry.gt_label.value,)
    if entry.gt_detections:
        d = entry.gt_detections[0]
        return (d.quadrant.value, d.angulation.value)
    return ()


def stratified_split(entries, ratio=0.8, seed=0):
    """Seeded per-stratum shuffle; the first round-half-up(ratio * n) go to train.

    Singleton strata always go to train. Both halves keep manifest order.
    """
    if not 0.0 <= ratio <= 1.0:
        raise InputError(f"split ratio {ratio} outside [0, 1]")
    groups = defaultdict(list)
    for i, e in enumerate(entries):
        groups[stratum(e)].append(i)
    rng = random.Random(seed)
    train_idx = set()
    for key in sorted(groups):
        members = groups[key]
        rng.shuffle(members)
        n_train = len(members) if len(members) == 1 else math.floor(ratio * len(members) + 0.5)
        train_idx.update(members[:n_train])
    train = [e for i, e in enumerate(entries) if i in train_idx]
    val = [e for i, e in enumerate(entries) if i not in train_idx]
    return train, val


def load_reviews(path):
    data = _read_json(path) or {}
    reviews, seen = [], set()
    for i, raw in enumerate(data.get("reviews", [])):
        try:
            case, agrees = str(raw["case"]), raw["agrees"]
        except (KeyError, TypeError):
            raise InputError(f"review {i}: needs 'case' and 'agrees'") from None
        if not isinstance(agrees, bool):
            raise InputError(f"review {i}: 'agrees' must be true or false")
        if case in seen:
            raise InputError(f"review {i}: duplicate case id {case!r}")
        seen.add(case)
        reviews.append(ReaderReview(case, agrees, raw.get("overlay")))
    return reviews


def agreement_tally(reviews):
    """Fraction of reviews that agree with the heatmap."""
    reviews = list(reviews)
    if not reviews:
        raise InputError("agreement tally needs at least one review")
    ids = [r.case_id for r in reviews]
    if len(set(ids)) != len(ids):
        raise InputError("case ids must be unique within a review set")
    return sum(r.agrees for r in reviews) / len(reviews)
