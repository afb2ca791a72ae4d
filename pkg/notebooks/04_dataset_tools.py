"""
Manifests, splits, augmentation and reader agreement
====================================================
"""

import numpy as np

from molarscan.boxes import BBox
from molarscan.classification import CaseLabel
from molarscan.dataset import ManifestEntry, ReaderReview, agreement_tally, stratified_split
from molarscan.imaging import RadiographImage, hflip, letterbox_resize, mosaic, rotate

# a balanced labeled set, split 80:20 within each class
entries = [ManifestEntry(f"p{i}.png", gt_label=CaseLabel.PERICORONITIS) for i in range(775)]
entries += [ManifestEntry(f"n{i}.png", gt_label=CaseLabel.NORMAL) for i in range(775)]
train, val = stratified_split(entries, ratio=0.8, seed=1)
print(len(train), len(val), sum(e.gt_label is CaseLabel.NORMAL for e in val))

# flips and rotations move boxes with the pixels
img = RadiographImage(np.zeros((5, 100)))
print(hflip(img, [BBox(10, 0, 20, 5)])[1])
print(rotate(img, [BBox(10, 0, 20, 5)], 90)[1])

# mosaic: four letterboxed tiles on a 2x canvas, split point from the seed
rng = np.random.default_rng(0)
tiles, boxes = [], []
for _ in range(4):
    boxed, t = letterbox_resize(RadiographImage(rng.random((60, 120))), 64)
    tiles.append(boxed)
    boxes.append([t.forward_box(BBox(30, 10, 90, 50))])
canvas, kept, origins = mosaic(tiles, boxes, seed=3)
print(canvas.width, canvas.height, len(kept), origins)

# reader study tally
reviews = [ReaderReview(f"case{i}", i < 42) for i in range(50)]
print("agreement", agreement_tally(reviews))
