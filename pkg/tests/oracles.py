"""Independent reference computations used to freeze and cross-check values.

Nothing here imports the code under test except plain data containers.
"""

import itertools
import math

import numpy as np


# -- geometry ------------------------------------------------------------------


def pixel_iou(a, b):
    """IoU of integer-corner boxes by counting unit cells on a grid."""
    hi = int(max(a[2], a[3], b[2], b[3])) + 1
    grid_a = np.zeros((hi, hi), dtype=bool)
    grid_b = np.zeros((hi, hi), dtype=bool)
    grid_a[int(a[1]):int(a[3]), int(a[0]):int(a[2])] = True
    grid_b[int(b[1]):int(b[3]), int(b[0]):int(b[2])] = True
    union = np.logical_or(grid_a, grid_b).sum()
    return np.logical_and(grid_a, grid_b).sum() / union if union else 0.0


def bilinear_pixel(src, out_h, out_w, y, x):
    """One output pixel of a half-pixel-aligned bilinear resize, by formula."""
    in_h, in_w = src.shape
    sy = min(max((y + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1)
    sx = min(max((x + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1)
    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
    y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
    wy, wx = sy - y0, sx - x0
    return (
        src[y0, x0] * (1 - wy) * (1 - wx)
        + src[y0, x1] * (1 - wy) * wx
        + src[y1, x0] * wy * (1 - wx)
        + src[y1, x1] * wy * wx
    )


# -- reference classifier, written out longhand -----------------------------------


def lcg_values(count, seed=42):
    out, x = [], seed
    for _ in range(count):
        x = (1103515245 * x + 12345) % (2**31)
        out.append((x / 2**31 - 0.5) / 5)
    return out


def stub_weights():
    vals = lcg_values(36 + 288 + 16 + 2)
    conv1 = np.array(vals[:36]).reshape(4, 1, 3, 3)
    conv2 = np.array(vals[36:324]).reshape(8, 4, 3, 3)
    fc_w = np.array(vals[324:340]).reshape(2, 8)
    fc_b = np.array(vals[340:342])
    return conv1, conv2, fc_w, fc_b


def _conv_same(x, w):
    c_out, c_in = w.shape[:2]
    h, wd = x.shape[1:]
    padded = np.zeros((c_in, h + 2, wd + 2))
    padded[:, 1:-1, 1:-1] = x
    y = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                y[o, i, j] = np.sum(padded[:, i:i + 3, j:j + 3] * w[o])
    return y


def stub_forward(image16):
    """Logits and intermediates of the 16x16 reference classifier."""
    conv1, conv2, fc_w, fc_b = stub_weights()
    x = np.asarray(image16, dtype=np.float64).reshape(1, 16, 16)
    z1 = _conv_same(x, conv1)
    a1 = np.maximum(z1, 0)
    p1 = np.zeros((4, 8, 8))
    for c in range(4):
        for i in range(8):
            for j in range(8):
                p1[c, i, j] = a1[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    z2 = _conv_same(p1, conv2)
    a2 = np.maximum(z2, 0)
    gap = a2.mean(axis=(1, 2))
    logits = fc_w @ gap + fc_b
    return logits, dict(z1=z1, a1=a1, p1=p1, z2=z2, a2=a2)


def stub_input_gradient(image16, class_idx):
    """d logit / d input by manual backpropagation through the stub."""
    conv1, conv2, fc_w, _ = stub_weights()
    _, act = stub_forward(image16)
    g_a2 = np.broadcast_to(fc_w[class_idx][:, None, None] / 64.0, (8, 8, 8)).copy()
    g_z2 = g_a2 * (act["z2"] > 0)
    # conv2 backward (pad 1): input grad = full correlation with flipped kernel
    g_p1 = np.zeros((4, 10, 10))
    for o in range(8):
        for i in range(8):
            for j in range(8):
                g_p1[:, i:i + 3, j:j + 3] += g_z2[o, i, j] * conv2[o]
    g_p1 = g_p1[:, 1:-1, 1:-1]
    g_a1 = np.zeros((4, 16, 16))
    for c in range(4):
        for i in range(8):
            for j in range(8):
                win = act["a1"][c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                di, dj = np.unravel_index(np.argmax(win), (2, 2))
                g_a1[c, 2 * i + di, 2 * j + dj] += g_p1[c, i, j]
    g_z1 = g_a1 * (act["z1"] > 0)
    g_x = np.zeros((1, 18, 18))
    for o in range(4):
        for i in range(16):
            for j in range(16):
                g_x[:, i:i + 3, j:j + 3] += g_z1[o, i, j] * conv1[o]
    return g_x[0, 1:-1, 1:-1]


# -- classification metrics -----------------------------------------------------------


def pairwise_auc(scores, positives):
    """P(s+ > s-) + 0.5 P(s+ = s-) over every positive/negative pair."""
    pos = [s for s, y in zip(scores, positives) if y]
    neg = [s for s, y in zip(scores, positives) if not y]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def pairwise_auc_np(scores, positives):
    """Same statistic as :func:`pairwise_auc`, every pair compared at once."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    pos, neg = scores[positives][:, None], scores[~positives][None, :]
    return ((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (pos.size * neg.size)


# -- detection AP by exhaustive matching ---------------------------------------------


def _box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _greedy_consistent(assign, preds, gts, thr):
    """Does ``assign`` obey: each prediction, in confidence order, takes the
    best still-free eligible ground truth (first on IoU ties), if any?"""
    used = set()
    for p_idx, g_idx in enumerate(assign):
        p = preds[p_idx]
        free = [
            j for j, g in enumerate(gts)
            if j not in used and g["image"] == p["image"] and _box_iou(p["box"], g["box"]) >= thr
        ]
        if g_idx is None:
            if free:
                return False
            continue
        if g_idx not in free:
            return False
        mine = _box_iou(p["box"], gts[g_idx]["box"])
        for j in free:
            other = _box_iou(p["box"], gts[j]["box"])
            if other > mine or (other == mine and j < g_idx):
                return False
        used.add(g_idx)
    return True


def _all_matchings(preds, gts, thr):
    """Every injective partial map prediction -> eligible ground truth."""
    options = []
    for p in preds:
        opts = [None] + [
            j for j, g in enumerate(gts)
            if g["image"] == p["image"] and _box_iou(p["box"], g["box"]) >= thr
        ]
        options.append(opts)
    for combo in itertools.product(*options):
        chosen = [j for j in combo if j is not None]
        if len(chosen) == len(set(chosen)):
            yield combo


def oracle_class_ap(preds, gts, thr):
    """101-point AP for one class. ``preds``: dicts with image/box/confidence."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i]["confidence"], i))
    preds = [preds[i] for i in order]
    valid = [a for a in _all_matchings(preds, gts, thr) if _greedy_consistent(a, preds, gts, thr)]
    assert len(valid) == 1, f"expected a unique greedy matching, found {len(valid)}"
    hits = [g is not None for g in valid[0]]
    curve = []
    for k in range(1, len(preds) + 1):
        tp = sum(hits[:k])
        curve.append((tp / len(gts), tp / k))
    levels = [i / 100 for i in range(101)]
    interp = [max((p for r, p in curve if r >= level), default=0.0) for level in levels]
    return math.fsum(interp) / 101


def oracle_map(preds, gts, thr):
    """Mean over classes that have ground truth; records carry a 'cls' key."""
    classes = sorted({g["cls"] for g in gts})
    if not classes:
        return 0.0
    aps = [
        oracle_class_ap([p for p in preds if p["cls"] == c], [g for g in gts if g["cls"] == c], thr)
        for c in classes
    ]
    return math.fsum(aps) / len(aps)
