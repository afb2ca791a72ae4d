"""Grad-CAM heatmaps over the classifier's ``last_conv`` activations.

Channel weights are the spatial mean of d logit_c / d A_k(i, j). For a
global-average-pool + linear head that gradient is the constant
``W[c, k] / (H * W)``, so the weights are available in closed form
(``mode="analytic"``). Any other head goes through central finite
differences on the tapped activations (``mode="finite_difference"``).
"""

from dataclasses import dataclass

import numpy as np

from .classification import preprocess
from .errors import InputError, ModelError
from .graph import LAST_CONV, forward_from_tap, forward_with_taps
from .imaging import ROI_SIZE, resample_bilinear

FD_STEP = 1e-3


@dataclass(frozen=True, eq=False)
class Heatmap:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InputError(f"heatmap must be 2-D, got shape {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise InputError("heatmap values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def _logit(outputs, class_idx):
    (out,) = outputs.values()
    return out.ravel()[class_idx]


def gradcam_weights(model, x, class_idx, mode="analytic", step=FD_STEP):
    """Per-channel importance weights for ``class_idx`` at ``last_conv``."""
    shape = model.tap_shape(LAST_CONV)
    if len(shape) != 4:
        raise ModelError(f"last_conv must be 1xCxHxW, got {shape}")
    _, channels, h, w = shape
    if mode == "analytic":
        if model.head_kind != "gap_linear":
            raise ModelError(f"analytic Grad-CAM needs a gap_linear head, model {model.name} is opaque")
        return np.array(model.fc_weight[class_idx], dtype=np.float64) / (h * w)
    if mode != "finite_difference":
        raise ValueError(f"unknown Grad-CAM mode {mode!r}")

    _, taps = forward_with_taps(model, x, [LAST_CONV])
    acts = taps[LAST_CONV].copy()
    grads = np.empty(acts.shape[1:])
    for k, i, j in np.ndindex(channels, h, w):
        saved = acts[0, k, i, j]
        acts[0, k, i, j] = saved + step
        up = _logit(forward_from_tap(model, LAST_CONV, acts), class_idx)
        acts[0, k, i, j] = saved - step
        down = _logit(forward_from_tap(model, LAST_CONV, acts), class_idx)
        acts[0, k, i, j] = saved
        grads[k, i, j] = (up - down) / (2.0 * step)
    return grads.mean(axis=(1, 2))


def cam(activations, alpha):
    """ReLU of the alpha-weighted channel sum; ``activations`` is C x H x W."""
    activations = np.asarray(activations, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if activations.ndim == 4:
        activations = activations[0]
    if alpha.shape != (activations.shape[0],):
        raise InputError(f"{alpha.shape[0]} weights for {activations.shape[0]} channels")
    return np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)


def normalize(raw):
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return Heatmap(np.zeros_like(raw))
    return Heatmap(np.clip((raw - lo) / (hi - lo), 0.0, 1.0))


def upsample(heatmap, target_w, target_h):
    values = np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64)
    return Heatmap(np.clip(resample_bilinear(values, target_h, target_w), 0.0, 1.0))


def explain(model, roi, class_idx, mode="auto", size=ROI_SIZE):
    """Heatmap (``size x size``) of the evidence for ``class_idx`` on one ROI."""
    if mode == "auto":
        mode = "analytic" if model.head_kind == "gap_linear" else "finite_difference"
    x = preprocess(roi)
    _, taps = forward_with_taps(model, x, [LAST_CONV])
    alpha = gradcam_weights(model, x, class_idx, mode=mode)
    return upsample(normalize(cam(taps[LAST_CONV], alpha)), size, size)
