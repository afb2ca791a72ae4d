"""
Grad-CAM on the reference classifier
====================================

The classifier ends in global average pooling plus a linear layer, so the
Grad-CAM channel weights are the class row of the linear layer divided by
the number of spatial cells. Finite differences on the tapped activations
give the same weights for any head.
"""

import numpy as np

from molarscan.boxes import BBox
from molarscan.classification import preprocess
from molarscan.explainability import cam, explain, gradcam_weights, normalize
from molarscan.graph import forward_with_taps, reference_net
from molarscan.imaging import RadiographImage, crop_roi

model = reference_net("classifier_stub", input_size=224)
print(model.head_kind, model.tap_shape("last_conv"))

# an ROI cropped from a noisy image
rng = np.random.default_rng(0)
image = RadiographImage(rng.random((300, 260)))
roi = crop_roi(image, BBox(20, 30, 240, 290))
x = preprocess(roi)

# closed-form weights against central differences (step 1e-3)
analytic = gradcam_weights(model, x, 1, mode="analytic")
numeric = gradcam_weights(model, x, 1, mode="finite_difference")
print("analytic ", np.round(analytic, 6))
print("numeric  ", np.round(numeric, 6))
print("max relative gap", np.max(np.abs(numeric - analytic) / np.abs(analytic)))

# the raw map lives on the 8x8 grid of last_conv before upsampling
_, taps = forward_with_taps(model, x, ["last_conv"])
print(np.round(normalize(cam(taps["last_conv"], analytic)).values, 2))

# explain() does the same and upsamples bilinearly to 224x224
heatmap = explain(model, roi, class_idx=1)
print(heatmap.values.shape, heatmap.values.min(), heatmap.values.max())
