"""
Bringing your own ONNX models
=============================

Models are ONNX graphs run by a small numpy executor. A JSON sidecar next
to the .onnx file can name the tensor to use as ``last_conv`` and say
whether the head is global-average-pool + linear.
"""

import json
import tempfile
from pathlib import Path

from molarscan.graph import export_reference_models, load_model

out = Path(tempfile.mkdtemp())
paths = export_reference_models(out)
print({k: v.name for k, v in paths.items()})
print(json.loads((out / "classifier_stub.json").read_text()))

model = load_model(out / "classifier_stub.onnx", "classifier")
print(model.name, model.head_kind, model.input_shape, model.tap_shape("last_conv"))
print("sha256", model.metadata["sha256"][:16], "...")

detector = load_model(out / "detector_stub.onnx", "detector")
print(detector.output_shapes)
