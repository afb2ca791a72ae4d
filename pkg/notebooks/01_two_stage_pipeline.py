"""
Two-stage assessment of a panoramic radiograph
==============================================

Detect third molars, classify each one, and write a Grad-CAM heatmap
per finding. The reference stub networks stand in for trained weights,
so the numbers are illustrative only.
"""

import tempfile
from pathlib import Path

import numpy as np

from molarscan import PipelineConfig, RadiographImage, reference_net, run_case

# a black 1664x832 "panoramic" with two bright squares the stub detector
# responds to: one in the upper-right, one in the lower-left region
pixels = np.zeros((832, 1664))
pixels[96:224, 256:384] = 1.0
pixels[608:736, 1152:1280] = 1.0
image = RadiographImage(pixels)

detector = reference_net("detector_stub")
classifier = reference_net("classifier_stub", input_size=224)

out_dir = Path(tempfile.mkdtemp())
report = run_case(image, detector, classifier, PipelineConfig(), out_dir=out_dir, case_id="demo")

# one finding per quadrant at most, each with scores and file names
for finding in report.findings:
    d = finding.detection
    print(d.quadrant.value, d.angulation.value, [round(v) for v in d.box.to_list()],
          f"conf={d.confidence:.3f}", f"p_peri={finding.scores.p_pericoronitis:.3f}",
          finding.label.value, finding.heatmap_path)

# the JSON report is what the CLI writes to report.json
print(report.dumps()[:400])
print(sorted(p.name for p in out_dir.iterdir()))
