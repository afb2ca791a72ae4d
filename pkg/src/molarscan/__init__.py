"""Third-molar detection, pericoronitis classification and Grad-CAM heatmaps
for panoramic radiographs, plus the metrics used to evaluate them."""

from .boxes import BBox
from .classification import CaseLabel, ClassScores, classify
from .detection import Angulation, Detection, Quadrant
from .errors import InputError, InvariantError, ModelError, MolarScanError
from .explainability import Heatmap, explain
from .graph import GraphModel, load_model, reference_net
from .imaging import RadiographImage, RoiPatch, letterbox_resize, load_image
from .pipeline import PipelineConfig, run_batch, run_case

__version__ = "0.1.0"
