"""Three-stage cascade CNN face detector with five-point landmarks, in numpy."""

__version__ = "0.1.0"

from .cascade import DetectionResult, detect, run_cascade  # noqa: E402
from .geometry import BoundingBox, iou  # noqa: E402
from .model import CascadeModel, load_model, save_model  # noqa: E402

__all__ = [
    "BoundingBox", "CascadeModel", "DetectionResult", "__version__", "detect", "iou",
    "load_model", "run_cascade", "save_model",
]
