from .detections import DEFAULT_TAU, Detection, DetectionSet, class_counts, count_by_class, threshold_detections
from .model import MapModel, MapPrediction, ToyMapNet, ToyVictim
from .training import detection_quality, train_toy_model

__all__ = [
    "DEFAULT_TAU",
    "Detection",
    "DetectionSet",
    "MapModel",
    "MapPrediction",
    "ToyMapNet",
    "ToyVictim",
    "class_counts",
    "count_by_class",
    "detection_quality",
    "threshold_detections",
    "train_toy_model",
]
