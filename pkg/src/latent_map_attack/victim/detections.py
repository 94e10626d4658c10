from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ContractViolation
from ..geometry import CLASSES
from .model import MapPrediction

DEFAULT_TAU = 0.3


@dataclass(frozen=True)
class Detection:
    cls: str
    confidence: float
    polyline: np.ndarray  # (N_p, 2) BEV metres
    query: int


@dataclass
class DetectionSet:
    detections: list[Detection] = field(default_factory=list)
    tau: float = DEFAULT_TAU

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def of_class(self, cls: str) -> list[Detection]:
        return [d for d in self.detections if d.cls == cls]


def threshold_detections(pred: MapPrediction, tau: float = DEFAULT_TAU) -> DetectionSet:
    """Keep queries whose best class probability reaches ``tau``.

    Post-hoc only: nothing here is differentiable or used by any loss.
    """
    if not 0.0 < tau < 1.0:
        raise ContractViolation(f"threshold must lie in (0, 1), got {tau}")
    with torch.no_grad():
        probs = torch.sigmoid(pred.logits.double()).cpu().numpy()
        points = pred.points.double().cpu().numpy()
    conf = probs.max(axis=1)
    best = probs.argmax(axis=1)
    dets = [
        Detection(CLASSES[int(best[q])], float(conf[q]), points[q].copy(), q)
        for q in range(len(conf))
        if conf[q] >= tau
    ]
    return DetectionSet(dets, tau)


def count_by_class(det: DetectionSet, cls: str) -> int:
    if cls not in CLASSES:
        raise ContractViolation(f"unknown class {cls!r}")
    return sum(d.cls == cls for d in det.detections)


def class_counts(det: DetectionSet) -> dict[str, int]:
    return {c: count_by_class(det, c) for c in CLASSES}
