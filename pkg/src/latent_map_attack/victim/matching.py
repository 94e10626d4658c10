"""Bipartite matching and the set-prediction training loss."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torchvision.ops import sigmoid_focal_loss

from ..geometry import BEV_X_RANGE, BEV_Y_RANGE, CLASS_INDEX, resample_polyline

POINT_WEIGHT = 5.0
CLASS_WEIGHT = 2.0
_NORM = (BEV_X_RANGE[1], BEV_Y_RANGE[1])


def layout_targets(layout, num_points: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Ground-truth class indices (G,) and resampled polylines (G, N_p, 2)."""
    if not layout:
        return torch.zeros(0, dtype=torch.long), torch.zeros(0, num_points, 2, dtype=dtype)
    classes = torch.tensor([CLASS_INDEX[e.cls] for e in layout])
    pts = np.stack([resample_polyline(e.points, num_points) for e in layout])
    return classes, torch.as_tensor(pts, dtype=dtype)


def _normalise(points: torch.Tensor) -> torch.Tensor:
    return points / points.new_tensor(_NORM)


def match_cost(logits: torch.Tensor, points: torch.Tensor, gt_cls: torch.Tensor,
               gt_pts: torch.Tensor, point_weight: float = POINT_WEIGHT) -> torch.Tensor:
    """(Q, G) cost: class NLL of the ground-truth class plus mean point L1."""
    nll = F.softplus(-logits[:, gt_cls])
    l1 = (_normalise(points)[:, None] - _normalise(gt_pts)[None]).abs().mean(dim=(-1, -2))
    return nll + point_weight * l1


def hungarian(logits: torch.Tensor, points: torch.Tensor, gt_cls: torch.Tensor,
              gt_pts: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    if len(gt_cls) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    with torch.no_grad():
        cost = match_cost(logits, points, gt_cls, gt_pts).double().cpu().numpy()
    return linear_sum_assignment(cost)


def set_loss(logits: torch.Tensor, points: torch.Tensor, gt_cls: torch.Tensor,
             gt_pts: torch.Tensor, point_weight: float = POINT_WEIGHT) -> torch.Tensor:
    """Matched queries learn their element's class and polyline; the rest learn "no object"."""
    rows, cols = hungarian(logits, points, gt_cls, gt_pts)
    target = torch.zeros_like(logits)
    rows_t = torch.as_tensor(rows, dtype=torch.long)
    cols_t = torch.as_tensor(cols, dtype=torch.long)
    if len(rows):
        target[rows_t, gt_cls[cols_t]] = 1.0
    n = max(len(gt_cls), 1)
    # focal loss keeps confident scores off the sigmoid plateau, as in vectorized map models
    cls_loss = CLASS_WEIGHT * sigmoid_focal_loss(logits, target, alpha=0.25, gamma=2.0, reduction="sum") / n
    if not len(rows):
        return cls_loss
    l1 = (_normalise(points[rows_t]) - _normalise(gt_pts[cols_t])).abs().mean(dim=(-1, -2))
    return cls_loss + point_weight * l1.sum() / n
