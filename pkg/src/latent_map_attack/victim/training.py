from __future__ import annotations

import logging

import numpy as np
import torch

from ..errors import TrainingFailure
from ..geometry import CLASSES, resample_polyline
from .detections import DEFAULT_TAU, threshold_detections
from .matching import layout_targets, set_loss
from .model import ToyMapNet, ToyVictim

log = logging.getLogger(__name__)


def train_toy_model(images: torch.Tensor, layouts: list, steps: int = 3000, batch: int = 16,
                    lr: float = 5e-4, seed: int = 0, net: ToyMapNet | None = None,
                    log_every: int = 250) -> tuple[ToyVictim, list[float]]:
    """Set-prediction training on (N, V, 3, H, W) images with one layout per sample."""
    torch.manual_seed(seed)
    if net is None:
        net = ToyMapNet(num_views=images.shape[1], image_size=images.shape[-1])
    net.train()
    g = torch.Generator().manual_seed(seed)
    targets = [layout_targets(lay, net.num_points) for lay in layouts]
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    history: list[float] = []
    for step in range(steps):
        idx = torch.randint(0, len(images), (batch,), generator=g).tolist()
        logits, points = net(images[idx])
        loss = sum(set_loss(logits[b], points[b], *targets[i]) for b, i in enumerate(idx)) / batch
        if not torch.isfinite(loss):
            tail = ", ".join(f"{v:.4g}" for v in history[-5:])
            raise TrainingFailure(f"victim loss non-finite at step {step}; last losses: [{tail}]")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
        opt.step()
        sched.step()
        history.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("victim step %d loss %.4f", step, history[-1])
    return ToyVictim(net), history


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return 0.5 * (d.min(1).mean() + d.min(0).mean())


def detection_quality(victim: ToyVictim, images: torch.Tensor, layouts: list, tau: float = DEFAULT_TAU,
                      max_chamfer: float = 1.5) -> dict:
    """Per-class precision/recall with greedy Chamfer matching at ``max_chamfer`` metres."""
    tp = dict.fromkeys(CLASSES, 0)
    n_pred = dict.fromkeys(CLASSES, 0)
    n_gt = dict.fromkeys(CLASSES, 0)
    with torch.no_grad():
        for x, layout in zip(images, layouts):
            det = threshold_detections(victim.predict(x), tau)
            for cls in CLASSES:
                preds = [d.polyline for d in det.of_class(cls)]
                gts = [resample_polyline(e.points, victim.num_points) for e in layout if e.cls == cls]
                n_pred[cls] += len(preds)
                n_gt[cls] += len(gts)
                used = set()
                for p in preds:
                    dists = [(chamfer(p, g), j) for j, g in enumerate(gts) if j not in used]
                    if dists and min(dists)[0] <= max_chamfer:
                        used.add(min(dists)[1])
                        tp[cls] += 1
    out = {}
    for cls in CLASSES:
        out[cls] = {
            "precision": tp[cls] / n_pred[cls] if n_pred[cls] else None,
            "recall": tp[cls] / n_gt[cls] if n_gt[cls] else None,
            "predicted": n_pred[cls],
            "ground_truth": n_gt[cls],
        }
    out["tau"] = tau
    out["max_chamfer_m"] = max_chamfer
    return out
