"""Latent-space PGD attack on map construction: losses, PGD step and the driver loop."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .diffusion.sampler import ConditioningBundle, ddim_denoise, forward_noise
from .diffusion.schedule import compute_t_star
from .errors import ConfigurationError, ContractViolation, NumericalFailure
from .geometry import BEV_X_RANGE, BEV_Y_RANGE, BOUNDARY
from .guidance import NEGATIVE_ANCHOR, SHADOW_PROMPT, EmbeddingPair, GuidancePrompts, direction_loss, total_loss
from .victim.model import MapPrediction, softplus_neg

log = logging.getLogger(__name__)

GOALS = ("remove", "inject")


@dataclass
class AttackConfig:
    goal: str = "remove"
    s: float = 0.3
    K: int = 30
    epsilon_budget: float = 0.5
    eta: float = 0.05
    lambda_conf: float = 1.0
    lambda_spread: float = 0.1
    y_star: Optional[float] = 10.0
    K_target: int = 2
    gamma: float = 0.1
    lambda_clip: float = 0.5
    clip_target: str = SHADOW_PROMPT
    clip_negative: str = NEGATIVE_ANCHOR
    lambda_neg: float = 0.5
    guidance_scale: float = 2.0
    use_checkpoint: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        # K = 0 and epsilon = 0 are accepted as degenerate no-op attacks
        if self.goal not in GOALS:
            raise ConfigurationError(f"goal must be one of {GOALS}, got {self.goal!r}")
        if self.epsilon_budget < 0 or self.eta <= 0 or self.K < 0:
            raise ConfigurationError("need epsilon_budget >= 0, eta > 0 and K >= 0")
        if not 0.0 < self.s < 1.0:
            raise ConfigurationError(f"strength must lie in (0, 1), got {self.s}")
        if self.lambda_clip < 0 or self.lambda_conf < 0 or self.lambda_spread < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.goal == "inject":
            if self.y_star is None:
                raise ConfigurationError("inject goal needs y_star")
            if self.K_target < 1:
                raise ConfigurationError("inject goal needs K_target >= 1")
            if self.gamma < 0:
                raise ConfigurationError("gamma must be nonnegative")

    def to_record(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "AttackConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(rec) - known
        if unknown:
            raise ConfigurationError(f"unknown attack config fields: {sorted(unknown)}")
        return cls(**rec)

    def config_hash(self) -> str:
        return config_hash(self.to_record())

    @property
    def prompts(self) -> GuidancePrompts:
        return GuidancePrompts(self.clip_target, self.clip_negative, self.lambda_neg)


def config_hash(record: dict) -> str:
    blob = json.dumps(record, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def tensor_hash(t: torch.Tensor) -> str:
    arr = t.detach().cpu().contiguous().numpy()
    return hashlib.sha256(arr.tobytes() + str(arr.dtype).encode() + str(arr.shape).encode()).hexdigest()


# -- losses --------------------------------------------------------------------


def spread(points: torch.Tensor) -> torch.Tensor:
    """Mean squared distance of each polyline's points from their centroid; (..., N_p, 2) -> (...)."""
    centroid = points.mean(dim=-2, keepdim=True)
    return ((points - centroid) ** 2).sum(-1).mean(-1)


def normalize_bev(points: torch.Tensor) -> torch.Tensor:
    """BEV metres -> unit-square coordinates over the map extent."""
    lo = torch.tensor([BEV_X_RANGE[0], BEV_Y_RANGE[0]], dtype=points.dtype)
    size = torch.tensor([BEV_X_RANGE[1] - BEV_X_RANGE[0], BEV_Y_RANGE[1] - BEV_Y_RANGE[0]], dtype=points.dtype)
    return (points - lo) / size


def confidence_weights(logits: torch.Tensor) -> torch.Tensor:
    """Detached per-query max confidence, renormalised to mean 1."""
    conf = torch.sigmoid(logits.detach()).max(dim=-1).values
    mean = conf.mean()
    return conf / mean if mean > 0 else torch.ones_like(conf)


def loss_remove(pred: MapPrediction, cfg: AttackConfig) -> torch.Tensor:
    conf = torch.sigmoid(pred.logits).max(dim=-1).values
    w = confidence_weights(pred.logits)
    # spread is taken in normalised map coordinates so lambda_spread does not depend on the metric extent
    return cfg.lambda_conf * conf.mean() - cfg.lambda_spread * (w * spread(normalize_bev(pred.points))).mean()


def select_target_queries(pred: MapPrediction, y_star: float, K_target: int) -> list[int]:
    """The ``K_target`` queries whose centroid y is closest to ``y_star``; ties go to the lower index."""
    Q = pred.num_queries
    if not 1 <= K_target <= Q:
        raise ContractViolation(f"K_target must lie in [1, {Q}], got {K_target}")
    cy = pred.points.detach()[..., 1].double().mean(-1).cpu().numpy()
    order = np.argsort(np.abs(cy - y_star), kind="stable")
    return [int(i) for i in order[:K_target]]


def target_polyline(y_star: float, num_points: int, dtype=torch.float64) -> torch.Tensor:
    """Horizontal polyline across the full BEV x-extent at lateral position ``y_star``."""
    xs = torch.linspace(BEV_X_RANGE[0], BEV_X_RANGE[1], num_points, dtype=dtype)
    return torch.stack([xs, torch.full_like(xs, float(y_star))], dim=-1)


def placement(points: torch.Tensor, p_star: torch.Tensor) -> torch.Tensor:
    """Summed squared distance of the targeted polylines (K, N_p, 2) to the target polyline (N_p, 2)."""
    return ((points - p_star) ** 2).sum()


def loss_inject(pred: MapPrediction, cfg: AttackConfig, targets: Optional[list[int]] = None) -> torch.Tensor:
    if cfg.y_star is None:
        raise ConfigurationError("inject loss needs y_star")
    if targets is None:
        targets = select_target_queries(pred, cfg.y_star, cfg.K_target)
    idx = torch.as_tensor(targets, dtype=torch.long)
    p_star = target_polyline(cfg.y_star, pred.points.shape[1], pred.points.dtype)
    bce = softplus_neg(pred.logits[idx, BOUNDARY]).sum()
    # geometry in normalised map coordinates, as in loss_remove
    place = placement(normalize_bev(pred.points[idx]), normalize_bev(p_star))
    others = torch.ones(pred.num_queries, dtype=torch.bool)
    others[idx] = False
    if others.any():
        suppress = torch.sigmoid(pred.logits[others]).max(dim=-1).values.mean()
    else:
        suppress = pred.logits.new_zeros(())
    return bce + place + cfg.gamma * suppress


def attack_loss(pred: MapPrediction, cfg: AttackConfig, targets: Optional[list[int]] = None) -> torch.Tensor:
    return loss_remove(pred, cfg) if cfg.goal == "remove" else loss_inject(pred, cfg, targets)


# -- optimisation state --------------------------------------------------------


@dataclass
class PerturbationState:
    delta: torch.Tensor  # (V, C, h, w)
    fixed_noise: torch.Tensor
    iteration: int = 0
    loss_history: list[dict] = field(default_factory=list)
    noise_hash: str = ""

    def __post_init__(self):
        if self.delta.shape != self.fixed_noise.shape:
            raise ContractViolation("delta and fixed noise must share a shape")
        self.fixed_noise = self.fixed_noise.detach().clone()
        if not self.noise_hash:
            self.noise_hash = tensor_hash(self.fixed_noise)

    def current_noise_hash(self) -> str:
        return tensor_hash(self.fixed_noise)


def pgd_step(state: PerturbationState, grad: torch.Tensor, cfg: AttackConfig) -> PerturbationState:
    """delta <- clip(delta - eta * sign(grad), -eps, eps); a non-finite gradient leaves delta as is."""
    if grad.shape != state.delta.shape:
        raise ContractViolation("gradient shape differs from delta")
    if not torch.isfinite(grad).all():
        log.warning("pgd_step: non-finite gradient at iteration %d, step skipped", state.iteration)
        return dataclasses.replace(state, iteration=state.iteration + 1)
    eps = cfg.epsilon_budget
    delta = (state.delta.detach() - cfg.eta * torch.sign(grad)).clamp(-eps, eps)
    return dataclasses.replace(state, delta=delta, iteration=state.iteration + 1)


# -- driver ------------------------------------------------------------------------


@dataclass
class AttackResult:
    images: np.ndarray  # (V, 3, H, W) in [0, 1]
    prediction: MapPrediction
    loss_history: list[dict]
    config: dict
    seed: int
    noise_hash: str = ""
    extra: dict = field(default_factory=dict)
    method: str = "latent"

    def metadata(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "noise_hash": self.noise_hash,
            "loss_history": self.loss_history,
            "extra": self.extra,
        }

    def save(self, directory, camera_names: Optional[list[str]] = None) -> Path:
        from .corpus.io import save_image

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = camera_names or [f"view{i}" for i in range(len(self.images))]
        for name, img in zip(names, self.images):
            save_image(d / f"{name}.png", img)
        np.savez(d / "images.npz", images=self.images,
                 logits=self.prediction.logits.detach().double().cpu().numpy(),
                 points=self.prediction.points.detach().double().cpu().numpy())
        (d / "result.json").write_text(json.dumps(self.metadata(), indent=1, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "AttackResult":
        d = Path(directory)
        meta = json.loads((d / "result.json").read_text())
        arrays = np.load(d / "images.npz")
        pred = MapPrediction(torch.from_numpy(arrays["logits"]), torch.from_numpy(arrays["points"]))
        return cls(arrays["images"], pred, meta["loss_history"], meta["config"], meta["seed"],
                   meta["noise_hash"], meta["extra"], meta["method"])


class LatentProblem:
    """Everything fixed for one scene's attack: clean latents, conditioning and noise draw.

    ``render(delta)`` is the partial-diffusion reconstruction of the perturbed
    latents and ``objective(delta)`` the scalar loss minimised by PGD.
    """

    def __init__(self, scene, cfg: AttackConfig, generator, victim, guidance: Optional[EmbeddingPair] = None,
                 images: Optional[torch.Tensor] = None, conditioning: Optional[ConditioningBundle] = None):
        self.scene = scene
        self.cfg = cfg
        self.generator = generator
        self.victim = victim
        self.guidance = guidance
        dtype = generator.dtype
        x = images if images is not None else torch.from_numpy(np.asarray(scene.images))
        self.x_clean = x.to(dtype)
        with torch.no_grad():
            self.z0 = generator.encode(self.x_clean)
        self.cond = conditioning or generator.conditioning(scene, cfg.guidance_scale)
        self.t_star = compute_t_star(cfg.s, generator.schedule.T)
        g = torch.Generator().manual_seed(int(cfg.seed))
        self.fixed_noise = torch.randn(self.z0.shape, generator=g, dtype=torch.float64).to(dtype)
        self.targets: Optional[list[int]] = None

    def render(self, delta: torch.Tensor) -> torch.Tensor:
        z = forward_noise(self.z0, delta, self.t_star, self.fixed_noise, self.generator.schedule)
        z = ddim_denoise(z, self.t_star, self.cond, self.generator, self.generator.schedule,
                         use_checkpoint=self.cfg.use_checkpoint)
        return self.generator.decode(z)

    def objective(self, delta: torch.Tensor) -> tuple[torch.Tensor, dict]:
        img = self.render(delta)
        pred = self.victim.predict(img, self.scene.cameras)
        if self.cfg.goal == "inject" and self.targets is None:
            # targets are fixed once, from the first iterate's prediction
            self.targets = select_target_queries(pred, self.cfg.y_star, self.cfg.K_target)
        la = attack_loss(pred, self.cfg, self.targets)
        parts = {"attack": la.item(), "confidence": torch.sigmoid(pred.logits.detach()).max(-1).values.mean().item()}
        total = la
        if self.guidance is not None and self.cfg.lambda_clip > 0:
            lc = direction_loss(self.x_clean, img, self.cfg.prompts, self.guidance)
            parts["clip"] = lc.item()
            total = total_loss(la, lc, self.cfg.lambda_clip)
        parts["total"] = total.item()
        return total, parts


def run_attack(scene, cfg: AttackConfig, generator, victim, guidance: Optional[EmbeddingPair] = None,
               problem: Optional[LatentProblem] = None) -> AttackResult:
    """Latent PGD against ``victim`` through the partial diffusion reconstruction of ``scene``."""
    problem = problem or LatentProblem(scene, cfg, generator, victim, guidance)
    state = PerturbationState(torch.zeros_like(problem.z0), problem.fixed_noise)
    # the ball is checked at the precision delta is stored in
    eps = float(torch.tensor(cfg.epsilon_budget, dtype=state.delta.dtype))
    for k in range(cfg.K):
        delta = state.delta.detach().requires_grad_(True)
        try:
            total, parts = problem.objective(delta)
            (grad,) = torch.autograd.grad(total, delta)
        except NumericalFailure as exc:
            log.warning("iteration %d skipped: %s", k, exc)
            state = dataclasses.replace(state, iteration=state.iteration + 1)
            continue
        state.loss_history.append({"iteration": k, **parts})
        state = pgd_step(state, grad, cfg)
        if float(state.delta.abs().max()) > eps:
            raise ContractViolation(f"delta left the L-inf ball at iteration {k}")
    if state.current_noise_hash() != state.noise_hash:
        raise ContractViolation("fixed noise changed during the attack")
    with torch.no_grad():
        images = problem.render(state.delta)
        pred = victim.predict(images, scene.cameras)
    final = {"iteration": cfg.K, "confidence": float(torch.sigmoid(pred.logits).max(-1).values.mean())}
    with torch.no_grad():
        final["attack"] = float(attack_loss(pred, cfg, problem.targets))
    return AttackResult(
        images=images.detach().cpu().float().numpy(),
        prediction=pred.detach(),
        loss_history=state.loss_history + [final],
        config=cfg.to_record(),
        seed=cfg.seed,
        noise_hash=state.noise_hash,
        extra={
            "t_star": problem.t_star,
            "delta_linf": float(state.delta.abs().max()) if state.delta.numel() else 0.0,
            "targets": problem.targets,
            "scene_id": scene.scene_id,
        },
    )


def random_delta_control(scene, cfg: AttackConfig, generator, victim, linf: float,
                         problem: Optional[LatentProblem] = None, seed: Optional[int] = None) -> AttackResult:
    """Uniform random latent perturbation rescaled to exactly ``linf`` in the L-inf norm."""
    problem = problem or LatentProblem(scene, cfg, generator, victim)
    g = torch.Generator().manual_seed(int(cfg.seed if seed is None else seed) + 7919)
    u = torch.rand(problem.z0.shape, generator=g, dtype=torch.float64) * 2 - 1
    delta = (u / u.abs().max() * linf).to(problem.z0.dtype) if linf > 0 else torch.zeros_like(problem.z0)
    with torch.no_grad():
        images = problem.render(delta)
        pred = victim.predict(images, scene.cameras)
    return AttackResult(images.cpu().float().numpy(), pred.detach(), [], cfg.to_record(), cfg.seed,
                        tensor_hash(problem.fixed_noise), {"delta_linf": linf, "scene_id": scene.scene_id},
                        method="random_latent")
