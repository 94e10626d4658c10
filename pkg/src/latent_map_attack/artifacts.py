"""Training pipeline and loading of the versioned toy model artifacts."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .corpus import Corpus, render_control
from .corpus.render import sample_appearance
from .diffusion.generator import LatentGenerator
from .diffusion.training import psnr, train_autoencoder, train_denoiser
from .errors import ConfigurationError
from .guidance import EmbeddingPair, train_embedding_pair
from .victim import ToyVictim, detection_quality, train_toy_model

log = logging.getLogger(__name__)

ENV_ARTIFACTS = "LMA_ARTIFACTS"
ARTIFACT_VERSION = "toy-v1"
CORPUS_COUNT = 800
CORPUS_SEED = 20240601


def default_artifact_dir() -> Path:
    if os.environ.get(ENV_ARTIFACTS):
        return Path(os.environ[ENV_ARTIFACTS])
    return Path(__file__).resolve().parents[2] / "artifacts" / ARTIFACT_VERSION


@dataclass
class Models:
    generator: LatentGenerator
    victim: ToyVictim
    guidance: Optional[EmbeddingPair]


def set_determinism(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def _stack(scenes) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.images for s in scenes]))


def train_generator(corpus: Corpus, out_dir, ae_steps: int = 4000, den_steps: int = 4000,
                    seed: int = 0) -> LatentGenerator:
    t0 = time.time()
    scenes = corpus.scenes("generator")
    views = _stack(scenes).flatten(0, 1)
    gen = LatentGenerator.create(seed=seed)
    ae_hist = train_autoencoder(gen, views, steps=ae_steps, seed=seed)
    with torch.no_grad():
        latents = torch.cat([gen.encode(views[i:i + 64]) for i in range(0, len(views), 64)])
        sample = views[: min(64, len(views))]
        recon_psnr = [psnr(gen.decode(gen.encode(x[None])), x[None]) for x in sample]
    controls = torch.from_numpy(np.stack([render_control(s.gt_layout, cam) for s in scenes for cam in s.cameras]))
    prompts = [s.prompt for s in scenes for _ in s.cameras]
    den_hist = train_denoiser(gen, latents, controls, prompts, steps=den_steps, seed=seed)
    gen.info = {
        "artifact_version": ARTIFACT_VERSION,
        "training": {
            "corpus": {"count": len(corpus), "master_seed": corpus.manifest["master_seed"], "split": "generator"},
            "autoencoder_steps": ae_steps,
            "denoiser_steps": den_steps,
            "seed": seed,
            "final_autoencoder_loss": float(np.mean(ae_hist[-50:])),
            "final_denoiser_loss": float(np.mean(den_hist[-50:])),
            "seconds": round(time.time() - t0, 1),
        },
        "model_card": {
            "reconstruction_psnr_mean_db": float(np.mean(recon_psnr)),
            "reconstruction_psnr_min_db": float(np.min(recon_psnr)),
            # round-trip floor asserted on training views
            "psnr_floor_db": float(np.floor(np.min(recon_psnr)) - 1.0),
        },
    }
    gen.save(out_dir)
    return gen


def train_guidance(corpus: Corpus, out_dir, steps: int = 1500, seed: int = 0) -> EmbeddingPair:
    scenes = corpus.scenes("generator")
    views = _stack(scenes).flatten(0, 1)
    apps = [sample_appearance(s.appearance_seed) for s in scenes for _ in s.cameras]
    pair, hist = train_embedding_pair(views, apps, steps=steps, seed=seed)
    pair.info["artifact_version"] = ARTIFACT_VERSION
    pair.info["training"] = {"split": "generator", "steps": steps, "seed": seed,
                             "final_loss": float(np.mean(hist[-50:]))}
    pair.save(out_dir)
    return pair


def reconstruct(gen: LatentGenerator, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return gen.decode(gen.encode(images))


def train_victim(corpus: Corpus, gen: LatentGenerator, out_dir, steps: int = 4000, seed: int = 0) -> ToyVictim:
    """Train on clean victim-split scenes plus their autoencoder reconstructions."""
    t0 = time.time()
    scenes = corpus.scenes("victim")
    clean = _stack(scenes)
    recon = torch.stack([reconstruct(gen, x) for x in clean])
    images = torch.cat([clean, recon])
    layouts = [s.gt_layout for s in scenes] * 2
    victim, hist = train_toy_model(images, layouts, steps=steps, seed=seed)
    held = corpus.scenes("evaluate")[:60]
    held_x = _stack(held)
    held_l = [s.gt_layout for s in held]
    victim.info = {
        "artifact_version": ARTIFACT_VERSION,
        "training": {"split": "victim", "samples": len(images), "steps": steps, "seed": seed,
                     "inputs": "clean renders and autoencoder reconstructions",
                     "final_loss": float(np.mean(hist[-50:])), "seconds": round(time.time() - t0, 1)},
        "held_out_quality": {
            "clean": detection_quality(victim, held_x, held_l),
            "reconstructed": detection_quality(victim, torch.stack([reconstruct(gen, x) for x in held_x]), held_l),
        },
    }
    victim.save(out_dir)
    return victim


def training_corpus(count: int = CORPUS_COUNT, seed: int = CORPUS_SEED) -> Corpus:
    return Corpus.generate(count, seed)


def train_all(root, count: int = CORPUS_COUNT, seed: int = CORPUS_SEED, **steps) -> Models:
    root = Path(root)
    corpus = training_corpus(count, seed)
    gen = train_generator(corpus, root / "generator", steps.get("ae_steps", 4000), steps.get("den_steps", 4000))
    guidance = train_guidance(corpus, root / "guidance", steps.get("guidance_steps", 1500))
    victim = train_victim(corpus, gen, root / "victim", steps.get("victim_steps", 4000))
    (root / "corpus.json").write_text(json.dumps({"count": count, "master_seed": seed}, indent=1))
    return Models(gen, victim, guidance)


def load_models(root=None, require_guidance: bool = False) -> Models:
    root = Path(root) if root else default_artifact_dir()
    for part in ("generator", "victim"):
        if not (root / part).is_dir():
            raise ConfigurationError(f"missing {part} checkpoint under {root}")
    guidance = None
    if (root / "guidance").is_dir():
        guidance = EmbeddingPair.load(root / "guidance")
    elif require_guidance:
        raise ConfigurationError(f"missing guidance checkpoint under {root}")
    return Models(LatentGenerator.load(root / "generator"), ToyVictim.load(root / "victim"), guidance)
