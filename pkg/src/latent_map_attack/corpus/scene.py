from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CLASSES
from .layout import MapElement, generate_layout
from .render import CameraParams, caption, default_rig, render_views, sample_appearance

FORMAT_VERSION = "lma-corpus-v1"
DEFAULT_SPLITS = {"generator": 0.4, "victim": 0.45, "evaluate": 0.15}


@dataclass
class Scene:
    """One multi-view driving scene: the unit every attack operates on."""

    scene_id: str
    images: np.ndarray  # (V, 3, H, W) float32 in [0, 1]
    cameras: list[CameraParams]
    gt_layout: list[MapElement]
    prompt: str
    layout_seed: int = 0
    appearance_seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def count_gt(self, cls: str) -> int:
        return sum(e.cls == cls for e in self.gt_layout)


def make_scene(scene_id: str, layout_seed: int, appearance_seed: int,
               cameras: list[CameraParams] | None = None) -> Scene:
    cameras = cameras or default_rig()
    layout = generate_layout(layout_seed)
    images = render_views(layout, cameras, appearance_seed)
    prompt = caption(layout, sample_appearance(appearance_seed))
    return Scene(scene_id, images, cameras, layout, prompt, layout_seed, appearance_seed)


def scene_seeds(master_seed: int, index: int) -> tuple[int, int]:
    layout_seed, appearance_seed = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(2)
    return int(layout_seed), int(appearance_seed)


def build_manifest(count: int, master_seed: int, splits: dict[str, float] | None = None) -> dict:
    splits = splits or DEFAULT_SPLITS
    ids = [f"scene_{i:05d}" for i in range(count)]
    names = list(splits)
    fracs = np.array([splits[n] for n in names], dtype=np.float64)
    bounds = np.round(np.cumsum(fracs / fracs.sum()) * count).astype(int)
    assigned, start = {}, 0
    for name, stop in zip(names, bounds):
        assigned[name] = ids[start:stop]
        start = stop
    return {
        "format_version": FORMAT_VERSION,
        "count": count,
        "master_seed": int(master_seed),
        "splits": assigned,
        "seeds": {sid: list(scene_seeds(master_seed, i)) for i, sid in enumerate(ids)},
        "classes": list(CLASSES),
        "units": "BEV metres, ego frame: x lateral (right +), y longitudinal (forward +)",
    }


class Corpus:
    """Procedural corpus: a pure function of (count, master seed).

    Scenes are rendered on demand and cached.
    """

    def __init__(self, manifest: dict, cameras: list[CameraParams] | None = None):
        self.manifest = manifest
        self.cameras = cameras or default_rig()
        self._cache: dict[str, Scene] = {}

    @classmethod
    def generate(cls, count: int, master_seed: int, splits: dict[str, float] | None = None) -> "Corpus":
        return cls(build_manifest(count, master_seed, splits))

    def __len__(self) -> int:
        return self.manifest["count"]

    def split(self, name: str) -> list[str]:
        return list(self.manifest["splits"][name])

    def scene(self, scene_id: str) -> Scene:
        if scene_id not in self._cache:
            ls, aps = self.manifest["seeds"][scene_id]
            self._cache[scene_id] = make_scene(scene_id, ls, aps, self.cameras)
        return self._cache[scene_id]

    def scenes(self, split: str | None = None) -> list[Scene]:
        ids = self.split(split) if split else list(self.manifest["seeds"])
        return [self.scene(i) for i in ids]
