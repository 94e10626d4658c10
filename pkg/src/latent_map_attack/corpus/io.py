"""On-disk corpus layout.

    <root>/manifest.json
    <root>/<scene_id>/scene.json      layout, cameras, caption, seeds
    <root>/<scene_id>/<CAMERA>.png    8-bit RGB view, lossless
    <root>/<scene_id>/caption.txt

``scene.json`` schema (format ``lma-v1``)::

    {"scene_id": str, "prompt": str,
     "cameras": [{"name", "image", "fx", "fy", "cx", "cy", "width", "height",
                  "mount_height", "yaw", "pitch", "x", "y"}, ...],
     "layout": [{"class": "divider"|"boundary"|"crossing",
                 "points": [[x, y], ...]}, ...],
     "units": "..."}

Camera intrinsics (fx, fy, cx, cy, width, height) and extrinsics
(mount_height, yaw, pitch, x, y) are required; unknown keys are ignored.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .layout import MapElement
from .render import CameraParams
from .scene import Scene

log = logging.getLogger(__name__)

SCENE_FORMAT = "lma-v1"
INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "width", "height")
EXTRINSIC_KEYS = ("mount_height", "yaw")


def save_image(path: Path, image: np.ndarray) -> None:
    """Write a (3, H, W) [0, 1] array as 8-bit PNG."""
    arr = np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def save_scene(root: Path, scene: Scene) -> Path:
    d = Path(root) / scene.scene_id
    d.mkdir(parents=True, exist_ok=True)
    cams = []
    for cam, img in zip(scene.cameras, scene.images):
        fname = f"{cam.name}.png"
        save_image(d / fname, img)
        cams.append({**cam.to_record(), "image": fname})
    record = {
        "format": SCENE_FORMAT,
        "scene_id": scene.scene_id,
        "prompt": scene.prompt,
        "layout_seed": scene.layout_seed,
        "appearance_seed": scene.appearance_seed,
        "cameras": cams,
        "layout": [e.to_record() for e in scene.gt_layout],
        "units": "BEV metres, ego frame: x lateral (right +), y longitudinal (forward +)",
    }
    (d / "scene.json").write_text(json.dumps(record, indent=1))
    (d / "caption.txt").write_text(scene.prompt + "\n")
    return d


def save_corpus(root: Path, manifest: dict, scenes) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    for scene in scenes:
        save_scene(root, scene)
    return root


def _parse_scene(d: Path) -> Scene:
    rec = json.loads((d / "scene.json").read_text())
    cameras, images = [], []
    for c in rec["cameras"]:
        missing = [k for k in INTRINSIC_KEYS + EXTRINSIC_KEYS if k not in c]
        if missing:
            raise KeyError(f"camera {c.get('name', '?')} missing {missing}")
        fields = {k: c[k] for k in CameraParams.__dataclass_fields__ if k in c}
        cameras.append(CameraParams(**fields))
        images.append(load_image(d / c["image"]))
    if not cameras:
        raise KeyError("no cameras")
    layout = [MapElement.from_record(e) for e in rec["layout"]]
    return Scene(
        scene_id=rec["scene_id"],
        images=np.stack(images),
        cameras=cameras,
        gt_layout=layout,
        prompt=rec.get("prompt", ""),
        layout_seed=int(rec.get("layout_seed", 0)),
        appearance_seed=int(rec.get("appearance_seed", 0)),
    )


def load_external(path, format: str = SCENE_FORMAT) -> Iterator[Scene]:
    """Stream scenes from a directory of per-scene records.

    Malformed records are skipped with a logged diagnostic; the number of
    skipped records is logged once the stream is exhausted.
    """
    if format != SCENE_FORMAT:
        raise ValueError(f"unsupported scene format {format!r}; expected {SCENE_FORMAT!r}")
    root = Path(path)
    skipped = 0
    for d in sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []:
        if not (d / "scene.json").exists():
            continue
        try:
            scene = _parse_scene(d)
        except (KeyError, ValueError, OSError, json.JSONDecodeError) as exc:
            skipped += 1
            log.warning("skipping malformed scene record %s: %s", d.name, exc)
            continue
        yield scene
    log.info("load_external: %d record(s) skipped", skipped)


def load_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())
