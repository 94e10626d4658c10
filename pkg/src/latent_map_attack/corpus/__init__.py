from .io import load_external, load_manifest, save_corpus, save_scene
from .layout import MapElement, generate_layout, road_polygon
from .render import CameraParams, default_rig, render_control, render_views, road_mask
from .scene import Corpus, Scene, build_manifest, make_scene

__all__ = [
    "CameraParams",
    "Corpus",
    "MapElement",
    "Scene",
    "build_manifest",
    "default_rig",
    "generate_layout",
    "load_external",
    "load_manifest",
    "make_scene",
    "render_control",
    "render_views",
    "road_mask",
    "road_polygon",
    "save_corpus",
    "save_scene",
]
