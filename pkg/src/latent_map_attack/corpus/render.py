"""Pinhole rendering of BEV layouts into low-resolution camera-like views.

Rendering is an inverse mapping: every (super-sampled) pixel ray is
intersected with the ground plane and shaded from the layout. Appearance
nuisances (shadow bands, wetness, surface texture, brightness, sky and
facade colours) come from an appearance seed that never touches topology.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..geometry import point_in_polygon, point_to_polyline_distance
from .layout import MapElement, road_bounds, x_at

IMAGE_SIZE = 128
SUPERSAMPLE = 2
HORIZON_FADE = (40.0, 90.0)  # m, ground fades to haze over this range
CURB_HALF_WIDTH = 0.30  # m
DIVIDER_HALF_WIDTH = 0.15  # m
DASH_PERIOD, DASH_ON = 6.0, 3.5  # m
STRIPE_PERIOD = 1.0  # m, zebra stripes


@dataclass(frozen=True)
class CameraParams:
    """Intrinsics (pixels) and extrinsics (BEV metres, radians) of one view."""

    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    mount_height: float
    yaw: float  # 0 looks along +y, pi along -y
    pitch: float = 0.0  # downward positive
    x: float = 0.0
    y: float = 0.0

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "CameraParams":
        return cls(**rec)

    @property
    def forward_dir(self) -> np.ndarray:
        return np.array([np.sin(self.yaw), np.cos(self.yaw)])

    @property
    def right_dir(self) -> np.ndarray:
        return np.array([np.cos(self.yaw), -np.sin(self.yaw)])

    def project_ground(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project BEV ground points (M, 2) to pixel coordinates (M, 2).

        Returns ``(uv, valid)``; ``valid`` is False behind the camera.
        """
        rel = np.atleast_2d(points) - np.array([self.x, self.y])
        fwd = rel @ self.forward_dir
        right = rel @ self.right_dir
        cp, sp = np.cos(self.pitch), np.sin(self.pitch)
        zc = fwd * cp + self.mount_height * sp
        yc = -fwd * sp + self.mount_height * cp
        valid = zc > 1e-6
        zs = np.where(valid, zc, 1.0)
        u = self.fx * right / zs + self.cx
        v = self.fy * yc / zs + self.cy
        return np.stack([u, v], axis=1), valid


def default_rig(size: int = IMAGE_SIZE) -> list[CameraParams]:
    """Front and back cameras, horizon at mid-height, 90 degree field of view."""
    f = size / 2.0
    common = dict(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0, width=size, height=size, mount_height=2.0)
    return [
        CameraParams("CAM_FRONT", yaw=0.0, **common),
        CameraParams("CAM_BACK", yaw=float(np.pi), **common),
    ]


def _ground_hits(cam: CameraParams, ss: int = SUPERSAMPLE):
    """Ground intersection of every sub-pixel ray.

    Returns (gx, gy, dist, hit) arrays shaped (H*ss, W*ss).
    """
    us = (np.arange(cam.width * ss) + 0.5) / ss
    vs = (np.arange(cam.height * ss) + 0.5) / ss
    u, v = np.meshgrid(us, vs)
    r = (u - cam.cx) / cam.fx
    d = (v - cam.cy) / cam.fy
    cp, sp = np.cos(cam.pitch), np.sin(cam.pitch)
    down = d * cp + sp
    horiz = cp - d * sp
    hit = down > 1e-6
    s = np.where(hit, cam.mount_height / np.where(hit, down, 1.0), 0.0)
    fwd = s * horiz
    right = s * r
    fd, rd = cam.forward_dir, cam.right_dir
    gx = cam.x + fwd * fd[0] + right * rd[0]
    gy = cam.y + fwd * fd[1] + right * rd[1]
    hit &= fwd < HORIZON_FADE[1] * 1.5
    return gx, gy, fwd, hit


def _extend(points: np.ndarray, length: float = 60.0) -> np.ndarray:
    """Extend an open polyline straight past both ends for far-field shading."""
    p = np.asarray(points, dtype=np.float64)
    d0 = p[0] - p[1]
    d1 = p[-1] - p[-2]
    d0 = d0 / max(np.linalg.norm(d0), 1e-9)
    d1 = d1 / max(np.linalg.norm(d1), 1e-9)
    return np.concatenate([[p[0] + length * d0], p, [p[-1] + length * d1]])


def element_masks(layout: list[MapElement], gx: np.ndarray, gy: np.ndarray,
                  valid: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Boolean ground masks for curbs, painted dividers, zebra stripes and road surface.

    Only points under ``valid`` are evaluated; the rest report False.
    """
    shape = gx.shape
    valid = np.ones(shape, bool) if valid is None else valid
    sel = valid.ravel()
    pts = np.stack([gx.ravel()[sel], gy.ravel()[sel]], axis=1)
    curb = np.zeros(len(pts), bool)
    paint = np.zeros(len(pts), bool)
    zebra = np.zeros(len(pts), bool)
    crossing_area = np.zeros(len(pts), bool)
    for e in layout:
        if e.cls == "boundary":
            curb |= point_to_polyline_distance(pts, _extend(e.points)) < CURB_HALF_WIDTH
        elif e.cls == "divider":
            near = point_to_polyline_distance(pts, _extend(e.points)) < DIVIDER_HALF_WIDTH
            dash = np.mod(pts[:, 1], DASH_PERIOD) < DASH_ON
            paint |= near & dash
        elif e.cls == "crossing":
            inside = point_in_polygon(pts, e.points)
            crossing_area |= inside
            zebra |= inside & (np.mod(pts[:, 0], STRIPE_PERIOD) < STRIPE_PERIOD / 2)
    try:
        left, right = road_bounds(layout)
        road = (pts[:, 0] > x_at(left, pts[:, 1])) & (pts[:, 0] < x_at(right, pts[:, 1]))
    except ValueError:
        road = np.zeros(len(pts), bool)

    def full(m):
        out = np.zeros(sel.shape, bool)
        out[sel] = m
        return out.reshape(shape)

    return {
        "curb": full(curb),
        "paint": full(paint),
        "zebra": full(zebra),
        "crossing": full(crossing_area),
        "road": full(road),
    }


def sample_appearance(appearance_seed: int) -> dict:
    rng = np.random.default_rng([int(appearance_seed), 0xA99E])
    return {
        "brightness": float(rng.uniform(0.75, 1.15)),
        "shadows": bool(rng.uniform() < 0.5),
        "shadow_angle": float(rng.uniform(0, np.pi)),
        "shadow_period": float(rng.uniform(2.5, 6.0)),
        "shadow_duty": float(rng.uniform(0.3, 0.55)),
        "shadow_phase": float(rng.uniform(0, 10.0)),
        "wet": bool(rng.uniform() < 0.35),
        "asphalt": float(rng.uniform(0.30, 0.45)),
        "texture_amp": float(rng.uniform(0.02, 0.07)),
        "texture_freqs": rng.uniform(0.3, 2.5, size=(4, 2)).tolist(),
        "texture_phases": rng.uniform(0, 2 * np.pi, size=4).tolist(),
        "grass": rng.uniform([0.25, 0.35, 0.15], [0.40, 0.55, 0.25]).tolist(),
        "sky": rng.uniform([0.45, 0.60, 0.75], [0.65, 0.80, 0.95]).tolist(),
        "facade_seed": int(rng.integers(0, 2**31 - 1)),
    }


def _shade_view(layout, cam: CameraParams, app: dict, view_index: int) -> np.ndarray:
    ss = SUPERSAMPLE
    gx, gy, dist, hit = _ground_hits(cam, ss)
    masks = element_masks(layout, gx, gy, hit)
    H, W = gx.shape
    img = np.zeros((H, W, 3), dtype=np.float64)

    # sky and facades above the horizon
    v = (np.arange(H)[:, None] + 0.5) / H
    sky = np.array(app["sky"])
    img[:] = sky * (0.75 + 0.35 * v[..., None])
    frng = np.random.default_rng([app["facade_seed"], view_index])
    col = 0
    while col < W:
        w = int(frng.integers(W // 10, W // 4))
        top = cam.cy * ss * frng.uniform(0.25, 0.9)
        shade = frng.uniform(0.25, 0.7) * np.array([1.0, frng.uniform(0.85, 1.0), frng.uniform(0.8, 1.0)])
        rows = (np.arange(H) >= top)[:, None] & (np.arange(W)[None] >= col) & (np.arange(W)[None] < col + w)
        img[rows & ~hit] = shade
        col += w + int(frng.integers(0, W // 12))

    # ground
    tex = np.zeros_like(gx)
    for (fx, fy), ph in zip(app["texture_freqs"], app["texture_phases"]):
        tex += np.sin(fx * gx + fy * gy + ph)
    tex *= app["texture_amp"] / 2.0
    grass = np.array(app["grass"])[None, None] * (1.0 + tex[..., None])
    asphalt = (app["asphalt"] + tex)[..., None] * np.array([1.0, 1.0, 1.04])
    if app["wet"]:
        sheen = np.clip(dist / HORIZON_FADE[1], 0, 1)[..., None]
        asphalt = asphalt * 0.7 + sheen * 0.35 * sky[None, None]
    ground = np.where(masks["road"][..., None], asphalt, grass)
    ground = np.where(masks["zebra"][..., None], 0.88, ground)
    ground = np.where(masks["paint"][..., None], 0.95, ground)
    ground = np.where(masks["curb"][..., None], np.array([0.80, 0.80, 0.76]), ground)
    if app["shadows"]:
        a = app["shadow_angle"]
        phase = (gx * np.cos(a) + gy * np.sin(a) + app["shadow_phase"]) / app["shadow_period"]
        band = np.mod(phase, 1.0) < app["shadow_duty"]
        ground = ground * np.where(band, 0.55, 1.0)[..., None]
    fade = np.clip((dist - HORIZON_FADE[0]) / (HORIZON_FADE[1] - HORIZON_FADE[0]), 0, 1)[..., None]
    haze = sky * 0.9
    ground = ground * (1 - fade) + haze * fade
    img = np.where(hit[..., None], ground, img)
    img = img * app["brightness"]

    img = img.reshape(cam.height, ss, cam.width, ss, 3).mean(axis=(1, 3))
    img = np.clip(img, 0.0, 1.0)
    # quantise so that lossless 8-bit persistence is exact
    return (np.round(img * 255.0) / 255.0).astype(np.float32).transpose(2, 0, 1)


def render_views(layout: list[MapElement], cameras: list[CameraParams], appearance_seed: int) -> np.ndarray:
    """Render every camera view; returns float32 (V, 3, H, W) in [0, 1]."""
    app = sample_appearance(appearance_seed)
    return np.stack([_shade_view(layout, cam, app, i) for i, cam in enumerate(cameras)])


def render_control(layout: list[MapElement], cam: CameraParams) -> np.ndarray:
    """Per-class projection of the layout into one view, (3, H, W) coverage in [0, 1].

    Channels follow ``CLASSES``: divider, boundary, crossing.
    """
    ss = SUPERSAMPLE
    gx, gy, dist, hit = _ground_hits(cam, ss)
    in_range = (hit & (dist < HORIZON_FADE[1])).ravel()
    pts = np.stack([gx.ravel()[in_range], gy.ravel()[in_range]], axis=1)
    flat = np.zeros((3, in_range.size))
    for e in layout:
        if e.cls == "crossing":
            ch, m = 2, point_in_polygon(pts, e.points)
        else:
            half = CURB_HALF_WIDTH if e.cls == "boundary" else DIVIDER_HALF_WIDTH
            m = point_to_polyline_distance(pts, _extend(e.points)) < half
            ch = 1 if e.cls == "boundary" else 0
        flat[ch, in_range] = np.maximum(flat[ch, in_range], m)
    out = flat.reshape(3, cam.height, ss, cam.width, ss).mean(axis=(2, 4))
    return out.astype(np.float32)


def road_mask(layout: list[MapElement], cam: CameraParams) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose any sub-sample lands on the road surface."""
    ss = SUPERSAMPLE
    gx, gy, dist, hit = _ground_hits(cam, ss)
    masks = element_masks(layout, gx, gy, hit)
    road = masks["road"] | masks["curb"]
    return road.reshape(cam.height, ss, cam.width, ss).any(axis=(1, 3))


def caption(layout: list[MapElement], app: dict) -> str:
    n_lanes = 1 + sum(e.cls == "divider" for e in layout)
    words = {1: "one", 2: "two", 3: "three"}.get(n_lanes, str(n_lanes))
    parts = [f"a {words}-lane road"]
    if any(e.cls == "crossing" for e in layout):
        parts.append("with a pedestrian crossing")
    if app["shadows"]:
        parts.append("with shadows")
    if app["wet"]:
        parts.append("wet road surface")
    if app["brightness"] > 1.0:
        parts.append("bright daylight")
    elif app["brightness"] < 0.85:
        parts.append("dim overcast light")
    return ", ".join(parts)
