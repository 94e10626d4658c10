"""Procedural road-corridor layouts in the BEV frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import BEV_X_RANGE, BEV_Y_RANGE, CLASSES

# Documented sampling ranges for the synthetic corridor.
LANE_WIDTH_RANGE = (3.0, 3.8)  # m
LANE_COUNT_CHOICES = (1, 2, 3)
CURVATURE_RANGE = (-0.001, 0.001)  # 1/m, lateral offset k*y**2
HEADING_SLOPE_RANGE = (-0.02, 0.02)  # lateral drift per metre
CROSSING_PROBABILITY = 0.35
CROSSING_DISTANCE_RANGE = (8.0, 20.0)  # m from ego, front or back
CROSSING_DEPTH = 3.0  # m
MAX_ABS_X = 14.0  # keep polylines inside the planner grid
SAMPLES_PER_POLYLINE = 31


@dataclass
class MapElement:
    cls: str
    points: np.ndarray  # (N, 2) BEV metres

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown map class {self.cls!r}")
        self.points = np.asarray(self.points, dtype=np.float64)

    def to_record(self) -> dict:
        return {"class": self.cls, "points": self.points.tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "MapElement":
        return cls(rec["class"], np.asarray(rec["points"], dtype=np.float64))

    def __eq__(self, other):
        return (
            isinstance(other, MapElement)
            and self.cls == other.cls
            and self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
        )


def x_at(polyline: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Lateral position of a y-monotone polyline at ``y``, linearly extrapolated."""
    py = polyline[:, 1]
    px = polyline[:, 0]
    if py[0] > py[-1]:
        py, px = py[::-1], px[::-1]
    y = np.asarray(y, dtype=np.float64)
    out = np.interp(y, py, px)
    lo_slope = (px[1] - px[0]) / (py[1] - py[0])
    hi_slope = (px[-1] - px[-2]) / (py[-1] - py[-2])
    out = np.where(y < py[0], px[0] + (y - py[0]) * lo_slope, out)
    out = np.where(y > py[-1], px[-1] + (y - py[-1]) * hi_slope, out)
    return out


def generate_layout(seed: int) -> list[MapElement]:
    """Sample a road corridor: two boundaries, 0-2 dividers, optional crossing.

    The ego vehicle sits at the BEV origin in the centre of one lane.
    Deterministic per ``seed``.
    """
    rng = np.random.default_rng([int(seed), 0x1A70])
    ys = np.linspace(BEV_Y_RANGE[0], BEV_Y_RANGE[1], SAMPLES_PER_POLYLINE)
    while True:
        width = rng.uniform(*LANE_WIDTH_RANGE)
        n_lanes = int(rng.choice(LANE_COUNT_CHOICES))
        ego_lane = int(rng.integers(0, n_lanes))
        k = rng.uniform(*CURVATURE_RANGE)
        a = rng.uniform(*HEADING_SLOPE_RANGE)
        offset = a * ys + k * ys ** 2
        left = -(ego_lane + 0.5) * width + offset
        right = left + n_lanes * width
        if max(np.abs(left).max(), np.abs(right).max()) <= MAX_ABS_X:
            break

    elements = [
        MapElement("boundary", np.stack([left, ys], 1)),
        MapElement("boundary", np.stack([right, ys], 1)),
    ]
    for j in range(1, n_lanes):
        elements.append(MapElement("divider", np.stack([left + j * width, ys], 1)))

    if rng.uniform() < CROSSING_PROBABILITY:
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        y0 = sign * rng.uniform(*CROSSING_DISTANCE_RANGE)
        y1 = y0 + CROSSING_DEPTH
        lb, rb = elements[0].points, elements[1].points
        corners = np.array(
            [
                [x_at(lb, y0), y0],
                [x_at(rb, y0), y0],
                [x_at(rb, y1), y1],
                [x_at(lb, y1), y1],
                [x_at(lb, y0), y0],
            ],
            dtype=np.float64,
        )
        elements.append(MapElement("crossing", corners))
    return elements


def road_bounds(layout: list[MapElement]) -> tuple[np.ndarray, np.ndarray]:
    """The (left, right) boundary polylines of a corridor layout."""
    bounds = [e.points for e in layout if e.cls == "boundary"]
    if len(bounds) < 2:
        raise ValueError("layout needs two boundary polylines")
    bounds = sorted(bounds[:2], key=lambda p: p[:, 0].mean())
    return bounds[0], bounds[1]


def road_polygon(layout: list[MapElement]) -> np.ndarray:
    """Closed ground-truth road polygon between the two boundaries."""
    left, right = road_bounds(layout)
    return np.concatenate([left, right[::-1], left[:1]], axis=0)


def layout_within_extent(layout: list[MapElement]) -> bool:
    for e in layout:
        x, y = e.points[:, 0], e.points[:, 1]
        if x.min() < BEV_X_RANGE[0] or x.max() > BEV_X_RANGE[1]:
            return False
        if y.min() < BEV_Y_RANGE[0] or y.max() > BEV_Y_RANGE[1]:
            return False
    return True
