"""BEV cost-map rasterisation, A* planning and planner-level harm metrics."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .geometry import BEV_X_RANGE, BEV_Y_RANGE, point_in_polygon, point_to_polyline_distance, polylines_intersect

# 8-connected moves (dx, dy) in cells; +y is ego-forward
MOVES = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class PlannerConfig:
    resolution: float = 0.25
    nx: int = 120
    ny: int = 240
    x_min: float = BEV_X_RANGE[0]
    y_min: float = BEV_Y_RANGE[0]
    cost_divider: float = 50.0
    cost_boundary: float = 200.0
    cost_crossing: float = 1.0
    cost_free: float = 1.0
    connectivity: int = 8
    curvature_penalty: float = 2.0
    reverse_penalty: float = 5.0
    fsr_stop_threshold: float = 5.0
    fsr_lateral_threshold: float = 3.5
    start: tuple[float, float] = (0.0, 0.0)
    goal: tuple[float, float] = (0.0, 25.0)
    # Routes whose accumulated cost would exceed this are treated as blocked.
    cost_ceiling: Optional[float] = 250.0
    orr_mode: str = "boundary"

    def __post_init__(self):
        if self.resolution <= 0 or self.nx < 1 or self.ny < 1:
            raise ConfigurationError("resolution and grid size must be positive")
        if min(self.cost_divider, self.cost_boundary, self.cost_crossing, self.cost_free) < 1:
            raise ConfigurationError("cell costs must be >= 1")
        if self.fsr_stop_threshold <= 0 or self.fsr_lateral_threshold <= 0:
            raise ConfigurationError("FSR thresholds must be positive")
        if self.connectivity != 8:
            raise ConfigurationError("only 8-connected planning is supported")
        if self.orr_mode not in ("boundary", "road_polygon"):
            raise ConfigurationError(f"unknown orr_mode {self.orr_mode!r}")

    def to_record(self) -> dict:
        from dataclasses import asdict

        rec = asdict(self)
        rec["start"], rec["goal"] = list(self.start), list(self.goal)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "PlannerConfig":
        from dataclasses import fields

        rec = dict(rec)
        unknown = set(rec) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown planner config fields: {sorted(unknown)}")
        for k in ("start", "goal"):
            if k in rec:
                rec[k] = tuple(rec[k])
        return cls(**rec)


@dataclass
class CostMap:
    costs: np.ndarray  # (nx, ny), indexed [ix, iy]
    x_min: float
    y_min: float
    resolution: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape

    def world_to_cell(self, xy) -> tuple[int, int]:
        x, y = xy
        return int(math.floor((x - self.x_min) / self.resolution)), int(math.floor((y - self.y_min) / self.resolution))

    def cell_to_world(self, cell) -> tuple[float, float]:
        ix, iy = cell
        return self.x_min + (ix + 0.5) * self.resolution, self.y_min + (iy + 0.5) * self.resolution

    def inside(self, cell) -> bool:
        return 0 <= cell[0] < self.costs.shape[0] and 0 <= cell[1] < self.costs.shape[1]

    def to_text(self) -> str:
        header = (f"# cost map nx={self.shape[0]} ny={self.shape[1]} x_min={self.x_min} "
                  f"y_min={self.y_min} resolution={self.resolution}; rows are iy, columns ix\n")
        rows = "\n".join(" ".join(f"{v:g}" for v in self.costs[:, iy]) for iy in range(self.shape[1]))
        return header + rows + "\n"


@dataclass
class PlannedPath:
    cells: list[tuple[int, int]]
    cost: float
    reached_goal: bool
    waypoints: np.ndarray = field(default=None)  # (N, 2) world metres

    def to_text(self) -> str:
        lines = [f"# reached_goal={self.reached_goal} cost={self.cost!r}", "# ix iy x y"]
        lines += [f"{c[0]} {c[1]} {w[0]:.3f} {w[1]:.3f}" for c, w in zip(self.cells, self.waypoints)]
        return "\n".join(lines) + "\n"


def empty_costmap(cfg: PlannerConfig) -> CostMap:
    return CostMap(np.full((cfg.nx, cfg.ny), cfg.cost_free, dtype=np.float64), cfg.x_min, cfg.y_min, cfg.resolution)


def _densify(points: np.ndarray, spacing: float) -> np.ndarray:
    pts = [points[:1]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(int(math.ceil(np.linalg.norm(b - a) / spacing)), 1)
        t = np.arange(1, n + 1, dtype=np.float64)[:, None] / n
        pts.append(a + t * (b - a))
    return np.concatenate(pts)


def _class_cost(cls: str, cfg: PlannerConfig) -> float:
    return {"divider": cfg.cost_divider, "boundary": cfg.cost_boundary, "crossing": cfg.cost_crossing}[cls]


def rasterize_elements(elements: Iterable[tuple[str, np.ndarray]], cfg: PlannerConfig) -> CostMap:
    """Mark every cell touched by a polyline with its class cost; overlaps keep the maximum.

    Polylines are sampled every ``resolution / 4``; samples outside the grid are dropped.
    """
    cmap = empty_costmap(cfg)
    for cls, points in elements:
        cost = _class_cost(cls, cfg)
        if cost <= cfg.cost_free:
            continue
        pts = np.asarray(points, dtype=np.float64)
        if len(pts) == 0:
            continue
        dense = _densify(pts, cfg.resolution / 4.0)
        ix = np.floor((dense[:, 0] - cfg.x_min) / cfg.resolution).astype(np.int64)
        iy = np.floor((dense[:, 1] - cfg.y_min) / cfg.resolution).astype(np.int64)
        ok = (ix >= 0) & (ix < cfg.nx) & (iy >= 0) & (iy < cfg.ny)
        ix, iy = ix[ok], iy[ok]
        cmap.costs[ix, iy] = np.maximum(cmap.costs[ix, iy], cost)
    return cmap


def rasterize_costmap(det, cfg: PlannerConfig) -> CostMap:
    """Cost map from a ``DetectionSet`` (or any iterable of objects with ``cls``/``polyline``)."""
    return rasterize_elements(((d.cls, d.polyline) for d in det), cfg)


def step_cost(cmap: CostMap, heading: Optional[int], move: int, dest, cfg: PlannerConfig) -> float:
    dx, dy = MOVES[move]
    length = SQRT2 if dx and dy else 1.0
    c = float(cmap.costs[dest]) * length
    if heading is not None and heading != move:
        c += cfg.curvature_penalty
    if dy < 0:
        c += cfg.reverse_penalty
    return c


def _result(cmap: CostMap, cells: list, cost: float, reached: bool) -> PlannedPath:
    wp = np.array([cmap.cell_to_world(c) for c in cells], dtype=np.float64).reshape(-1, 2)
    return PlannedPath(cells, cost, reached, wp)


def astar_plan(cmap: CostMap, start, goal, cfg: PlannerConfig, cell_coords: bool = False) -> PlannedPath:
    """Optimal 8-connected path over (cell, heading) states.

    ``start``/``goal`` are world metres unless ``cell_coords``. The first move
    carries no curvature penalty. Heuristic: Euclidean cell distance times
    ``cost_free``, admissible because every step costs at least that much.
    Equal-priority entries pop in insertion order.
    """
    s = tuple(start) if cell_coords else cmap.world_to_cell(start)
    g_cell = tuple(goal) if cell_coords else cmap.world_to_cell(goal)
    if not cmap.inside(s) or not cmap.inside(g_cell):
        raise ContractViolation(f"start {s} or goal {g_cell} outside the grid")
    if s == g_cell:
        return _result(cmap, [s], 0.0, True)
    nx, ny = cmap.shape
    gx, gy = g_cell
    ceiling = cfg.cost_ceiling
    free = cfg.cost_free

    def h(c):
        return math.hypot(c[0] - gx, c[1] - gy) * free

    start_state = (s, None)
    best = {start_state: 0.0}
    parent: dict = {start_state: None}
    counter = 0
    heap = [(h(s), counter, 0.0, start_state)]
    closed = set()
    closest = (h(s), 0.0, start_state)
    while heap:
        _, _, g, state = heapq.heappop(heap)
        if state in closed:
            continue
        closed.add(state)
        cell, heading = state
        if cell == g_cell:
            return _result(cmap, _trace(parent, state), g, True)
        hc = h(cell)
        if (hc, g) < closest[:2]:
            closest = (hc, g, state)
        for m, (dx, dy) in enumerate(MOVES):
            nxt = (cell[0] + dx, cell[1] + dy)
            if not (0 <= nxt[0] < nx and 0 <= nxt[1] < ny):
                continue
            ng = g + step_cost(cmap, heading, m, nxt, cfg)
            if ceiling is not None and ng > ceiling:
                continue
            ns = (nxt, m)
            if ns in closed or ng >= best.get(ns, math.inf):
                continue
            best[ns] = ng
            parent[ns] = state
            counter += 1
            heapq.heappush(heap, (ng + h(nxt), counter, ng, ns))
    _, g, state = closest
    return _result(cmap, _trace(parent, state), g, False)


def _trace(parent: dict, state) -> list[tuple[int, int]]:
    cells = []
    while state is not None:
        cells.append(state[0])
        state = parent[state]
    return cells[::-1]


def path_cost(cmap: CostMap, cells: list[tuple[int, int]], cfg: PlannerConfig) -> float:
    """Recompute a path's cost step by step."""
    total, heading = 0.0, None
    for a, b in zip(cells[:-1], cells[1:]):
        move = MOVES.index((b[0] - a[0], b[1] - a[1]))
        total += step_cost(cmap, heading, move, b, cfg)
        heading = move
    return total


def plan(det, cfg: PlannerConfig) -> PlannedPath:
    return astar_plan(rasterize_costmap(det, cfg), cfg.start, cfg.goal, cfg)


# -- metrics -----------------------------------------------------------------


def compute_uptr(clean_path: PlannedPath, adv_path: PlannedPath) -> bool:
    return adv_path.cost > clean_path.cost


def compute_orr(path: PlannedPath, clean_boundaries: Iterable[np.ndarray]) -> bool:
    """True iff any path segment intersects any clean boundary polyline."""
    wp = np.asarray(path.waypoints, dtype=np.float64)
    for b in clean_boundaries:
        if polylines_intersect(wp, np.asarray(b, dtype=np.float64)):
            return True
    return False


def compute_orr_road_polygon(path: PlannedPath, road_polygon: np.ndarray) -> bool:
    """Variant: true iff any waypoint leaves the ground-truth road polygon."""
    return not bool(point_in_polygon(path.waypoints, road_polygon).all())


def compute_fsr(path: PlannedPath, clean_path: PlannedPath, goal, cfg: PlannerConfig) -> bool:
    wp = np.asarray(path.waypoints, dtype=np.float64)
    stop = float(np.hypot(*(wp[-1] - np.asarray(goal, dtype=np.float64))))
    if stop > cfg.fsr_stop_threshold:
        return True
    lateral = point_to_polyline_distance(wp, np.asarray(clean_path.waypoints, dtype=np.float64))
    return bool(lateral.max() > cfg.fsr_lateral_threshold)


def export(cmap: CostMap, path: PlannedPath, directory, stem: str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{stem}_costmap.txt").write_text(cmap.to_text())
    (d / f"{stem}_path.txt").write_text(path.to_text())
