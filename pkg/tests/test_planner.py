import math
from types import SimpleNamespace

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_map_attack.errors import ConfigurationError
from latent_map_attack.planner import (
    CostMap, PlannedPath, PlannerConfig, astar_plan, compute_fsr, compute_orr, compute_orr_road_polygon,
    compute_uptr, empty_costmap, export, path_cost, plan, rasterize_costmap, rasterize_elements,
)

SMALL = PlannerConfig(resolution=1.0, nx=30, ny=30, x_min=0.0, y_min=0.0, cost_ceiling=None)
NEIGHBOURS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if dx or dy]


def dijkstra_cost(costs, start, goal, curv=2.0, rev=5.0):
    """Shortest path over (cell, heading) states, built independently of the planner."""
    G = nx.DiGraph()
    W, H = costs.shape
    for x in range(W):
        for y in range(H):
            for hd in [None] + NEIGHBOURS:
                for dx, dy in NEIGHBOURS:
                    q = (x + dx, y + dy)
                    if not (0 <= q[0] < W and 0 <= q[1] < H):
                        continue
                    w = costs[q] * (math.sqrt(2.0) if dx and dy else 1.0)
                    if hd is not None and hd != (dx, dy):
                        w += curv
                    if dy < 0:
                        w += rev
                    G.add_edge(((x, y), hd), (q, (dx, dy)), weight=w)
    for hd in NEIGHBOURS:
        G.add_edge((goal, hd), "sink", weight=0.0)
    if start == goal:
        return 0.0
    return nx.dijkstra_path_length(G, (start, None), "sink")


def random_costs(seed):
    rng = np.random.default_rng(seed)
    costs = rng.integers(1, 10, size=(30, 30)).astype(np.float64)
    costs[rng.random((30, 30)) < 0.1] = 50.0
    costs[rng.random((30, 30)) < 0.05] = 200.0
    return costs


def random_endpoints(seed):
    rng = np.random.default_rng(seed + 1000)
    return tuple(int(v) for v in rng.integers(0, 30, 2)), tuple(int(v) for v in rng.integers(0, 30, 2))


@pytest.mark.parametrize("seed", range(10))
def test_astar_matches_dijkstra_sample(seed):
    costs = random_costs(seed)
    s, g = random_endpoints(seed)
    p = astar_plan(CostMap(costs, 0.0, 0.0, 1.0), s, g, SMALL, cell_coords=True)
    assert p.reached_goal
    assert p.cost == dijkstra_cost(costs, s, g)


def test_path_invariants_on_random_map():
    costs = random_costs(42)
    cmap = CostMap(costs, 0.0, 0.0, 1.0)
    p = astar_plan(cmap, (2, 3), (27, 25), SMALL, cell_coords=True)
    steps = np.diff(np.array(p.cells), axis=0)
    assert np.all(np.abs(steps).max(1) == 1)
    assert path_cost(cmap, p.cells, SMALL) == p.cost
    assert p.cells[0] == (2, 3) and p.cells[-1] == (27, 25)


def test_degenerate_and_straight_queries():
    cmap = CostMap(np.ones((30, 30)), 0.0, 0.0, 1.0)
    p = astar_plan(cmap, (4, 4), (4, 4), SMALL, cell_coords=True)
    assert p.cells == [(4, 4)] and p.cost == 0.0 and p.reached_goal
    p = astar_plan(cmap, (5, 2), (5, 12), SMALL, cell_coords=True)
    assert p.cost == 10.0 and len(p.cells) == 11


def test_blocked_goal_returns_partial_path():
    cfg = PlannerConfig(resolution=1.0, nx=20, ny=20, x_min=0.0, y_min=0.0, cost_ceiling=100.0)
    costs = np.ones((20, 20))
    costs[:, 10] = 200.0
    p = astar_plan(CostMap(costs, 0.0, 0.0, 1.0), (10, 2), (10, 18), cfg, cell_coords=True)
    assert not p.reached_goal
    assert p.cells[-1][1] == 9
    assert p.cost <= 100.0


def test_default_plan_on_empty_map_drives_straight():
    cfg = PlannerConfig()
    p = plan([], cfg)
    assert p.reached_goal
    assert p.cost == pytest.approx(100.0)
    assert np.allclose(p.waypoints[:, 0], 0.125)


def test_config_validation_and_record():
    with pytest.raises(ConfigurationError):
        PlannerConfig(resolution=0)
    with pytest.raises(ConfigurationError):
        PlannerConfig(cost_divider=0.5)
    with pytest.raises(ConfigurationError):
        PlannerConfig(orr_mode="other")
    cfg = PlannerConfig(goal=(1.0, 20.0))
    assert PlannerConfig.from_record(cfg.to_record()) == cfg


# -- rasterisation ------------------------------------------------------------------


def det(cls, pts):
    return SimpleNamespace(cls=cls, polyline=np.asarray(pts, dtype=np.float64))


def test_empty_detection_set_is_uniform():
    cmap = rasterize_costmap([], PlannerConfig())
    assert cmap.shape == (120, 240) and np.all(cmap.costs == 1.0)


def test_vertical_boundary_stripe():
    cfg = PlannerConfig()
    cmap = rasterize_costmap([det("boundary", [[0.0, -30.0], [0.0, 30.0]])], cfg)
    # oracle: cells hit by a 1 cm sampling of the segment
    ys = np.arange(-30.0, 30.0, 0.01)
    expected = np.ones((120, 240))
    expected[np.floor((0.0 + 15) / 0.25).astype(int), np.floor((ys + 30) / 0.25).astype(int)] = 200.0
    assert np.array_equal(cmap.costs, expected)
    assert np.all(cmap.costs[60] == 200.0) and (cmap.costs == 200.0).sum() == 240


def test_overlap_takes_maximum_and_crossing_is_free():
    cfg = PlannerConfig()
    cmap = rasterize_costmap([det("divider", [[1.0, -5.0], [1.0, 5.0]]),
                              det("boundary", [[-5.0, 0.1], [5.0, 0.1]]),
                              det("crossing", [[-2, 10], [2, 10], [2, 12], [-2, 12], [-2, 10]])], cfg)
    assert cmap.costs[cmap.world_to_cell((1.0, 0.1))] == 200.0
    assert cmap.costs[cmap.world_to_cell((1.0, 3.0))] == 50.0
    assert cmap.costs[cmap.world_to_cell((0.0, 10.0))] == 1.0


def test_out_of_grid_polyline_is_clipped():
    cmap = rasterize_costmap([det("boundary", [[-40.0, 0.0], [40.0, 0.0]])], PlannerConfig())
    assert (cmap.costs == 200.0).sum() == 120


coords = st.floats(-14.9, 14.9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(coords, st.floats(-29.9, 29.9)), min_size=2, max_size=6),
       st.sampled_from(["divider", "boundary"]))
def test_every_vertex_cell_carries_class_cost(pts, cls):
    cfg = PlannerConfig()
    cmap = rasterize_elements([(cls, np.array(pts))], cfg)
    cost = cfg.cost_boundary if cls == "boundary" else cfg.cost_divider
    for p in pts:
        assert cmap.costs[cmap.world_to_cell(p)] >= cost


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(0.5, 29.5), st.floats(0.5, 29.5)), min_size=2, max_size=4),
       st.integers(0, 10_000))
def test_adding_a_boundary_never_lowers_cost(pts, seed):
    rng = np.random.default_rng(seed)
    base = [("divider", rng.uniform(0.5, 29.5, size=(3, 2)))]
    before = astar_plan(rasterize_elements(base, SMALL), (15.5, 1.5), (15.5, 27.5), SMALL)
    after = astar_plan(rasterize_elements(base + [("boundary", np.array(pts))], SMALL),
                       (15.5, 1.5), (15.5, 27.5), SMALL)
    assert after.cost >= before.cost


# -- metrics -------------------------------------------------------------------------


def path_from(points):
    pts = np.asarray(points, dtype=np.float64)
    return PlannedPath([(0, 0)] * len(pts), 0.0, True, pts)


def test_uptr_is_strict():
    a, b = PlannedPath([], 100.0, True, None), PlannedPath([], 120.0, True, None)
    assert compute_uptr(a, b) is True
    assert compute_uptr(a, PlannedPath([], 100.0, True, None)) is False
    assert compute_uptr(b, a) is False


def test_orr():
    path = path_from([[0, 0], [0, 25]])
    assert not compute_orr(path, [np.array([[1.0, -30], [1.0, 30]])])
    assert compute_orr(path, [np.array([[-2.0, 10.0], [2.0, 12.0]])])
    assert not compute_orr(path, [])


def test_orr_road_polygon_variant():
    road = np.array([[-2, -30], [2, -30], [2, 30], [-2, 30], [-2, -30]], dtype=float)
    assert not compute_orr_road_polygon(path_from([[0, 0], [1, 25]]), road)
    assert compute_orr_road_polygon(path_from([[0, 0], [3, 25]]), road)


def test_fsr():
    cfg = PlannerConfig()
    clean = path_from([[0, 0], [0, 25]])
    goal = (0.0, 25.0)
    assert compute_fsr(path_from([[0, 0], [0, 19]]), clean, goal, cfg)
    assert compute_fsr(path_from([[0, 0], [4, 12], [0, 25]]), clean, goal, cfg)
    assert not compute_fsr(path_from([[0, 0], [1, 12], [0, 25]]), clean, goal, cfg)


def test_export(tmp_path):
    cfg = PlannerConfig(resolution=1.0, nx=4, ny=5, x_min=0.0, y_min=0.0)
    cmap = empty_costmap(cfg)
    p = astar_plan(cmap, (0.5, 0.5), (0.5, 3.5), cfg)
    export(cmap, p, tmp_path, "clean")
    text = (tmp_path / "clean_costmap.txt").read_text().splitlines()
    assert len(text) == 6 and text[1] == "1 1 1 1"
    assert (tmp_path / "clean_path.txt").read_text().startswith("# reached_goal=True cost=3.0")
