import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latent_map_attack.attack import AttackConfig
from latent_map_attack.baselines import PATCH_SIZE, adv_patch, largest_free_rectangle, patch_placement, pixel_pgd
from latent_map_attack.corpus import road_mask
from latent_map_attack.errors import ConfigurationError
from latent_map_attack.victim import ToyMapNet, ToyVictim, threshold_detections


@pytest.fixture(scope="module")
def victim():
    torch.manual_seed(0)
    return ToyVictim(ToyMapNet())


def test_pixel_pgd_zero_budget_returns_clean(victim, scene):
    r = pixel_pgd(scene, victim, AttackConfig(), epsilon=0.0, iterations=3)
    assert np.array_equal(r.images, scene.images)
    assert r.method == "pixel_pgd"


@pytest.mark.parametrize("goal", ["remove", "inject"])
def test_pixel_pgd_stays_in_ball(victim, scene, goal):
    r = pixel_pgd(scene, victim, AttackConfig(goal=goal), epsilon=0.1, iterations=4, step=0.04)
    diff = np.abs(r.images.astype(np.float64) - scene.images)
    assert diff.max() <= 0.1 + 1e-6
    assert diff.max() > 0
    assert r.images.min() >= 0 and r.images.max() <= 1


def brute_largest(free):
    H, W = free.shape
    best = 0
    for t in range(H):
        for l in range(W):
            for b in range(t, H):
                for r in range(l, W):
                    if free[t:b + 1, l:r + 1].all():
                        best = max(best, (b - t + 1) * (r - l + 1))
    return best


@settings(max_examples=80, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 7), st.integers(1, 7))))
def test_largest_rectangle_matches_brute_force(free):
    top, left, h, w = largest_free_rectangle(free)
    assert h * w == brute_largest(free)
    if h * w:
        assert free[top:top + h, left:left + w].all()


def test_patch_placement_is_off_road(scene):
    for v in range(2):
        top, left = patch_placement(scene, v)
        assert not road_mask(scene.gt_layout, scene.cameras[v])[top:top + 60, left:left + 120].any()
    with pytest.raises(ConfigurationError):
        patch_placement(scene, 0, size=(100, 128))


def test_patch_is_local_and_sized(victim, scene):
    r = adv_patch(scene, victim, AttackConfig(), iterations=2)
    changed = np.any(r.images != scene.images, axis=1)
    mask = np.zeros_like(changed)
    for v, name in enumerate(["CAM_FRONT", "CAM_BACK"]):
        top, left = r.extra["placements"][name]
        mask[v, top:top + PATCH_SIZE[0], left:left + PATCH_SIZE[1]] = True
    assert mask.sum() == 2 * 60 * 120
    assert not np.any(changed & ~mask)
    outside = ~mask[:, None].repeat(3, axis=1)
    assert np.array_equal(r.images[outside], scene.images[outside])


def test_patch_over_road_is_rejected(victim, scene):
    with pytest.raises(ConfigurationError):
        adv_patch(scene, victim, AttackConfig(), iterations=0, placements={0: (68, 4)})


def test_random_patch_barely_changes_counts(models, eval_scenes):
    diffs = []
    for sc in eval_scenes[:8]:
        clean = len(threshold_detections(models.victim.predict(torch.from_numpy(sc.images))))
        r = adv_patch(sc, models.victim, AttackConfig(), iterations=0)
        diffs.append(len(threshold_detections(r.prediction)) - clean)
    assert abs(np.mean(diffs)) <= 1.0
