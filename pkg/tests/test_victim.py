import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latent_map_attack.attack import AttackConfig, confidence_weights, loss_remove, normalize_bev, spread
from latent_map_attack.corpus import Corpus
from latent_map_attack.errors import ContractViolation, NumericalFailure
from latent_map_attack.geometry import CLASSES
from latent_map_attack.victim import (
    DetectionSet, MapPrediction, ToyMapNet, ToyVictim, class_counts, count_by_class, threshold_detections,
    train_toy_model,
)
from latent_map_attack.victim.detections import Detection
from latent_map_attack.victim.matching import layout_targets, set_loss

D = torch.float64


def pred_from(logits):
    logits = torch.as_tensor(logits, dtype=D)
    return MapPrediction(logits, torch.zeros(len(logits), 4, 2, dtype=D))


@pytest.fixture(scope="module")
def untrained():
    torch.manual_seed(0)
    return ToyVictim(ToyMapNet())


def test_prediction_shape_and_determinism(untrained, scene):
    x = torch.from_numpy(scene.images)
    a = untrained.predict(x, scene.cameras)
    b = untrained.predict(x, scene.cameras)
    assert a.logits.shape == (20, 3) and a.points.shape == (20, 10, 2)
    assert torch.equal(a.logits, b.logits) and torch.equal(a.points, b.points)


def test_prediction_contract_violations(untrained, scene):
    x = torch.from_numpy(scene.images)
    with pytest.raises(ContractViolation):
        untrained.predict(x[:1])
    with pytest.raises(ContractViolation):
        untrained.predict(x, scene.cameras[:1])
    with pytest.raises(ContractViolation):
        untrained.predict(torch.zeros(2, 3, 64, 64))
    with pytest.raises(ContractViolation):
        MapPrediction(torch.zeros(3, 3), torch.zeros(4, 10, 2))
    with pytest.raises(NumericalFailure):
        MapPrediction(torch.full((2, 3), float("nan")), torch.zeros(2, 10, 2))


def test_untrained_logits_near_uniform(untrained, scene):
    p = untrained.predict(torch.from_numpy(scene.images))
    assert float((p.logits - p.logits.mean()).abs().max()) < 0.05


def test_trained_gradient_is_nonzero(models, scene):
    x = torch.from_numpy(scene.images).requires_grad_(True)
    loss = loss_remove(models.victim.predict(x), AttackConfig())
    (g,) = torch.autograd.grad(loss, x)
    assert float(g.abs().sum()) > 0


def test_finite_difference_on_one_pixel(models, scene):
    victim = copy.deepcopy(models.victim).to(D)
    x = torch.from_numpy(scene.images).to(D).requires_grad_(True)
    cfg = AttackConfig()
    w = confidence_weights(victim.predict(x).logits).detach()

    # the confidence weights are detached inside the loss, so the oracle holds them fixed
    def f(z):
        pred = victim.predict(z)
        conf = torch.sigmoid(pred.logits).max(dim=-1).values
        return cfg.lambda_conf * conf.mean() - cfg.lambda_spread * (w * spread(normalize_bev(pred.points))).mean()

    (g,) = torch.autograd.grad(loss_remove(victim.predict(x), cfg), x)
    # the pixel with the largest gradient magnitude
    idx = np.unravel_index(int(g.abs().argmax()), g.shape)
    h = 1e-5
    with torch.no_grad():
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[idx] += h
        xm[idx] -= h
        fd = (f(xp) - f(xm)) / (2 * h)
        raw = lambda z: victim.predict(z).logits.sum() + 0.01 * victim.predict(z).points.sum()
        fd_raw = (raw(xp) - raw(xm)) / (2 * h)
    assert abs(float(fd) - float(g[idx])) / abs(float(g[idx])) < 1e-4
    (g_raw,) = torch.autograd.grad(raw(x), x)
    assert abs(float(fd_raw) - float(g_raw[idx])) / abs(float(g_raw[idx])) < 1e-4


def test_threshold_fixtures():
    assert len(threshold_detections(pred_from([[-10.0] * 3] * 4), 0.3)) == 0
    det = threshold_detections(pred_from([[-10, 0, -10], [-10, -10, -10]]), 0.3)
    assert len(det) == 1
    d = det.detections[0]
    assert d.cls == "boundary" and d.confidence == 0.5 and d.query == 0
    with pytest.raises(ContractViolation):
        threshold_detections(pred_from([[0, 0, 0]]), 1.0)


def test_threshold_matches_brute_force():
    logits = [[0.2, -1.0, 3.0], [-0.9, -0.8, -0.95], [1.1, 1.2, -4.0], [-2.0, -0.5, -3.0], [-0.8473, -5, -5]]
    tau = 0.3
    expected = []
    for q, row in enumerate(logits):
        probs = [1 / (1 + math.exp(-v)) for v in row]
        best = max(range(3), key=lambda c: probs[c])
        if probs[best] >= tau:
            expected.append((q, CLASSES[best], probs[best]))
    det = threshold_detections(pred_from(logits), tau)
    got = [(d.query, d.cls, d.confidence) for d in det]
    assert [g[:2] for g in got] == [e[:2] for e in expected]
    for g, e in zip(got, expected):
        assert g[2] == pytest.approx(e[2], abs=1e-15)
        assert g[2] >= tau


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-8, 8)), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_threshold_monotone_and_confidence_exact(logits, tau, bump):
    p = pred_from(logits)
    low = threshold_detections(p, tau)
    high = threshold_detections(p, min(tau + bump, 0.99))
    assert len(high) <= len(low)
    for d in low:
        assert d.confidence == pytest.approx(1 / (1 + math.exp(-float(logits[d.query].max()))), rel=1e-12)


def test_count_by_class():
    assert count_by_class(DetectionSet([]), "boundary") == 0
    dets = [Detection(c, 0.9, np.zeros((2, 2)), i)
            for i, c in enumerate(["boundary", "divider", "boundary", "divider", "boundary"])]
    ds = DetectionSet(dets)
    assert count_by_class(ds, "boundary") == 3
    assert sum(class_counts(ds).values()) == len(ds)
    with pytest.raises(ContractViolation):
        count_by_class(ds, "car")


def test_set_loss_is_permutation_invariant(scene):
    torch.manual_seed(1)
    logits = torch.randn(20, 3, dtype=D)
    points = torch.randn(20, 10, 2, dtype=D) * 10
    cls, pts = layout_targets(scene.gt_layout, 10, D)
    perm = torch.randperm(len(cls))
    a = set_loss(logits, points, cls, pts)
    b = set_loss(logits, points, cls[perm], pts[perm])
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_training_loss_decreases_on_small_corpus():
    corpus = Corpus.generate(100, 7)
    scenes = corpus.scenes()
    images = torch.from_numpy(np.stack([s.images for s in scenes]))
    _, hist = train_toy_model(images, [s.gt_layout for s in scenes], steps=80, batch=8, lr=1e-3, log_every=0)
    assert np.mean(hist[-10:]) < np.mean(hist[:10])


def test_save_load_round_trip(untrained, scene, tmp_path):
    untrained.save(tmp_path)
    loaded = ToyVictim.load(tmp_path)
    x = torch.from_numpy(scene.images)
    assert torch.equal(loaded.predict(x).logits, untrained.predict(x).logits)
    assert loaded.manifest()["architecture"]["num_queries"] == 20
