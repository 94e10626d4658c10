import json

import numpy as np
import pytest
import torch

from latent_map_attack.attack import (
    AttackConfig, AttackResult, LatentProblem, PerturbationState, config_hash, pgd_step, random_delta_control,
    run_attack, tensor_hash,
)
from latent_map_attack.corpus.scene import make_scene
from latent_map_attack.diffusion.generator import LatentGenerator
from latent_map_attack.errors import ConfigurationError, ContractViolation
from latent_map_attack.victim.model import ToyMapNet, ToyVictim


@pytest.fixture(scope="module")
def toy():
    torch.manual_seed(0)
    return LatentGenerator.create(seed=0), ToyVictim(ToyMapNet()), make_scene("s0", 11, 12)


def state(delta):
    return PerturbationState(delta, torch.zeros_like(delta))


def test_pgd_sign_step():
    s = pgd_step(state(torch.zeros(2, 3)), torch.rand(2, 3) + 0.1, AttackConfig(eta=0.05))
    assert torch.equal(s.delta, torch.full((2, 3), -0.05))
    assert s.iteration == 1


def test_pgd_projection():
    s = pgd_step(state(torch.full((4,), 0.48)), -torch.ones(4), AttackConfig(eta=0.05, epsilon_budget=0.5))
    assert torch.equal(s.delta, torch.full((4,), 0.5))


def test_pgd_zero_gradient_keeps_delta():
    d = torch.linspace(-0.2, 0.2, 5)
    s = pgd_step(state(d), torch.zeros(5), AttackConfig())
    assert torch.equal(s.delta, d)


def test_pgd_non_finite_gradient_is_skipped():
    d = torch.linspace(-0.2, 0.2, 5)
    g = torch.ones(5)
    g[2] = float("nan")
    s = pgd_step(state(d), g, AttackConfig())
    assert torch.equal(s.delta, d)
    assert s.iteration == 1


def test_pgd_does_not_mutate_input_state():
    st0 = state(torch.zeros(3))
    pgd_step(st0, torch.ones(3), AttackConfig())
    assert torch.equal(st0.delta, torch.zeros(3)) and st0.iteration == 0


@pytest.mark.parametrize("kw", [dict(goal="other"), dict(eta=0.0), dict(K=-1), dict(epsilon_budget=-0.1),
                                dict(s=1.0), dict(goal="inject", y_star=None), dict(goal="inject", K_target=0),
                                dict(lambda_clip=-1.0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigurationError):
        AttackConfig(**kw)


def test_config_record_round_trip_and_hash():
    cfg = AttackConfig(goal="inject", K=7, lambda_clip=0.3)
    again = AttackConfig.from_record(json.loads(json.dumps(cfg.to_record())))
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert config_hash(AttackConfig().to_record()) != cfg.config_hash()
    with pytest.raises(ConfigurationError):
        AttackConfig.from_record({"K": 1, "bogus": 2})


def test_zero_iterations_and_zero_budget_match_reconstruction(toy):
    gen, victim, scene = toy
    base = AttackConfig(lambda_clip=0.0, K=0)
    recon = LatentProblem(scene, base, gen, victim)
    with torch.no_grad():
        ref = recon.render(torch.zeros_like(recon.z0)).numpy()
    a = run_attack(scene, base, gen, victim)
    b = run_attack(scene, AttackConfig(lambda_clip=0.0, K=3, epsilon_budget=0.0), gen, victim)
    assert np.array_equal(a.images, ref)
    assert np.array_equal(b.images, ref)
    assert b.extra["delta_linf"] == 0.0


def test_run_attack_feasible_reproducible_and_persistent(toy, tmp_path):
    gen, victim, scene = toy
    cfg = AttackConfig(K=3, epsilon_budget=0.12, eta=0.05, lambda_clip=0.0)
    a = run_attack(scene, cfg, gen, victim)
    b = run_attack(scene, cfg, gen, victim)
    assert np.array_equal(a.images, b.images)
    assert a.noise_hash == b.noise_hash
    assert a.extra["delta_linf"] <= 0.12 + 1e-7
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert [h["iteration"] for h in a.loss_history] == [0, 1, 2, 3]
    a.save(tmp_path, [c.name for c in scene.cameras])
    assert (tmp_path / "CAM_FRONT.png").exists()
    loaded = AttackResult.load(tmp_path)
    assert np.array_equal(loaded.images, a.images)
    assert torch.equal(loaded.prediction.logits, a.prediction.logits.double())
    assert loaded.metadata()["config_hash"] == cfg.config_hash()


def test_inject_targets_fixed_and_recorded(toy):
    gen, victim, scene = toy
    cfg = AttackConfig(goal="inject", K=2, K_target=2, lambda_clip=0.0)
    r = run_attack(scene, cfg, gen, victim)
    assert len(r.extra["targets"]) == 2


def test_noise_depends_only_on_seed(toy):
    gen, victim, scene = toy
    p1 = LatentProblem(scene, AttackConfig(seed=3), gen, victim)
    p2 = LatentProblem(scene, AttackConfig(seed=3, K=5), gen, victim)
    p3 = LatentProblem(scene, AttackConfig(seed=4), gen, victim)
    assert tensor_hash(p1.fixed_noise) == tensor_hash(p2.fixed_noise) != tensor_hash(p3.fixed_noise)


def test_random_control_has_exact_norm(toy):
    gen, victim, scene = toy
    cfg = AttackConfig()
    r = random_delta_control(scene, cfg, gen, victim, 0.3)
    assert r.method == "random_latent" and r.extra["delta_linf"] == 0.3
    zero = random_delta_control(scene, cfg, gen, victim, 0.0)
    base = run_attack(scene, AttackConfig(K=0), gen, victim)
    assert np.array_equal(zero.images, base.images)


def test_view_mismatch_propagates(toy):
    gen, _, scene = toy
    victim = ToyVictim(ToyMapNet(num_views=3))
    with pytest.raises(ContractViolation):
        run_attack(scene, AttackConfig(K=1, lambda_clip=0.0), gen, victim)
