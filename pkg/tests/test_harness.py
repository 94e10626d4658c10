import dataclasses
import json

import numpy as np
import pytest

from latent_map_attack.artifacts import Models
from latent_map_attack.corpus.scene import make_scene
from latent_map_attack.diffusion.generator import LatentGenerator
from latent_map_attack.errors import ConfigurationError
from latent_map_attack.guidance import EmbeddingPair, VisionEncoder
from latent_map_attack.diffusion.networks import TextEncoder
from latent_map_attack.harness import (
    CONFIG_SCHEMA, EvalReport, ExperimentConfig, Runner, compute_aggregates, emit_report, markdown_tables,
    run_experiment, scene_seed,
)
from latent_map_attack.victim.model import ToyMapNet, ToyVictim

SMALL = {
    "attack": {"K": 1, "use_checkpoint": False},
    "sweep": {"epsilon_budget": [0.5], "lambda_clip": [0.5]},
    "pixel_pgd": {"iterations": 1},
    "adv_patch": {"iterations": 1},
    "defenses": [{"name": "jpeg", "quality": 75}, {"name": "median", "kernel": 3}],
    "bootstrap_resamples": 200,
}


@pytest.fixture(scope="module")
def toy_models():
    import torch

    torch.manual_seed(0)
    text = TextEncoder(32)
    return Models(LatentGenerator.create(seed=0), ToyVictim(ToyMapNet()), EmbeddingPair(VisionEncoder(32), text))


@pytest.fixture(scope="module")
def toy_scenes():
    return [make_scene(f"h{i}", 40 + i, 50 + i) for i in range(2)]


@pytest.fixture(scope="module")
def small_report(toy_models, toy_scenes):
    cfg = ExperimentConfig.from_dict(SMALL)
    return run_experiment(cfg, toy_models, toy_scenes)


def test_config_defaults_validate():
    cfg = ExperimentConfig.from_dict()
    assert cfg["methods"] == ["latent", "pixel_pgd", "adv_patch"]
    assert cfg.config_hash() == ExperimentConfig.from_dict({}).config_hash()
    assert CONFIG_SCHEMA["additionalProperties"] is False


@pytest.mark.parametrize("override", [
    {"unknown": 1},
    {"tau": 1.5},
    {"methods": ["dreambooth"]},
    {"methods": []},
    {"attack": {"s": 1.0}},
    {"attack": {"K": -1}},
    {"defenses": [{"name": "jpeg", "quality": 0}]},
    {"planner": {"grid": "big"}},
])
def test_config_schema_errors(override):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(override)


def test_units_enumerate_the_sweep(toy_models, toy_scenes):
    cfg = ExperimentConfig.from_dict({"sweep": {"epsilon_budget": [0.25, 0.5], "lambda_clip": [0.0, 0.5]}})
    units = list(Runner(cfg, toy_models).units(toy_scenes[0], 3))
    # per goal: 4 latent sweep points, one pixel PGD, one patch
    assert len(units) == 2 * (4 + 1 + 1)
    assert {u[-1] for u in units} == {scene_seed(0, 3)}


def test_eta_follows_the_budget():
    cfg = ExperimentConfig.from_dict()
    assert cfg["sweep"]["epsilon_budget"] == [0.08, 0.3, 0.5, 1.0]
    assert cfg.attack_config("remove", 0.5, 0.3, 0).eta == pytest.approx(0.05)
    assert cfg.attack_config("remove", 1.0, 0.3, 0).eta == pytest.approx(0.1)
    fixed = ExperimentConfig.from_dict({"sweep": {"eta_ratio": None}, "attack": {"eta": 0.02}})
    assert fixed.attack_config("inject", 1.0, 0.3, 0).eta == 0.02


def test_scene_seed_is_stable_and_distinct():
    assert scene_seed(0, 1) == scene_seed(0, 1)
    assert len({scene_seed(0, i) for i in range(50)}) == 50


def test_missing_checkpoint_aborts_before_any_scene(tmp_path):
    cfg = ExperimentConfig.from_dict({"artifacts": str(tmp_path / "nothing")})
    with pytest.raises(ConfigurationError, match="missing"):
        run_experiment(cfg, scenes=[])


def test_zero_scenes_give_an_empty_valid_report(toy_models, tmp_path):
    cfg = ExperimentConfig.from_dict(SMALL)
    report = run_experiment(cfg, toy_models, [])
    assert report.rows == [] and report.aggregates == []
    again = EvalReport.from_json(report.to_json())
    assert again.rows == [] and again.config["defense_names"] == ["jpeg", "median"]
    emit_report(report, tmp_path)
    md = (tmp_path / "tables.md").read_text()
    # header rows only: no method rows in any table
    assert "| latent" not in md and "## Boundary removal" in md
    assert (tmp_path / "rows.csv").read_text().count("\n") == 1


def test_identity_attack_changes_nothing(toy_models, toy_scenes):
    cfg = ExperimentConfig.from_dict({**SMALL, "methods": ["pixel_pgd"], "pixel_pgd": {"epsilon": 0.0},
                                      "goals": ["remove"], "defenses": []})
    report = run_experiment(cfg, toy_models, toy_scenes[:1])
    (row,) = report.rows
    assert row["status"] == "ok"
    assert row["delta_det"] == 0 and row["delta_total"] == 0
    assert row["uptr"] is False and row["fsr"] is False
    assert row["psnr"] == 99.0
    (agg,) = report.aggregates
    assert agg["boundary_change"] == 0.0


def test_rows_cover_every_unit(small_report):
    assert len(small_report.rows) == 2 * 2 * 3
    assert all(r["status"] == "ok" for r in small_report.rows)
    assert all("_images" not in r for r in small_report.rows)
    latent = [r for r in small_report.rows if r["method"] == "latent"]
    assert all(r["control_boundary"] is not None and r["recon_boundary"] is not None for r in latent)
    assert all(r["def_jpeg_boundary"] is not None and r["clean_def_median_boundary"] is not None
               for r in small_report.rows)


def test_drop_percentage_recomputes_from_rows(small_report):
    for agg in small_report.aggregates:
        rows = [r for r in small_report.rows if (r["method"], r["goal"]) == (agg["method"], agg["goal"])]
        clean = np.mean([r["clean_boundary"] for r in rows])
        adv = np.mean([r["adv_boundary"] for r in rows])
        if clean:
            assert agg["boundary_drop_pct"] == pytest.approx(100 * (clean - adv) / clean, abs=1e-9)
        assert agg["n"] == len(rows)


def test_report_round_trip_and_tamper_detection(small_report):
    text = small_report.to_json()
    assert EvalReport.from_json(text).to_json() == text
    data = json.loads(text)
    data["rows"][0]["adv_boundary"] += 5
    with pytest.raises(ConfigurationError, match="aggregates"):
        EvalReport.from_json(json.dumps(data))


def test_aggregates_are_pure(small_report):
    defs = small_report.config["defense_names"]
    assert compute_aggregates(small_report.rows, defs, 200) == small_report.aggregates


def test_emission_is_byte_stable(small_report, tmp_path):
    a = emit_report(small_report, tmp_path / "a")
    b = emit_report(EvalReport.from_json(small_report.to_json()), tmp_path / "b")
    assert [p.name for p in a] == ["report.json", "rows.csv", "aggregates.csv", "tables.md", "summary.png"]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
    md = markdown_tables(small_report)
    assert "recovery jpeg" in md and "| latent | remove |" in md


def test_unwritable_output_aborts(small_report, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigurationError, match="not writable"):
        emit_report(small_report, blocker / "sub")


def test_scene_failure_is_recorded_and_run_continues(toy_models, toy_scenes):
    bad = dataclasses.replace(toy_scenes[0], scene_id="broken", images=toy_scenes[0].images[:1])
    cfg = ExperimentConfig.from_dict({**SMALL, "methods": ["pixel_pgd"], "goals": ["remove"]})
    report = run_experiment(cfg, toy_models, [bad, toy_scenes[1]])
    status = {r["scene_id"]: r["status"] for r in report.rows}
    assert status == {"broken": "failed", "h1": "ok"}
    failed = next(r for r in report.rows if r["status"] == "failed")
    assert "ContractViolation" in failed["error"]
    assert report.aggregates[0]["n"] == 1 and report.aggregates[0]["n_failed"] == 1


def test_parallel_workers_match_serial(toy_models, toy_scenes):
    base = {**SMALL, "methods": ["pixel_pgd", "adv_patch"], "goals": ["inject"]}
    serial = run_experiment(ExperimentConfig.from_dict(base), toy_models, toy_scenes)
    parallel = run_experiment(ExperimentConfig.from_dict({**base, "workers": 2}), toy_models, toy_scenes)
    assert serial.rows == parallel.rows


def test_run_directory_saves_config_and_images(toy_models, toy_scenes, tmp_path):
    cfg = ExperimentConfig.from_dict({**SMALL, "methods": ["pixel_pgd"], "goals": ["remove"]})
    run_experiment(cfg, toy_models, toy_scenes[:1], run_dir=tmp_path)
    assert json.loads((tmp_path / "config.json").read_text()) == cfg.record
    pngs = sorted(p.name for p in (tmp_path / "images" / "h0").rglob("*.png"))
    assert "CAM_FRONT_jpeg.png" in pngs
