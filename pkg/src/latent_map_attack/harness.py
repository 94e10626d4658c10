"""Experiment orchestration, aggregate metrics and report emission."""
from __future__ import annotations

import copy
import csv
import datetime as dt
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .attack import AttackConfig, LatentProblem, config_hash, random_delta_control, run_attack
from .baselines import adv_patch, pixel_pgd
from .corpus import Corpus, load_external, road_polygon
from .defenses import diffusion_purify, jpeg_defense, median_defense, recovery_fraction
from .errors import ConfigurationError
from .geometry import CLASSES
from .planner import PlannerConfig, astar_plan, compute_fsr, compute_orr, compute_orr_road_polygon, compute_uptr, rasterize_costmap
from .stats import bootstrap_ci, compute_psnr, sign_test_less
from .victim import DEFAULT_TAU, class_counts, threshold_detections

log = logging.getLogger(__name__)

METHODS = ("latent", "pixel_pgd", "adv_patch")
DEFENSES = ("jpeg", "median", "diffpure")
PIPELINE_ORDER = (
    "clean predict", "attack (once per scene, method, goal and sweep point)", "adversarial predict",
    "defenses on the stored adversarial images", "defended predicts", "planner on clean and adversarial detections",
    "metrics",
)

_ATTACK_PROPS = {
    "goal": {"enum": ["remove", "inject"]},
    "s": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "K": {"type": "integer", "minimum": 0},
    "epsilon_budget": {"type": "number", "minimum": 0},
    "eta": {"type": "number", "exclusiveMinimum": 0},
    "lambda_conf": {"type": "number", "minimum": 0},
    "lambda_spread": {"type": "number", "minimum": 0},
    "y_star": {"type": ["number", "null"]},
    "K_target": {"type": "integer", "minimum": 1},
    "gamma": {"type": "number", "minimum": 0},
    "lambda_clip": {"type": "number", "minimum": 0},
    "clip_target": {"type": "string", "minLength": 1},
    "clip_negative": {"type": "string", "minLength": 1},
    "lambda_neg": {"type": "number", "minimum": 0},
    "guidance_scale": {"type": "number", "minimum": 0},
    "use_checkpoint": {"type": "boolean"},
    "seed": {"type": "integer"},
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "latent_map_attack experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "corpus": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "count": {"type": "integer", "minimum": 0},
                "master_seed": {"type": "integer"},
                "split": {"type": "string"},
                "limit": {"type": ["integer", "null"], "minimum": 0},
                "path": {"type": ["string", "null"]},
            },
        },
        "artifacts": {"type": ["string", "null"]},
        "methods": {"type": "array", "minItems": 1, "items": {"enum": list(METHODS)}},
        "goals": {"type": "array", "minItems": 1, "items": {"enum": ["remove", "inject"]}},
        "attack": {"type": "object", "additionalProperties": False, "properties": _ATTACK_PROPS},
        "pixel_pgd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilon": {"type": "number", "minimum": 0},
                "iterations": {"type": "integer", "minimum": 0},
                "step": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "adv_patch": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iterations": {"type": "integer", "minimum": 0},
                "step": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilon_budget": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                "lambda_clip": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                "eta_ratio": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "defenses": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name"],
                "additionalProperties": False,
                "properties": {
                    "name": {"enum": list(DEFENSES)},
                    "quality": {"type": "integer", "minimum": 1, "maximum": 100},
                    "kernel": {"type": "integer", "minimum": 3},
                    "t_purify": {"type": ["integer", "null"], "minimum": 0},
                    "seed": {"type": "integer"},
                },
            },
        },
        "planner": {"type": "object"},
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "boolean"} for k in ("planner", "psnr", "random_control", "defended_clean")},
        },
        "tau": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "master_seed": {"type": "integer"},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "save_images": {"type": "boolean"},
        "bootstrap_resamples": {"type": "integer", "minimum": 1},
    },
}


def default_config() -> dict:
    return {
        "corpus": {"count": 800, "master_seed": 20240601, "split": "evaluate", "limit": 20, "path": None},
        "artifacts": None,
        "methods": list(METHODS),
        "goals": ["remove", "inject"],
        "attack": AttackConfig().to_record(),
        "pixel_pgd": {"epsilon": 0.1, "iterations": 30, "step": 0.01},
        "adv_patch": {"iterations": 30, "step": 0.05},
        "sweep": {"epsilon_budget": [0.08, 0.3, 0.5, 1.0], "lambda_clip": [0.3, 0.5], "eta_ratio": 0.1},
        "defenses": [
            {"name": "jpeg", "quality": 75},
            {"name": "median", "kernel": 3},
            {"name": "diffpure", "t_purify": None, "seed": 0},
        ],
        "planner": PlannerConfig().to_record(),
        "metrics": {"planner": True, "psnr": True, "random_control": True, "defended_clean": True},
        "tau": DEFAULT_TAU,
        "master_seed": 0,
        "workers": 1,
        "output_dir": "runs",
        "save_images": True,
        "bootstrap_resamples": 10_000,
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("attack", "planner"):
            out[k] = _merge(out[k], v)
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    record: dict

    @classmethod
    def from_dict(cls, override: Optional[dict] = None) -> "ExperimentConfig":
        rec = _merge(default_config(), override or {})
        try:
            jsonschema.validate(rec, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigurationError(f"invalid experiment config: {exc.message} at {list(exc.absolute_path)}") from exc
        AttackConfig.from_record(rec["attack"])
        PlannerConfig.from_record(rec["planner"])
        return cls(rec)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __getitem__(self, key):
        return self.record[key]

    def config_hash(self) -> str:
        return config_hash(self.record)

    @property
    def planner(self) -> PlannerConfig:
        return PlannerConfig.from_record(self.record["planner"])

    def attack_config(self, goal: str, epsilon: float, lambda_clip: float, seed: int) -> AttackConfig:
        rec = {**self.record["attack"], "goal": goal, "epsilon_budget": epsilon, "lambda_clip": lambda_clip,
               "seed": seed}
        ratio = self.record["sweep"].get("eta_ratio")
        if ratio is not None and epsilon > 0:
            # step size follows the budget so every sweep point gets the same number of steps to the boundary
            rec["eta"] = ratio * epsilon
        return AttackConfig.from_record(rec)


# -- report ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    aggregates: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    judge: list[dict] = field(default_factory=list)
    realism: list[dict] = field(default_factory=list)
    pipeline: list[str] = field(default_factory=lambda: list(PIPELINE_ORDER))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        report = cls(**data)
        n = report.config.get("bootstrap_resamples", 10_000)
        if compute_aggregates(report.rows, report.config.get("defense_names"), n) != report.aggregates:
            raise ConfigurationError("report aggregates do not match its rows")
        return report


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _rate(xs):
    xs = [bool(x) for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _group_key(row: dict) -> tuple:
    return row["method"], row["goal"], row["epsilon"], row["lambda_clip"]


def compute_aggregates(rows: list[dict], defense_names: Optional[list[str]] = None,
                       n_resamples: int = 10_000) -> list[dict]:
    """Per (method, goal, epsilon, lambda_clip) summary; a pure function of ``rows``."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(_group_key(r), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], -1 if k[2] is None else k[2], -1 if k[3] is None else k[3])):
        rs = groups[key]
        ok = [r for r in rs if r["status"] == "ok"]
        agg = {"method": key[0], "goal": key[1], "epsilon": key[2], "lambda_clip": key[3],
               "n": len(ok), "n_failed": len(rs) - len(ok)}
        for cls in CLASSES + ("total",):
            agg[f"mean_clean_{cls}"] = _mean([r[f"clean_{cls}"] for r in ok])
            agg[f"mean_adv_{cls}"] = _mean([r[f"adv_{cls}"] for r in ok])
        clean_b = [r["clean_boundary"] for r in ok]
        adv_b = [r["adv_boundary"] for r in ok]
        if ok:
            _, lo, hi = bootstrap_ci(adv_b, n_resamples=n_resamples, seed=0)
            agg["adv_boundary_ci"] = [lo, hi]
            _, lo, hi = bootstrap_ci(clean_b, n_resamples=n_resamples, seed=0)
            agg["clean_boundary_ci"] = [lo, hi]
        else:
            agg["adv_boundary_ci"] = agg["clean_boundary_ci"] = None
        mc, ma = agg["mean_clean_boundary"], agg["mean_adv_boundary"]
        agg["boundary_drop_pct"] = 100.0 * (mc - ma) / mc if mc else None
        agg["boundary_change"] = ma - mc if ok else None
        agg["mean_psnr"] = _mean([r["psnr"] for r in ok])
        for m in ("orr", "fsr", "uptr"):
            agg[f"{m}_rate"] = _rate([r[m] for r in ok])
        agg["p_adv_below_clean"] = sign_test_less(adv_b, clean_b) if ok else None
        agg["p_adv_above_clean"] = sign_test_less(clean_b, adv_b) if ok else None
        ctrl = [(r["adv_boundary"], r["control_boundary"]) for r in ok if r.get("control_boundary") is not None]
        agg["mean_control_boundary"] = _mean([c for _, c in ctrl]) if ctrl else None
        agg["p_adv_below_control"] = sign_test_less([a for a, _ in ctrl], [c for _, c in ctrl]) if ctrl else None
        conf = [(r["conf_initial"], r["conf_final"]) for r in ok if r.get("conf_initial") is not None]
        agg["conf_decreased_frac"] = _rate([f <= i for i, f in conf]) if conf else None
        for d in defense_names or []:
            md = _mean([r.get(f"def_{d}_boundary") for r in ok])
            agg[f"mean_def_{d}_boundary"] = md
            agg[f"recovery_{d}"] = (recovery_fraction(mc, ma, md) if ok and md is not None else None)
            agg[f"mean_clean_def_{d}_boundary"] = _mean([r.get(f"clean_def_{d}_boundary") for r in ok])
        out.append(agg)
    return out


# -- running ----------------------------------------------------------------------------


def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index), 0xA7]).generate_state(1)[0] % (2 ** 31))


def defense_name(spec: dict) -> str:
    return spec["name"]


def apply_defense(spec: dict, images: np.ndarray, generator) -> np.ndarray:
    name = spec["name"]
    if name == "jpeg":
        return jpeg_defense(images, spec.get("quality", 75))
    if name == "median":
        return median_defense(images, spec.get("kernel", 3))
    if name == "diffpure":
        return diffusion_purify(images, spec.get("t_purify"), generator, seed=spec.get("seed", 0))
    raise ConfigurationError(f"unknown defense {name!r}")


def _counts(victim, images: np.ndarray, cameras, tau: float) -> dict[str, int]:
    import torch

    with torch.no_grad():
        pred = victim.predict(torch.from_numpy(np.asarray(images)), cameras)
    det = threshold_detections(pred, tau)
    counts = class_counts(det)
    counts["total"] = len(det)
    return counts, det


def _empty_row(scene_id, method, goal, eps, lam, seed, defenses) -> dict:
    row = {"scene_id": scene_id, "method": method, "goal": goal, "epsilon": eps, "lambda_clip": lam,
           "seed": seed, "status": "ok", "error": None}
    for prefix in ("clean", "adv"):
        for cls in CLASSES + ("total",):
            row[f"{prefix}_{cls}"] = None
    for k in ("recon_boundary", "control_boundary", "control_total", "delta_det", "delta_total", "psnr",
              "orr", "fsr", "uptr", "clean_path_cost", "adv_path_cost", "clean_reached", "adv_reached",
              "conf_initial", "conf_final", "delta_linf"):
        row[k] = None
    for d in defenses:
        row[f"def_{d}_boundary"] = row[f"def_{d}_total"] = row[f"clean_def_{d}_boundary"] = None
    return row


class Runner:
    def __init__(self, cfg: ExperimentConfig, models, run_dir: Optional[Path] = None):
        self.cfg = cfg
        self.models = models
        self.run_dir = run_dir
        self.tau = cfg["tau"]
        self.planner_cfg = cfg.planner
        self.defenses = [defense_name(d) for d in cfg["defenses"]]

    def units(self, scene, index):
        seed = scene_seed(self.cfg["master_seed"], index)
        cfg = self.cfg
        for goal in cfg["goals"]:
            for method in cfg["methods"]:
                if method == "latent":
                    for eps in cfg["sweep"]["epsilon_budget"]:
                        for lam in cfg["sweep"]["lambda_clip"]:
                            yield method, goal, eps, lam, seed
                elif method == "pixel_pgd":
                    yield method, goal, cfg["pixel_pgd"]["epsilon"], None, seed
                else:
                    yield method, goal, None, None, seed

    def clean_state(self, scene):
        counts, det = _counts(self.models.victim, scene.images, scene.cameras, self.tau)
        state = {"counts": counts, "det": det, "def": {}}
        if self.cfg["metrics"]["planner"]:
            state["path"] = astar_plan(rasterize_costmap(det, self.planner_cfg), self.planner_cfg.start,
                                       self.planner_cfg.goal, self.planner_cfg)
        if self.cfg["metrics"]["defended_clean"]:
            for spec in self.cfg["defenses"]:
                images = apply_defense(spec, scene.images, self.models.generator)
                state["def"][spec["name"]] = _counts(self.models.victim, images, scene.cameras, self.tau)[0]
        return state

    def attack(self, scene, method, goal, eps, lam, seed):
        m = self.models
        if method == "latent":
            acfg = self.cfg.attack_config(goal, eps, lam, seed)
            problem = LatentProblem(scene, acfg, m.generator, m.victim, m.guidance)
            res = run_attack(scene, acfg, m.generator, m.victim, m.guidance, problem=problem)
            extra = {}
            with_control = self.cfg["metrics"]["random_control"]
            if with_control:
                ctrl = random_delta_control(scene, acfg, m.generator, m.victim, res.extra["delta_linf"], problem)
                extra["control"] = _counts(m.victim, ctrl.images, scene.cameras, self.tau)[0]
            recon = random_delta_control(scene, acfg, m.generator, m.victim, 0.0, problem)
            extra["recon"] = _counts(m.victim, recon.images, scene.cameras, self.tau)[0]
            return res, extra
        acfg = self.cfg.attack_config(goal, self.cfg["attack"]["epsilon_budget"], 0.0, seed)
        if method == "pixel_pgd":
            p = self.cfg["pixel_pgd"]
            return pixel_pgd(scene, m.victim, acfg, p["epsilon"], p["iterations"], p["step"]), {}
        p = self.cfg["adv_patch"]
        return adv_patch(scene, m.victim, acfg, iterations=p["iterations"], step=p["step"]), {}

    def scene_rows(self, scene, index) -> list[dict]:
        log.info("scene %s: %s", scene.scene_id, " -> ".join(PIPELINE_ORDER))
        try:
            clean = self.clean_state(scene)
        except Exception as exc:  # recorded per scene, the run continues
            log.exception("scene %s failed during clean pass", scene.scene_id)
            return [dict(_empty_row(scene.scene_id, *u, self.defenses), status="failed", error=repr(exc))
                    for u in self.units(scene, index)]
        rows = []
        for unit in self.units(scene, index):
            row = _empty_row(scene.scene_id, *unit, self.defenses)
            try:
                self.fill_row(row, scene, clean, unit)
            except Exception as exc:
                log.exception("scene %s unit %s failed", scene.scene_id, unit)
                row["status"], row["error"] = "failed", repr(exc)
            rows.append(row)
        return rows

    def fill_row(self, row, scene, clean, unit):
        method, goal, eps, lam, seed = unit
        m = self.models
        for cls, v in clean["counts"].items():
            row[f"clean_{cls}"] = v
        res, extra = self.attack(scene, *unit)
        adv_counts, adv_det = _counts(m.victim, res.images, scene.cameras, self.tau)
        for cls, v in adv_counts.items():
            row[f"adv_{cls}"] = v
        row["delta_det"] = adv_counts["boundary"] - clean["counts"]["boundary"]
        row["delta_total"] = adv_counts["total"] - clean["counts"]["total"]
        if "control" in extra:
            row["control_boundary"] = extra["control"]["boundary"]
            row["control_total"] = extra["control"]["total"]
        if "recon" in extra:
            row["recon_boundary"] = extra["recon"]["boundary"]
        conf = [h["confidence"] for h in res.loss_history if "confidence" in h]
        if method == "latent" and conf:
            row["conf_initial"], row["conf_final"] = conf[0], conf[-1]
            row["delta_linf"] = res.extra["delta_linf"]
        if self.cfg["metrics"]["psnr"]:
            row["psnr"] = float(np.mean([compute_psnr(a, c) for a, c in zip(res.images, scene.images)]))
        # every defense sees the same stored adversarial images
        defended = {}
        for spec in self.cfg["defenses"]:
            name = spec["name"]
            defended[name] = apply_defense(spec, res.images, m.generator)
            dc = _counts(m.victim, defended[name], scene.cameras, self.tau)[0]
            row[f"def_{name}_boundary"], row[f"def_{name}_total"] = dc["boundary"], dc["total"]
            if name in clean["def"]:
                row[f"clean_def_{name}_boundary"] = clean["def"][name]["boundary"]
        if self.cfg["metrics"]["planner"]:
            pc = self.planner_cfg
            adv_path = astar_plan(rasterize_costmap(adv_det, pc), pc.start, pc.goal, pc)
            clean_path = clean["path"]
            if pc.orr_mode == "road_polygon":
                row["orr"] = compute_orr_road_polygon(adv_path, road_polygon(scene.gt_layout))
            else:
                row["orr"] = compute_orr(adv_path, [d.polyline for d in clean["det"].of_class("boundary")])
            row["fsr"] = compute_fsr(adv_path, clean_path, pc.goal, pc)
            row["uptr"] = compute_uptr(clean_path, adv_path)
            row["clean_path_cost"], row["adv_path_cost"] = clean_path.cost, adv_path.cost
            row["clean_reached"], row["adv_reached"] = clean_path.reached_goal, adv_path.reached_goal
        if self.run_dir is not None and self.cfg["save_images"]:
            from .corpus.io import save_image

            tag = f"{method}_{goal}" + (f"_eps{eps:g}" if eps is not None else "") + (
                f"_clip{lam:g}" if lam is not None else "")
            d = res.save(self.run_dir / "images" / scene.scene_id / tag, [c.name for c in scene.cameras])
            for name, imgs in defended.items():
                for cam, img in zip(scene.cameras, imgs):
                    save_image(d / f"{cam.name}_{name}.png", img)
        row["_images"] = res.images


def load_scenes(cfg: ExperimentConfig) -> list:
    c = cfg["corpus"]
    if c.get("path"):
        scenes = list(load_external(c["path"]))
    else:
        corpus = Corpus.generate(c["count"], c["master_seed"])
        ids = corpus.split(c["split"]) if c["count"] else []
        if c.get("limit") is not None:
            ids = ids[: c["limit"]]
        scenes = [corpus.scene(i) for i in ids]
    if c.get("limit") is not None:
        scenes = scenes[: c["limit"]]
    return scenes


def run_directory(cfg: ExperimentConfig, stamp: Optional[str] = None) -> Path:
    stamp = stamp or dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return Path(cfg["output_dir"]) / f"run-{stamp}-{cfg.config_hash()}"


def run_experiment(cfg: ExperimentConfig, models=None, scenes: Optional[list] = None,
                   run_dir: Optional[Path] = None, judge_client=None) -> EvalReport:
    """Evaluate every configured attack on every scene; per-scene failures are recorded, not fatal."""
    from .artifacts import load_models

    if models is None:
        models = load_models(cfg["artifacts"])  # aborts before any scene on missing checkpoints
    if scenes is None:
        scenes = load_scenes(cfg)
    runner = Runner(cfg, models, run_dir)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        (Path(run_dir) / "config.json").write_text(json.dumps(cfg.record, indent=1, sort_keys=True))
    workers = cfg["workers"]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_scene = list(pool.map(runner.scene_rows, scenes, range(len(scenes))))
    else:
        per_scene = [runner.scene_rows(s, i) for i, s in enumerate(scenes)]
    rows = [r for rs in per_scene for r in rs]
    images = [r.pop("_images", None) for r in rows]
    record = dict(cfg.record, defense_names=runner.defenses)
    report = EvalReport(rows, compute_aggregates(rows, runner.defenses, cfg["bootstrap_resamples"]), record)
    if judge_client is not None:
        judge_report(report, scenes, rows, images, judge_client, run_dir)
    return report


def judge_report(report: EvalReport, scenes, rows, images, client, run_dir=None) -> None:
    from .judge import judge_realism, realism_rate

    items, cats = [], []
    for s in scenes:
        for cam, img in zip(s.cameras, s.images):
            items.append((s.scene_id, cam.name, img))
            cats.append("clean")
    for r, imgs in zip(rows, images):
        if imgs is None:
            continue
        for cam, img in zip(scenes[0].cameras, imgs):
            items.append((f"{r['scene_id']}/{r['method']}/{r['goal']}", cam.name, img))
            cats.append(r["method"])
    verdicts = judge_realism(items, client)
    report.judge = [dict(asdict(v), category=c) for v, c in zip(verdicts, cats)]
    for cat in sorted(set(cats)):
        vs = [v for v, c in zip(verdicts, cats) if c == cat]
        report.realism.append({"category": cat, **realism_rate(vs)})


# -- emission -------------------------------------------------------------------------------


def _fmt(v, nd=2):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{nd}f}"
    return str(v)


def markdown_tables(report: EvalReport) -> str:
    defs = report.config.get("defense_names", [])
    out = ["# Evaluation report", ""]
    for goal, title in (("remove", "Boundary removal"), ("inject", "Boundary injection")):
        out += [f"## {title}", "",
                "| method | eps | lambda_clip | n | clean boundary | adversarial boundary | change | drop % | ORR | FSR | UPTR | PSNR |",
                "|---|---|---|---|---|---|---|---|---|---|---|---|"]
        for a in report.aggregates:
            if a["goal"] != goal:
                continue
            out.append("| " + " | ".join(_fmt(x) for x in (
                a["method"], a["epsilon"], a["lambda_clip"], a["n"], a["mean_clean_boundary"], a["mean_adv_boundary"],
                a["boundary_change"], a["boundary_drop_pct"], a["orr_rate"], a["fsr_rate"], a["uptr_rate"],
                a["mean_psnr"])) + " |")
        out.append("")
    out += ["## Defenses (boundary counts, recovery fraction)", "",
            "| method | goal | eps | clean | adversarial | " + " | ".join(defs) + " | "
            + " | ".join(f"recovery {d}" for d in defs) + " |",
            "|" + "---|" * (5 + 2 * len(defs))]
    for a in report.aggregates:
        out.append("| " + " | ".join(_fmt(x) for x in (
            [a["method"], a["goal"], a["epsilon"], a["mean_clean_boundary"], a["mean_adv_boundary"]]
            + [a.get(f"mean_def_{d}_boundary") for d in defs]
            + [a.get(f"recovery_{d}") for d in defs])) + " |")
    out.append("")
    if report.realism:
        out += ["## Realism judge", "", "| category | n | flagged | YES rate | 95% CI | mean confidence |",
                "|---|---|---|---|---|---|"]
        for r in report.realism:
            ci = "n/a" if r["rate"] is None else f"[{r['ci_low']:.3f}, {r['ci_high']:.3f}]"
            out.append(f"| {r['category']} | {r['n']} | {r['flagged']} | {_fmt(r['rate'], 3)} | {ci} | "
                       f"{_fmt(r['mean_confidence'])} |")
        out.append("")
    return "\n".join(out)


ROW_COLUMNS = ["scene_id", "method", "goal", "epsilon", "lambda_clip", "seed", "status", "error"]


def rows_csv(rows: list[dict], defense_names: list[str]) -> str:
    cols = list(ROW_COLUMNS)
    cols += [f"{p}_{c}" for p in ("clean", "adv") for c in CLASSES + ("total",)]
    cols += ["recon_boundary", "control_boundary", "control_total", "delta_det", "delta_total", "psnr", "orr", "fsr",
             "uptr", "clean_path_cost", "adv_path_cost", "clean_reached", "adv_reached", "conf_initial", "conf_final",
             "delta_linf"]
    for d in defense_names:
        cols += [f"def_{d}_boundary", f"def_{d}_total", f"clean_def_{d}_boundary"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
    return buf.getvalue()


def plot_report(report: EvalReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    aggs = [a for a in report.aggregates if a["n"]]
    panels = 2 if report.realism else 1
    fig, axes = plt.subplots(1, panels, figsize=(6 * panels, 3.6), squeeze=False)
    ax = axes[0][0]
    labels = [f"{a['method']}\n{a['goal']}" + (f"\neps={a['epsilon']:g}" if a["epsilon"] is not None else "")
              for a in aggs]
    x = np.arange(len(aggs))
    for off, key, ci_key, name in ((-0.2, "mean_clean_boundary", "clean_boundary_ci", "clean"),
                                    (0.2, "mean_adv_boundary", "adv_boundary_ci", "adversarial")):
        vals = [a[key] for a in aggs]
        err = np.array([[a[key] - a[ci_key][0], a[ci_key][1] - a[key]] for a in aggs]).T.reshape(2, -1)
        ax.bar(x + off, vals, 0.4, yerr=err.tolist(), capsize=3, label=name)
    ax.set_xticks(x, labels, fontsize=7)
    ax.set_ylabel("boundary detections / scene")
    ax.legend(fontsize=8)
    if report.realism:
        ax = axes[0][1]
        rs = [r for r in report.realism if r["rate"] is not None]
        vals = [100 * r["rate"] for r in rs]
        err = np.array([[100 * (r["rate"] - r["ci_low"]), 100 * (r["ci_high"] - r["rate"])] for r in rs]).T.reshape(2, -1)
        ax.bar(np.arange(len(rs)), vals, yerr=err.tolist(), capsize=3)
        ax.set_xticks(np.arange(len(rs)), [r["category"] for r in rs], fontsize=8)
        ax.set_ylabel("judged realistic (%)")
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit_report(report: EvalReport, out_dir, formats=("json", "csv", "md", "png")) -> list[Path]:
    """Write the report; identical reports produce identical bytes."""
    d = Path(out_dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
        probe = d / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory {d} is not writable: {exc}") from exc
    written = []
    defs = report.config.get("defense_names", [])
    if "json" in formats:
        written.append(d / "report.json")
        written[-1].write_text(report.to_json())
    if "csv" in formats:
        written.append(d / "rows.csv")
        written[-1].write_text(rows_csv(report.rows, defs))
        agg_cols = sorted({k for a in report.aggregates for k in a}) or ["method", "goal", "epsilon", "lambda_clip", "n"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(agg_cols)
        for a in report.aggregates:
            w.writerow(["" if a.get(c) is None else (repr(a[c]) if isinstance(a[c], float) else a[c]) for c in agg_cols])
        written.append(d / "aggregates.csv")
        written[-1].write_text(buf.getvalue())
    if "md" in formats:
        written.append(d / "tables.md")
        written[-1].write_text(markdown_tables(report))
    if "png" in formats:
        written.append(d / "summary.png")
        plot_report(report, written[-1])
    return written
