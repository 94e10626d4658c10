"""Command-line entry point: ``lma <verb> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np


def _experiment_overrides(args) -> dict:
    o: dict = {}
    corpus = {k: v for k, v in (("count", args.count), ("master_seed", args.corpus_seed), ("limit", args.limit),
                                ("split", args.split), ("path", args.corpus_path)) if v is not None}
    if corpus:
        o["corpus"] = corpus
    if args.artifacts:
        o["artifacts"] = str(args.artifacts)
    if args.methods:
        o["methods"] = args.methods
    if args.goals:
        o["goals"] = args.goals
    sweep = {}
    if args.epsilon:
        sweep["epsilon_budget"] = args.epsilon
    if args.lambda_clip:
        sweep["lambda_clip"] = args.lambda_clip
    if args.eta is not None:
        # a fixed step replaces the per-budget ratio
        sweep["eta_ratio"] = None
    if sweep:
        o["sweep"] = sweep
    attack = {k: v for k, v in (("K", args.iterations), ("s", args.strength), ("eta", args.eta),
                                ("y_star", args.y_star), ("guidance_scale", args.guidance_scale)) if v is not None}
    if attack:
        o["attack"] = attack
    for key in ("tau", "master_seed", "workers", "output_dir"):
        v = getattr(args, key)
        if v is not None:
            o[key] = v
    return o


def _load_config(args):
    from .harness import ExperimentConfig, _merge

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    return ExperimentConfig.from_dict(_merge(base, _experiment_overrides(args)) if base else _experiment_overrides(args))


def _add_experiment_flags(p):
    p.add_argument("--config", type=Path, help="experiment config (JSON, see `lma schema`)")
    p.add_argument("--artifacts", type=Path)
    p.add_argument("--count", type=int)
    p.add_argument("--corpus-seed", type=int)
    p.add_argument("--corpus-path", type=str)
    p.add_argument("--split", type=str)
    p.add_argument("--limit", type=int)
    p.add_argument("--methods", nargs="+", choices=["latent", "pixel_pgd", "adv_patch"])
    p.add_argument("--goals", nargs="+", choices=["remove", "inject"])
    p.add_argument("--epsilon", type=float, nargs="+", help="latent L-inf budgets to sweep")
    p.add_argument("--lambda-clip", type=float, nargs="+")
    p.add_argument("--iterations", type=int, help="PGD iterations K")
    p.add_argument("--strength", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--y-star", type=float)
    p.add_argument("--guidance-scale", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--master-seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output-dir", type=str)


def cmd_gen_corpus(args):
    from .corpus import Corpus, save_corpus

    corpus = Corpus.generate(args.count, args.seed)
    save_corpus(args.out, corpus.manifest, corpus.scenes())
    print(f"wrote {len(corpus)} scenes to {args.out}")


def _corpus(args):
    from .artifacts import training_corpus

    return training_corpus(args.count, args.seed)


def cmd_train_generator(args):
    from .artifacts import train_generator

    gen = train_generator(_corpus(args), Path(args.artifacts) / "generator", args.ae_steps, args.den_steps, args.train_seed)
    print(json.dumps(gen.info["model_card"], indent=1))


def cmd_train_guidance(args):
    from .artifacts import train_guidance

    pair = train_guidance(_corpus(args), Path(args.artifacts) / "guidance", args.steps, args.train_seed)
    print(json.dumps(pair.info["training"], indent=1))


def cmd_train_victim(args):
    from .artifacts import train_victim
    from .diffusion.generator import LatentGenerator

    gen = LatentGenerator.load(Path(args.artifacts) / "generator")
    victim = train_victim(_corpus(args), gen, Path(args.artifacts) / "victim", args.steps, args.train_seed)
    print(json.dumps(victim.info["held_out_quality"], indent=1))


def cmd_attack(args):
    from .artifacts import load_models
    from .harness import Runner, load_scenes

    cfg = _load_config(args)
    models = load_models(cfg["artifacts"])
    runner = Runner(cfg, models)
    out = Path(args.out)
    for i, scene in enumerate(load_scenes(cfg)):
        for unit in runner.units(scene, i):
            res, _ = runner.attack(scene, *unit)
            method, goal, eps, lam, _ = unit
            tag = f"{method}_{goal}" + (f"_eps{eps:g}" if eps is not None else "")
            d = res.save(out / scene.scene_id / tag, [c.name for c in scene.cameras])
            print(d)


def cmd_defend(args):
    from .artifacts import load_models
    from .attack import AttackResult
    from .corpus.io import save_image
    from .harness import apply_defense

    res = AttackResult.load(args.result)
    spec = {"name": args.defense, "quality": args.quality, "kernel": args.kernel, "t_purify": args.t_purify,
            "seed": args.purify_seed}
    gen = load_models(args.artifacts).generator if args.defense == "diffpure" else None
    out = apply_defense(spec, res.images, gen)
    for i, img in enumerate(out):
        save_image(Path(args.result) / f"view{i}_{args.defense}.png", img)
    np.save(Path(args.result) / f"defended_{args.defense}.npy", out)
    print(f"defended {len(out)} views with {args.defense}")


def cmd_plan(args):
    import torch

    from .artifacts import load_models
    from .attack import AttackResult
    from .planner import PlannerConfig, astar_plan, compute_fsr, compute_orr, compute_uptr, export, rasterize_costmap
    from .victim import threshold_detections

    cfg = PlannerConfig()
    res = AttackResult.load(args.result)
    adv_det = threshold_detections(res.prediction, args.tau)
    adv_map = rasterize_costmap(adv_det, cfg)
    adv_path = astar_plan(adv_map, cfg.start, cfg.goal, cfg)
    export(adv_map, adv_path, args.result, "adversarial")
    out = {"adv_cost": adv_path.cost, "adv_reached": adv_path.reached_goal}
    if args.clean_images:
        victim = load_models(args.artifacts).victim
        x = torch.from_numpy(np.load(args.clean_images))
        with torch.no_grad():
            clean_det = threshold_detections(victim.predict(x), args.tau)
        clean_map = rasterize_costmap(clean_det, cfg)
        clean_path = astar_plan(clean_map, cfg.start, cfg.goal, cfg)
        export(clean_map, clean_path, args.result, "clean")
        out.update(clean_cost=clean_path.cost,
                   orr=compute_orr(adv_path, [d.polyline for d in clean_det.of_class("boundary")]),
                   fsr=compute_fsr(adv_path, clean_path, cfg.goal, cfg), uptr=compute_uptr(clean_path, adv_path))
    print(json.dumps(out, indent=1))


def cmd_judge(args):
    from .corpus.io import load_image
    from .judge import ArchivingClient, HTTPJudgeClient, ReplayClient, judge_realism, realism_rate, save_verdicts

    client = ReplayClient(args.archive) if args.replay else ArchivingClient(HTTPJudgeClient(), args.archive)
    paths = sorted(Path(args.images).rglob("*.png"))
    items = [(str(p.parent.relative_to(args.images)), p.stem, load_image(p)) for p in paths]
    verdicts = judge_realism(items, client, max_in_flight=args.max_in_flight, min_interval=args.min_interval)
    save_verdicts(verdicts, Path(args.out))
    print(json.dumps(realism_rate(verdicts), indent=1))


def cmd_report(args):
    from .harness import EvalReport, emit_report, run_directory, run_experiment

    if args.from_json:
        report = EvalReport.from_json(Path(args.from_json).read_text())
        out = Path(args.out or Path(args.from_json).parent)
    else:
        cfg = _load_config(args)
        out = Path(args.out) if args.out else run_directory(cfg, args.stamp)
        client = None
        if args.judge_archive:
            from .judge import ArchivingClient, HTTPJudgeClient, ReplayClient

            client = ReplayClient(args.judge_archive) if args.judge_replay else ArchivingClient(
                HTTPJudgeClient(), args.judge_archive)
        report = run_experiment(cfg, run_dir=out, judge_client=client)
    for p in emit_report(report, out):
        print(p)


def cmd_schema(args):
    from .harness import CONFIG_SCHEMA, default_config

    print(json.dumps(default_config() if args.defaults else CONFIG_SCHEMA, indent=1))


def build_parser() -> argparse.ArgumentParser:
    from .artifacts import CORPUS_COUNT, CORPUS_SEED, default_artifact_dir

    p = argparse.ArgumentParser(prog="lma", description="Latent-space attacks on vectorized map construction.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-corpus", help="render a procedural corpus to disk")
    g.add_argument("--count", type=int, default=CORPUS_COUNT)
    g.add_argument("--seed", type=int, default=CORPUS_SEED)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_corpus)

    for verb, func, steps in (("train-generator", cmd_train_generator, None),
                              ("train-guidance", cmd_train_guidance, 1500),
                              ("train-victim", cmd_train_victim, 4000)):
        t = sub.add_parser(verb)
        t.add_argument("--artifacts", type=Path, default=default_artifact_dir())
        t.add_argument("--count", type=int, default=CORPUS_COUNT)
        t.add_argument("--seed", type=int, default=CORPUS_SEED)
        t.add_argument("--train-seed", type=int, default=0)
        if steps is None:
            t.add_argument("--ae-steps", type=int, default=4000)
            t.add_argument("--den-steps", type=int, default=4000)
        else:
            t.add_argument("--steps", type=int, default=steps)
        t.set_defaults(func=func)

    a = sub.add_parser("attack", help="run the configured attacks and save results")
    _add_experiment_flags(a)
    a.add_argument("--out", type=Path, required=True)
    a.set_defaults(func=cmd_attack)

    d = sub.add_parser("defend", help="apply a defense to a saved attack result")
    d.add_argument("--result", type=Path, required=True)
    d.add_argument("--defense", choices=["jpeg", "median", "diffpure"], required=True)
    d.add_argument("--quality", type=int, default=75)
    d.add_argument("--kernel", type=int, default=3)
    d.add_argument("--t-purify", type=int, default=None)
    d.add_argument("--purify-seed", type=int, default=0)
    d.add_argument("--artifacts", type=Path, default=None)
    d.set_defaults(func=cmd_defend)

    pl = sub.add_parser("plan", help="plan on a saved attack result and export cost map and path")
    pl.add_argument("--result", type=Path, required=True)
    pl.add_argument("--clean-images", type=Path, help=".npy (V, 3, H, W) clean views for ORR/FSR/UPTR")
    pl.add_argument("--tau", type=float, default=0.3)
    pl.add_argument("--artifacts", type=Path, default=None)
    pl.set_defaults(func=cmd_plan)

    j = sub.add_parser("judge", help="send PNG views to the realism judge")
    j.add_argument("--images", type=Path, required=True)
    j.add_argument("--archive", type=Path, required=True)
    j.add_argument("--replay", action="store_true", help="answer from the archive instead of the endpoint")
    j.add_argument("--out", type=Path, required=True)
    j.add_argument("--max-in-flight", type=int, default=2)
    j.add_argument("--min-interval", type=float, default=0.5)
    j.set_defaults(func=cmd_judge)

    r = sub.add_parser("report", help="run the full evaluation and emit tables and plots")
    _add_experiment_flags(r)
    r.add_argument("--out", type=Path)
    r.add_argument("--stamp", type=str, help="run stamp used in the run directory name")
    r.add_argument("--from-json", type=Path, help="re-emit an existing report.json")
    r.add_argument("--judge-archive", type=Path)
    r.add_argument("--judge-replay", action="store_true")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("schema", help="print the experiment config schema")
    s.add_argument("--defaults", action="store_true", help="print the default config instead")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    from .artifacts import set_determinism
    from .errors import ConfigurationError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    set_determinism(args.threads)
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
