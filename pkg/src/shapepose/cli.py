"""Command-line entry point: generate, train, eval {predict,reach,disentangle,grid}, plan.

Config values resolve as: command-line flag > --config file > built-in default.
The resolved config is printed at startup and archived as config.json beside the outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger("shapepose")

MODEL_KINDS = ("vae", "gqn", "vaesp")
CATEGORIES = ("bottle", "bowl", "can", "mug")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config plumbing

def load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file {p} not found")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise CliError(f"config file {p} must hold a flat mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(defaults, file_cfg, cli):
    """Merge three flat dicts; returns (values, source per key)."""
    values, source = {}, {}
    for k, v in defaults.items():
        values[k], source[k] = v, "default"
        if k in file_cfg:
            values[k], source[k] = file_cfg[k], "file"
        if cli.get(k) is not None:
            values[k], source[k] = cli[k], "cli"
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        log.warning("ignoring unknown config keys: %s", ", ".join(unknown))
    return values, source


def print_config(values, source, stream=None):
    stream = stream or sys.stdout
    print("resolved config:", file=stream)
    for k in sorted(values):
        print(f"  {k} = {values[k]!r}  [{source[k]}]", file=stream)


def make_run_dir(out, seed, label):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out)
    if not base.parent.exists():
        raise CliError(f"parent directory {base.parent} does not exist")
    run = base / f"{stamp}_seed{seed}_{label}"
    n = 1
    while run.exists():
        run = base / f"{stamp}_seed{seed}_{label}_{n}"
        n += 1
    run.mkdir(parents=True)
    return run


def archive_config(run_dir, command, values):
    (Path(run_dir) / "config.json").write_text(
        json.dumps({"command": command, **values}, indent=1, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------- commands

GENERATE_DEFAULTS = {"category": "bottle", "instances": 15, "views": 64, "seed": 0, "hemisphere": "upper",
                     "first_instance": 0, "out": "data", "overwrite": False}


def cmd_generate(values):
    from .dataset import DatasetConfig, DatasetExists, generate_dataset

    cfg = DatasetConfig(root=values["out"], category=values["category"], instances=values["instances"],
                        views=values["views"], seed=values["seed"], hemisphere=values["hemisphere"],
                        overwrite=values["overwrite"], first_instance=values["first_instance"])
    try:
        manifest = generate_dataset(cfg)
    except (DatasetExists, FileNotFoundError) as err:
        raise CliError(str(err)) from err
    archive_config(manifest.parent, "generate", values)
    print(manifest)
    return manifest


TRAIN_DEFAULTS = {"model": "vaesp", "category": "bottle", "data": "data", "tolerance": None, "learning_rate": 1e-4,
                  "multiplier_lr": 1e-2, "batch_size": 16, "epochs": 50, "swap_probability": 0.5, "seed": 0,
                  "steps_per_epoch": None, "out": "runs"}


def cmd_train(values):
    from .dataset import MultiViewDataset
    from .training import TrainingConfig, train

    if values["model"] not in MODEL_KINDS:
        raise CliError(f"unknown model {values['model']!r}")
    cat_dir = Path(values["data"]) / values["category"]
    if not (cat_dir / "manifest.json").exists():
        raise CliError(f"no dataset at {cat_dir}; run `generate` first")
    cfg = TrainingConfig(category=values["category"], mse_tolerance=values["tolerance"],
                         learning_rate=values["learning_rate"], multiplier_lr=values["multiplier_lr"],
                         batch_size=values["batch_size"], epochs=values["epochs"],
                         swap_probability=values["swap_probability"], seed=values["seed"],
                         steps_per_epoch=values["steps_per_epoch"])
    run = make_run_dir(values["out"], values["seed"], f"train_{values['model']}_{values['category']}")
    archive_config(run, "train", {**values, "training_config": dataclasses.asdict(cfg)})
    print(f"run directory: {run}")
    data = MultiViewDataset(cat_dir)
    res = train(values["model"], data, cfg, run_dir=run)
    print(f"converged={res.converged} final constraints={np.round(res.final_constraints, 2).tolist()} "
          f"checkpoint={res.checkpoints[-1] if res.checkpoints else None}")
    return run


def _load(path):
    from .checkpoint import file_digest, load_checkpoint

    model, meta = load_checkpoint(path)
    cat = (meta.get("training_config") or {}).get("category")
    return model, meta, cat, file_digest(path)


def _provenance(values, loaded):
    return {"seed": values["seed"],
            "checkpoint_sha256": {Path(p).name: d for p, (_, _, _, d) in loaded.items()},
            "dataset_seed": {Path(p).name: m.get("dataset_seed") for p, (_, m, _, _) in loaded.items()}}


EVAL_DEFAULTS = {"checkpoint": None, "category": None, "n": 500, "trials": 50, "candidates": 10000, "sweep": 50,
                 "n_shapes": 5, "n_poses": 5, "test": "welch", "seed": 0, "out": "runs", "gqn_scoring": "imagine"}


def cmd_eval(what, values):
    from . import evaluation as ev
    from .planner import PlannerConfig
    from .plotting import emit_plots
    from .results import pivot, write_table

    if not values["checkpoint"]:
        raise CliError("eval needs at least one --checkpoint")
    loaded = {p: _load(p) for p in values["checkpoint"]}
    run = make_run_dir(values["out"], values["seed"], f"eval_{what}")
    archive_config(run, f"eval {what}", values)
    print(f"run directory: {run}")
    prov = _provenance(values, loaded)
    plots = {"profiles": {}, "predictions": {}, "grids": {}, "reach": {}}
    entries, per_sample = [], {}
    for path, (model, meta, cat, _) in loaded.items():
        category = values["category"] or cat
        if category not in CATEGORIES:
            raise CliError(f"cannot tell the category of {path}; pass --category")
        name = f"{model.kind}_{category}"
        if what == "predict":
            test = ev.render_test_transitions(category, values["n"], values["seed"])
            res = ev.eval_one_step(model, test)
            entries.append({"model": model.kind, "category": category, "mse": res.mse, "ssim": res.ssim})
            per_sample[name] = {"mse": res.mse.to_dict(), "ssim": res.ssim.to_dict()}
            plots["predictions"][name] = res
            print(f"{name}: mse {res.mse}  ssim {res.ssim}")
        elif what == "reach":
            cfg = PlannerConfig(n_candidates=values["candidates"], seed=values["seed"],
                                gqn_scoring=values["gqn_scoring"])
            res = ev.eval_reach(model, category, values["trials"], cfg, seed=values["seed"], test=values["test"])
            entries.append({"model": model.kind, "category": category, "mse": res.planner})
            entries.append({"model": "random", "category": category, "mse": res.random})
            per_sample[name] = {"planner": res.planner.to_dict(), "random": res.random.to_dict(),
                                "p_value": res.p_value, "test": res.test, "trials": res.records}
            plots["reach"][name] = res
            print(f"{name}: planner {res.planner}  random {res.random}  p={res.p_value:.3g} ({res.test})")
        elif what == "disentangle":
            prof = ev.disentanglement_profile(model, category, n_sweep=values["sweep"], seed=values["seed"])
            entries.append({"model": model.kind, "category": category, "score": f"{prof.score:.4f}"})
            per_sample[name] = {"score": prof.score, "fixed_shape": prof.per_dim_fixed_shape.tolist(),
                                "fixed_pose": prof.per_dim_fixed_pose.tolist()}
            plots["profiles"][name] = prof
            print(f"{name}: disentanglement score {prof.score:.4f}")
        elif what == "grid":
            sweeps = ev.make_sweeps(category, max(values["n_shapes"], values["n_poses"]), values["seed"])
            grid = ev.recombination_grid(model, sweeps.shape_images[:values["n_shapes"]],
                                         sweeps.pose_images[:values["n_poses"]])
            plots["grids"][name] = grid
            per_sample[name] = {"cells": list(grid.shape)}
        else:
            raise CliError(f"unknown eval target {what!r}")
    if what == "predict":
        for metric in ("mse", "ssim"):
            write_table(run / f"predict_{metric}.tsv", *pivot(entries, metric), prov)
    elif what == "reach":
        write_table(run / "reach_mse.tsv", *pivot(entries, "mse"), prov)
    elif what == "disentangle":
        write_table(run / "disentangle_score.tsv", *pivot(entries, "score"), prov)
    (run / f"{what}_samples.json").write_text(json.dumps({"provenance": prov, **per_sample}, indent=1) + "\n")
    for p in emit_plots(plots, run / "figures"):
        print(p)
    return run


PLAN_DEFAULTS = {"checkpoint": None, "category": None, "candidates": 10000, "samples": 3, "seed": 0,
                 "instance": 0, "preferred_instance": 1, "preferred_image": None, "out": "runs",
                 "gqn_scoring": "imagine"}


def cmd_plan(values):
    from .dataset import load_image, make_instances
    from .evaluation import HELD_OUT_OFFSET
    from .metrics import mse
    from .planner import PlannerConfig, dump_episode, episode_record, select_action, set_preference
    from .raster import render, to_uint8
    from .scene import ViewpointEnv, camera_radius, sample_viewpoints
    from PIL import Image

    if not values["checkpoint"]:
        raise CliError("plan needs --checkpoint")
    model, meta, cat, digest = _load(values["checkpoint"][0])
    category = values["category"] or cat
    if category not in CATEGORIES:
        raise CliError("cannot tell the category; pass --category")
    run = make_run_dir(values["out"], values["seed"], "plan")
    archive_config(run, "plan", values)
    rng = np.random.default_rng([values["seed"], 5])
    specs = make_instances(category, 1 + max(values["instance"], values["preferred_instance"]), values["seed"],
                           first_instance=HELD_OUT_OFFSET)
    env = ViewpointEnv.reset(specs[values["instance"]], seed=values["seed"])
    start = env.state.viewpoint
    obs = env.observe()
    goal_view = None
    if values["preferred_image"]:
        pref_img = load_image(values["preferred_image"])
        pref_path = Path(values["preferred_image"])
    else:
        goal_view = sample_viewpoints(rng, 1, camera_radius(category))[0]
        pref_img = render(specs[values["preferred_instance"]], goal_view)
        pref_path = run / "preferred.png"
        Image.fromarray(to_uint8(pref_img)).save(pref_path)
    cfg = PlannerConfig(n_candidates=values["candidates"], seed=values["seed"], n_samples=values["samples"],
                        gqn_scoring=values["gqn_scoring"])
    plan = select_action(model, obs, set_preference(model, pref_img), cfg, category=category)
    reached = env.step(plan.action)
    Image.fromarray(to_uint8(obs)).save(run / "start.png")
    Image.fromarray(to_uint8(reached)).save(run / "reached.png")
    rec = episode_record(plan, start, pref_path, cfg)
    rec["checkpoint_sha256"] = digest
    rec["dataset_seed"] = meta.get("dataset_seed")
    if goal_view is not None:
        rec["goal_mse"] = mse(reached, render(env.state.spec, goal_view))
    dump_episode(run / "episode.json", rec)
    print(f"selected candidate {plan.index}; episode record: {run / 'episode.json'}")
    return run


# ---------------------------------------------------------------- argument parsing

def _globals_parser(suppress):
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d)
    g.add_argument("--config", default=d, help="YAML or JSON file with flat key: value pairs")
    g.add_argument("--out", default=d, help="output root (dataset root for generate)")
    g.add_argument("--overwrite", action="store_true", default=d)
    g.add_argument("--verbose", "-v", action="count", default=d)
    return p


def build_parser():
    sup = _globals_parser(True)
    parser = argparse.ArgumentParser(prog="shapepose", description=__doc__.splitlines()[0],
                                     parents=[_globals_parser(False)])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[sup], help="render a multi-view dataset")
    g.add_argument("--category", choices=CATEGORIES)
    g.add_argument("--instances", type=int)
    g.add_argument("--views", type=int)
    g.add_argument("--hemisphere", choices=("upper", "full"))
    g.add_argument("--first-instance", type=int)

    t = sub.add_parser("train", parents=[sup], help="train one model on one category")
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--category", choices=CATEGORIES)
    t.add_argument("--data", help="dataset root (containing <category>/manifest.json)")
    t.add_argument("--tolerance", type=float, help="per-image SSE tolerance (default: category table)")
    t.add_argument("--learning-rate", "--lr", type=float)
    t.add_argument("--multiplier-lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--swap-probability", type=float)
    t.add_argument("--steps-per-epoch", type=int)

    e = sub.add_parser("eval", parents=[sup], help="evaluate checkpoints")
    e.add_argument("what", choices=("predict", "reach", "disentangle", "grid"))
    e.add_argument("--checkpoint", action="append")
    e.add_argument("--category", choices=CATEGORIES)
    e.add_argument("--n", type=int, help="test transitions for predict")
    e.add_argument("--trials", type=int)
    e.add_argument("--candidates", type=int)
    e.add_argument("--sweep", type=int)
    e.add_argument("--n-shapes", type=int)
    e.add_argument("--n-poses", type=int)
    e.add_argument("--test", choices=("welch", "paired", "wilcoxon", "mannwhitney"))
    e.add_argument("--gqn-scoring", choices=("imagine", "pixel"))

    p = sub.add_parser("plan", parents=[sup], help="run one planning episode")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--category", choices=CATEGORIES)
    p.add_argument("--candidates", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--instance", type=int)
    p.add_argument("--preferred-instance", type=int)
    p.add_argument("--preferred-image")
    p.add_argument("--gqn-scoring", choices=("imagine", "pixel"))
    return parser


DEFAULTS = {"generate": GENERATE_DEFAULTS, "train": TRAIN_DEFAULTS, "eval": EVAL_DEFAULTS, "plan": PLAN_DEFAULTS}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    ns = vars(args)
    verbose = ns.pop("verbose", None) or 0
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    command = ns.pop("command")
    what = ns.pop("what", None)
    try:
        file_cfg = load_config_file(ns.pop("config", None))
        values, source = resolve(DEFAULTS[command], file_cfg, ns)
        if isinstance(values.get("checkpoint"), str):
            values["checkpoint"] = [values["checkpoint"]]
        print_config(values, source)
        if command == "generate":
            cmd_generate(values)
        elif command == "train":
            cmd_train(values)
        elif command == "eval":
            cmd_eval(what, values)
        else:
            cmd_plan(values)
    except (CliError, ValueError, FileNotFoundError, FileExistsError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
