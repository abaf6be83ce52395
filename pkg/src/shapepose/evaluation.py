"""One-step prediction, preferred-viewpoint reaching, disentanglement profiling and recombination grids."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import torch

from . import planner as pl
from .dataset import make_instances
from .metrics import MetricSummary, mse, significance, ssim
from .models import ModelBundle, UnsupportedOperation, to_image
from .raster import BACKGROUND, IMAGE_SIZE, render
from .scene import (Action, CameraViewpoint, InvalidInput, camera_radius, sample_object, sample_viewpoints)

# instance ids at or above this offset never appear in generated training sets
HELD_OUT_OFFSET = 100_000


def held_out_specs(category, n, seed, offset=HELD_OUT_OFFSET):
    return make_instances(category, n, seed, first_instance=offset)


@dataclass
class TestTransitions:
    obs_t: np.ndarray  # (N, H, W, 3)
    obs_t1: np.ndarray
    action: np.ndarray  # (N, 7) absolute target viewpoints
    view_t: np.ndarray

    def __len__(self):
        return len(self.obs_t)


def render_test_transitions(category, n, seed, n_instances=10, hemisphere="upper"):
    """Unseen instances in unseen poses, rendered on the fly."""
    specs = held_out_specs(category, n_instances, seed)
    rng = np.random.default_rng([seed, 101])
    radius = camera_radius(category)
    obs_t, obs_t1, act, vt = [], [], [], []
    for k in range(n):
        spec = specs[k % n_instances]
        v0, v1 = sample_viewpoints(rng, 2, radius, hemisphere)
        obs_t.append(render(spec, v0))
        obs_t1.append(render(spec, v1))
        act.append(v1.to_vector())
        vt.append(v0.to_vector())
    return TestTransitions(np.stack(obs_t), np.stack(obs_t1), np.stack(act), np.stack(vt))


def transitions_from_dataset(dataset, n, seed):
    rng = np.random.default_rng([seed, 103])
    i = rng.integers(dataset.n_instances, size=n)
    k0 = rng.integers(dataset.n_views, size=n)
    k1 = rng.integers(dataset.n_views, size=n)
    imgs = dataset.images
    return TestTransitions(imgs[i, k0].astype(np.float64), imgs[i, k1].astype(np.float64),
                           dataset.view_vectors[k1], dataset.view_vectors[k0])


@torch.no_grad()
def predict_next(model, obs_t, action, view_t=None):
    """Decode the predicted next observation from posterior and transition means."""
    if hasattr(model, "predict_next"):
        return model.predict_next(obs_t, action, view_t)
    model.eval()
    a = torch.as_tensor(np.asarray(action), dtype=model.dtype)
    if model.kind == "gqn":
        q = model.encode(obs_t)
        return to_image(model.decode(q.mean, a))
    if model.kind == "vae":
        q = model.encode(obs_t)
        return to_image(model.decode(model.transition(q.mean, a).mean))
    pose, shape = model.encode(obs_t)
    return to_image(model.decode((model.transition(pose.mean, a).mean, shape.mean)))


@dataclass
class OneStepResult:
    mse: MetricSummary
    ssim: MetricSummary
    examples: dict = field(default_factory=dict)


def eval_one_step(model, test_set, batch=50, n_examples=6):
    """Per-sample MSE and SSIM between predicted and true next observations."""
    errs, sims, preds = [], [], []
    for s in range(0, len(test_set), batch):
        sl = slice(s, s + batch)
        pred = predict_next(model, test_set.obs_t[sl], test_set.action[sl], test_set.view_t[sl])
        for p, g in zip(pred, test_set.obs_t1[sl]):
            errs.append(mse(p, g))
            sims.append(ssim(p, g))
        if len(preds) < n_examples:
            preds.extend(pred[: n_examples - len(preds)])
    k = len(preds)
    examples = {"input": test_set.obs_t[:k], "prediction": np.stack(preds) if k else preds,
                "target": test_set.obs_t1[:k]}
    return OneStepResult(MetricSummary.from_samples(errs), MetricSummary.from_samples(sims), examples)


@dataclass
class ReachTrial:
    spec: object
    start: CameraViewpoint
    pref_spec: object
    pref_view: CameraViewpoint


@dataclass
class ReachResult:
    planner: MetricSummary
    random: MetricSummary
    p_value: float
    test: str
    records: list


def make_reach_trials(category, n_trials, seed, hemisphere="upper"):
    """Each trial: a held-out object, a start view, and a preferred view shown on a different object."""
    specs = held_out_specs(category, n_trials + 1, seed)
    radius = camera_radius(category)
    trials = []
    for t in range(n_trials):
        rng = np.random.default_rng([seed, 211, t])
        start, pref_view = sample_viewpoints(rng, 2, radius, hemisphere)
        # the preferred image always shows a different instance
        trials.append(ReachTrial(specs[t], start, specs[t + 1], pref_view))
    return trials


def run_reach_trial(trial, choose):
    """Execute one action chosen by ``choose(obs, preferred_obs) -> Action``; return pixel MSE to the goal."""
    obs = render(trial.spec, trial.start)
    pref_obs = render(trial.pref_spec, trial.pref_view)
    action = choose(obs, pref_obs)
    target = action.target if isinstance(action, Action) else action
    reached = render(trial.spec, target)
    goal = render(trial.spec, trial.pref_view)
    return mse(reached, goal), action


def planner_chooser(model, category, cfg, candidates=None):
    def choose(obs, pref_obs):
        pref = pl.set_preference(model, pref_obs)
        return pl.select_action(model, obs, pref, cfg, category=category, candidates=candidates).action

    return choose


def random_chooser(category, seed, hemisphere="upper"):
    rng = np.random.default_rng([seed, 307])

    def choose(obs, pref_obs):
        return Action(sample_viewpoints(rng, 1, camera_radius(category), hemisphere)[0])

    return choose


def eval_reach(model, category, n_trials=50, cfg=None, seed=0, test="paired"):
    """Planner vs uniform-random baseline on identical (object, start, preference) triples."""
    cfg = cfg or pl.PlannerConfig()
    trials = make_reach_trials(category, n_trials, seed, cfg.hemisphere)
    rand = random_chooser(category, seed, cfg.hemisphere)
    plan_err, rand_err, records = [], [], []
    for t, trial in enumerate(trials):
        choose = planner_chooser(model, category, replace(cfg, seed=cfg.seed * 100_003 + t))
        e_plan, a_plan = run_reach_trial(trial, choose)
        e_rand, a_rand = run_reach_trial(trial, rand)
        plan_err.append(e_plan)
        rand_err.append(e_rand)
        records.append({"trial": t, "instance": trial.spec.instance_id, "pref_instance": trial.pref_spec.instance_id,
                        "planner_mse": e_plan, "random_mse": e_rand,
                        "planner_action": a_plan.to_vector().tolist(), "random_action": a_rand.to_vector().tolist()})
    p = significance(plan_err, rand_err, test=test)
    return ReachResult(MetricSummary.from_samples(plan_err), MetricSummary.from_samples(rand_err), p, test, records)


@dataclass
class SweepSet:
    """Fixed-shape pose sweep and fixed-pose shape sweep for one category."""

    pose_images: np.ndarray  # one object, many viewpoints
    shape_images: np.ndarray  # many objects, one viewpoint
    pose_views: np.ndarray  # (n, 7)
    shape_factors: list  # per object ground-truth shape parameters
    fixed_view: np.ndarray
    fixed_instance: int

    @property
    def n_sweep(self):
        return len(self.pose_images)


def make_sweeps(category, n_sweep=50, seed=0, hemisphere="upper"):
    specs = held_out_specs(category, n_sweep, seed, offset=HELD_OUT_OFFSET * 2)
    rng = np.random.default_rng([seed, 401])
    radius = camera_radius(category)
    views = sample_viewpoints(rng, n_sweep, radius, hemisphere)
    fixed_view = sample_viewpoints(rng, 1, radius, hemisphere)[0]
    fixed = specs[0]
    pose_images = np.stack([render(fixed, v) for v in views])
    shape_images = np.stack([render(s, fixed_view) for s in specs])
    return SweepSet(pose_images, shape_images, np.stack([v.to_vector() for v in views]),
                    [s.shape_factors() for s in specs], fixed_view.to_vector(), fixed.instance_id)


class SweepError(InvalidInput):
    """The data cannot provide a fixed-shape pose sweep and a fixed-pose shape sweep."""


def sweeps_from_dataset(dataset, n_sweep=50, instance=0, view=0):
    """Pose sweep over the first n_sweep views of one instance; shape sweep over instances at one view."""
    if dataset.n_views < n_sweep or dataset.n_instances < 2:
        raise SweepError(f"need >= {n_sweep} views and >= 2 instances, have {dataset.n_views} x {dataset.n_instances}")
    n_shape = min(n_sweep, dataset.n_instances)
    imgs = dataset.images
    return SweepSet(imgs[instance, :n_sweep].astype(np.float64), imgs[:n_shape, view].astype(np.float64),
                    dataset.view_vectors[:n_sweep], [s.shape_factors() if s else None for s in dataset.specs[:n_shape]],
                    dataset.view_vectors[view], dataset.instance_ids[instance])


@dataclass
class DisentanglementProfile:
    per_dim_fixed_shape: np.ndarray  # (n_pose_sweep, 24): latent values while only the pose varies
    per_dim_fixed_pose: np.ndarray  # (n_shape_sweep, 24): latent values while only the shape varies
    score: float
    pose_dims: int = 8

    @property
    def sweep_sizes(self):
        return len(self.per_dim_fixed_shape), len(self.per_dim_fixed_pose)


@torch.no_grad()
def latent_codes(model, images, batch=50):
    """Posterior means; vaesp codes are laid out [pose (0-7) | shape (8-23)]."""
    model.eval()
    out = []
    for s in range(0, len(images), batch):
        enc = model.encode(images[s:s + batch])
        if isinstance(enc, tuple):
            out.append(torch.cat([enc[0].mean, enc[1].mean], -1))
        else:
            out.append(enc.mean)
    return torch.cat(out).double().numpy()


def disentanglement_score(codes_fixed_shape, codes_fixed_pose, pose_dims=8):
    """0.5 * (mean pose-dim share of pose variance + mean shape-dim share of shape variance)."""
    v_pose = np.var(codes_fixed_shape, axis=0)
    v_shape = np.var(codes_fixed_pose, axis=0)
    tot = v_pose + v_shape
    safe = np.where(tot > 0, tot, 1.0)
    share_pose = np.where(tot > 0, v_pose / safe, 0.5)
    share_shape = np.where(tot > 0, v_shape / safe, 0.5)
    return float(0.5 * (share_pose[:pose_dims].mean() + share_shape[pose_dims:].mean()))


def profile_from_codes(codes_fixed_shape, codes_fixed_pose, pose_dims=8):
    a = np.asarray(codes_fixed_shape, dtype=np.float64)
    b = np.asarray(codes_fixed_pose, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise InvalidInput("both sweeps must be encoded to the same latent size")
    return DisentanglementProfile(a, b, disentanglement_score(a, b, pose_dims), pose_dims)


def disentanglement_profile(model, sweeps, n_sweep=50, seed=0, pose_dims=8):
    """``sweeps``: a SweepSet, a category name (rendered sweeps) or a MultiViewDataset."""
    if isinstance(sweeps, str):
        sweeps = make_sweeps(sweeps, n_sweep, seed)
    elif not isinstance(sweeps, SweepSet):
        sweeps = sweeps_from_dataset(sweeps, n_sweep)
    if len(sweeps.pose_images) < 2 or len(sweeps.shape_images) < 2:
        raise SweepError("sweeps need at least two renders each")
    return profile_from_codes(latent_codes(model, sweeps.pose_images), latent_codes(model, sweeps.shape_images), pose_dims)


@dataclass
class RecombinationGrid:
    cells: np.ndarray  # (S + 1, P + 1, H, W, 3); row 0 = pose sources, column 0 = shape sources

    @property
    def shape(self):
        return self.cells.shape[:2]

    def montage(self, pad=2):
        rows, cols, h, w, _ = self.cells.shape
        out = np.ones((rows * (h + pad) - pad, cols * (w + pad) - pad, 3))
        for i in range(rows):
            for j in range(cols):
                out[i * (h + pad):i * (h + pad) + h, j * (w + pad):j * (w + pad) + w] = self.cells[i, j]
        return out


@torch.no_grad()
def recombination_grid(model, shape_sources, pose_sources):
    """Cell (i, j) decodes the pose of pose source j with the shape of shape source i."""
    if getattr(model, "kind", None) != "vaesp":
        raise UnsupportedOperation("recombination needs separate pose and shape latents (vaesp)")
    model.eval()
    shape_sources = np.asarray(shape_sources, dtype=np.float64)
    pose_sources = np.asarray(pose_sources, dtype=np.float64)
    _, shapes = model.encode(shape_sources)
    poses, _ = model.encode(pose_sources)
    n_s, n_p = len(shape_sources), len(pose_sources)
    pose = poses.mean.repeat(n_s, 1)
    shape = shapes.mean.repeat_interleave(n_p, 0)
    decoded = to_image(model.decode((pose, shape))).reshape(n_s, n_p, IMAGE_SIZE, IMAGE_SIZE, 3)
    cells = np.full((n_s + 1, n_p + 1, IMAGE_SIZE, IMAGE_SIZE, 3), BACKGROUND)
    cells[0, 1:] = pose_sources
    cells[1:, 0] = shape_sources
    cells[1:, 1:] = decoded
    return RecombinationGrid(cells)


@torch.no_grad()
def reconstruct(model, obs):
    model.eval()
    enc = model.encode(obs)
    if model.kind == "vaesp":
        return to_image(model.decode((enc[0].mean, enc[1].mean)))
    if model.kind == "gqn":
        raise UnsupportedOperation("gqn reconstruction needs a viewpoint; use predict_next")
    return to_image(model.decode(enc.mean))
