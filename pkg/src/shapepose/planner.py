"""Expected-free-energy action selection towards a preferred observation.

A candidate action is scored by the negative log density of the predicted
next latent under the belief obtained by encoding the preferred image,
averaged over a few Monte-Carlo latent samples. The lowest score wins.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .models import GaussianBelief, LOG_VAR_FLOOR
from .scene import Action, CameraViewpoint, InvalidInput, camera_radius, sample_viewpoints

LOG_2PI = math.log(2 * math.pi)


@dataclass
class PlannerConfig:
    n_candidates: int = 10000
    seed: int = 0
    n_samples: int = 3
    hemisphere: str = "upper"
    # how gqn (no transition network) scores a viewpoint: "imagine" re-encodes the
    # decoder's render at the candidate viewpoint; "pixel" compares that render to the
    # preferred image directly
    gqn_scoring: str = "imagine"
    chunk: int = 2500

    def __post_init__(self):
        if self.n_candidates < 1:
            raise InvalidInput("n_candidates must be >= 1")
        if self.gqn_scoring not in ("imagine", "pixel"):
            raise InvalidInput(f"unknown gqn_scoring {self.gqn_scoring!r}")


@dataclass
class PreferredState:
    belief: GaussianBelief
    image: Optional[np.ndarray] = None


def gaussian_nll(x, belief):
    """0.5 * sum_d [log 2pi + log_var_d + (x_d - mean_d)^2 / exp(log_var_d)] over the last axis."""
    as_numpy = not isinstance(x, torch.Tensor)
    mean, log_var = belief.mean, belief.log_var
    xt = torch.as_tensor(x, dtype=mean.dtype)
    if xt.shape[-1] != mean.shape[-1]:
        raise InvalidInput(f"dimension mismatch: {xt.shape[-1]} vs {mean.shape[-1]}")
    nll = 0.5 * (LOG_2PI + log_var + (xt - mean) ** 2 / torch.exp(log_var)).sum(-1)
    if as_numpy:
        nll = nll.detach().cpu().numpy()
        return float(nll) if nll.ndim == 0 else nll
    return nll


@torch.no_grad()
def set_preference(model, preferred_obs):
    belief = model.state_belief(preferred_obs)
    belief = GaussianBelief(belief.mean[0], belief.log_var[0]) if belief.mean.dim() == 2 else belief
    return PreferredState(belief, np.asarray(preferred_obs))


def _torch_generator(rng):
    if isinstance(rng, torch.Generator):
        return rng
    seed = int(rng.integers(2**62)) if isinstance(rng, np.random.Generator) else int(rng)
    return torch.Generator().manual_seed(seed)


@torch.no_grad()
def efe_scores(model, current_obs, actions, pref, rng=0, n_samples=3, gqn_scoring="imagine", chunk=2500):
    """Scores for a batch of candidate actions (N, action_dim), in candidate order."""
    gen = _torch_generator(rng)
    actions = torch.as_tensor(np.asarray(actions), dtype=pref.belief.mean.dtype)
    if actions.dim() == 1:
        actions = actions[None]
    state = model.state_belief(current_obs)
    out = []
    for start in range(0, actions.shape[0], chunk):
        a = actions[start:start + chunk]
        total = torch.zeros(a.shape[0], dtype=a.dtype)
        for _ in range(n_samples):
            z = state.sample(gen).reshape(1, -1).expand(a.shape[0], -1)
            if getattr(model, "kind", None) == "gqn":
                imagined = model.decode(z, a)
                if gqn_scoring == "pixel":
                    target = model.as_batch(pref.image)
                    total += ((imagined - target) ** 2).flatten(1).sum(1)
                    continue
                nxt = model.state_belief(imagined)
            else:
                nxt = model.transition(z, a)
            total += gaussian_nll(nxt.sample(gen), pref.belief)
        out.append(total / n_samples)
    return torch.cat(out).cpu().numpy().astype(np.float64)


def efe_score(model, current_obs, action, pref, rng=0, n_samples=3, gqn_scoring="imagine"):
    vec = action.to_vector() if isinstance(action, Action) else np.asarray(action)
    return float(efe_scores(model, current_obs, vec[None], pref, rng, n_samples, gqn_scoring)[0])


@dataclass
class Plan:
    index: int
    action: object  # Action for viewpoint candidates, raw vector otherwise
    scores: np.ndarray
    candidates: np.ndarray

    def top(self, k=10):
        order = np.argsort(self.scores, kind="stable")[:k]
        return [(int(i), float(self.scores[i])) for i in order]


def sample_candidates(category, cfg):
    rng = np.random.default_rng([cfg.seed, 31])
    vps = sample_viewpoints(rng, cfg.n_candidates, camera_radius(category), cfg.hemisphere)
    return np.stack([vp.to_vector() for vp in vps])


def select_action(model, current_obs, pref, cfg, category=None, candidates=None):
    """Score candidates and return the argmin (ties go to the lowest index)."""
    if candidates is None:
        if category is None:
            raise InvalidInput("either candidates or a category (for the view sphere) is required")
        candidates = sample_candidates(category, cfg)
    candidates = np.asarray(candidates, dtype=np.float64)
    rng = np.random.default_rng([cfg.seed, 37])
    scores = efe_scores(model, current_obs, candidates, pref, rng, cfg.n_samples, cfg.gqn_scoring, cfg.chunk)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite expected free energy")
    idx = int(np.argmin(scores))
    best = candidates[idx]
    action = Action(CameraViewpoint(best[:3].copy(), best[3:].copy())) if best.shape == (7,) else best
    return Plan(idx, action, scores, candidates)


def episode_record(plan, initial_viewpoint, preferred_image_path, cfg):
    return {
        "initial_viewpoint": [float(x) for x in initial_viewpoint.to_vector()],
        "preferred_image": str(preferred_image_path),
        "n_candidates": int(len(plan.candidates)),
        "selected_index": plan.index,
        "selected_action": [float(x) for x in np.asarray(plan.candidates[plan.index])],
        "top10": [{"index": i, "score": s} for i, s in plan.top(10)],
        "seed": cfg.seed,
    }


class LinearGaussianToy:
    """Hand-built linear-Gaussian world model: z' ~ N(A z + B a, exp(log_var))."""

    kind = "toy"

    def __init__(self, A, B, log_var=-12.0, obs_log_var=LOG_VAR_FLOOR):
        self.A = torch.as_tensor(A, dtype=torch.float64)
        self.B = torch.as_tensor(B, dtype=torch.float64)
        self.log_var = float(log_var)
        self.obs_log_var = float(obs_log_var)

    def state_belief(self, obs):
        m = torch.as_tensor(np.asarray(obs), dtype=torch.float64).reshape(1, -1)
        return GaussianBelief(m, torch.full_like(m, self.obs_log_var))

    def transition(self, z, actions):
        z = torch.as_tensor(z, dtype=torch.float64)
        a = torch.as_tensor(actions, dtype=torch.float64)
        mean = z @ self.A.T + a @ self.B.T
        return GaussianBelief(mean, torch.full_like(mean, self.log_var))

    def expected_nll(self, obs, actions, pref):
        """Closed-form E[NLL] of the predicted latent under the preference."""
        b = self.transition(self.state_belief(obs).mean, actions)
        pm, plv = pref.belief.mean, pref.belief.log_var
        val = 0.5 * (LOG_2PI + plv + ((b.mean - pm) ** 2 + b.var) / torch.exp(plv)).sum(-1)
        return val.numpy()


def dump_episode(path, record):
    with open(path, "w") as f:
        json.dump(record, f, indent=1)
