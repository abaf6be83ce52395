"""Constrained free-energy training with shape-latent swapping.

The objective is the KL part of the negative ELBO plus Lagrange-weighted
reconstruction constraints::

    total = sum(KL terms) + sum_c lambda_c * (recon_c - tolerance)

with one constraint for reconstructing ``o_t`` and one for predicting
``o_{t+1}``. The multipliers follow projected dual ascent on an exponential
moving average of each reconstruction term.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .models import GaussianBelief, PoseShapeLatent, build_model
from .scene import CATEGORIES, InvalidInput

log = logging.getLogger(__name__)

# per-image sum of squared errors over 120*120*3 values in [0, 1]
TOLERANCES = {"bottle": 350.0, "bowl": 250.0, "can": 280.0, "mug": 520.0}
CONSTRAINTS = ("reconstruction", "prediction")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, diagnostics=None, last_checkpoint=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainingConfig:
    category: str = "bottle"
    mse_tolerance: Optional[float] = None  # None -> per-category table
    learning_rate: float = 1e-4
    multiplier_lr: float = 1e-2
    batch_size: int = 16  # sequences; consecutive pairs are swap partners
    epochs: int = 50
    swap_probability: float = 0.5
    seed: int = 0
    prior_kl: bool = True
    transition_kl: bool = True
    ema_decay: float = 0.99
    initial_multiplier: float = 1.0
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise InvalidInput(f"unknown category {self.category!r}")
        if self.mse_tolerance is None:
            self.mse_tolerance = TOLERANCES[self.category]
        if not self.mse_tolerance > 0:
            raise InvalidInput("mse_tolerance must be positive")
        if not 0.0 <= self.swap_probability <= 1.0:
            raise InvalidInput("swap_probability must lie in [0, 1]")
        if self.batch_size < 2 or self.batch_size % 2:
            raise InvalidInput("batch_size must be an even number >= 2")


@dataclass
class ConstraintState:
    multipliers: np.ndarray
    ema: Optional[np.ndarray] = None
    updates: int = 0

    @classmethod
    def initial(cls, cfg):
        return cls(np.full(len(CONSTRAINTS), float(cfg.initial_multiplier)))

    def to_dict(self):
        return {"multipliers": self.multipliers.tolist(),
                "ema": None if self.ema is None else self.ema.tolist(), "updates": self.updates}

    @classmethod
    def from_dict(cls, d):
        ema = None if d.get("ema") is None else np.asarray(d["ema"], dtype=np.float64)
        return cls(np.asarray(d["multipliers"], dtype=np.float64), ema, int(d.get("updates", 0)))


@dataclass
class LossReport:
    reconstruction: float  # mean of the constraint terms
    kl_per_dim: np.ndarray  # prior KL per latent element
    lagrange_multipliers: np.ndarray
    total: float
    constraint_values: np.ndarray = field(default_factory=lambda: np.zeros(len(CONSTRAINTS)))
    kl_transition_per_dim: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def record(self):
        return {
            "reconstruction": self.reconstruction,
            **{c: float(v) for c, v in zip(CONSTRAINTS, self.constraint_values)},
            "kl_prior": float(np.sum(self.kl_per_dim)),
            "kl_transition": float(np.sum(self.kl_transition_per_dim)),
            "kl_per_dim": [float(v) for v in self.kl_per_dim],
            "multipliers": [float(v) for v in self.lagrange_multipliers],
            "total": self.total,
        }

    def is_finite(self):
        vals = [self.reconstruction, self.total, *self.kl_per_dim, *self.kl_transition_per_dim]
        return all(math.isfinite(float(v)) for v in vals)


def kl_diag_gaussian(q, p):
    """Elementwise KL(q || p) for diagonal Gaussians; sum over the last axis for the total."""
    if q.dim != p.dim:
        raise InvalidInput(f"dimension mismatch: {q.dim} vs {p.dim}")
    return 0.5 * (p.log_var - q.log_var + (q.var + (q.mean - p.mean) ** 2) / p.var - 1.0)


def kl_to_standard_normal(q):
    return 0.5 * (q.var + q.mean ** 2 - 1.0 - q.log_var)


@dataclass
class TransitionBatch:
    """Length-2 sequences (o_t, a_t, o_{t+1}); sequences 2b and 2b+1 share both views."""

    obs_t: torch.Tensor
    obs_t1: torch.Tensor
    action: torch.Tensor  # absolute target viewpoint of o_{t+1}
    view_t: torch.Tensor
    view_index_t: np.ndarray
    view_index_t1: np.ndarray
    instance: np.ndarray

    @property
    def size(self):
        return self.obs_t.shape[0]

    def pairs(self):
        return np.arange(self.size).reshape(-1, 2)


def make_batch(dataset, instances, views_t, views_t1, dtype=torch.float32):
    """Gather sequences by (instance position, view index) from a MultiViewDataset."""
    imgs = dataset.images

    def nchw(a):
        return torch.as_tensor(np.ascontiguousarray(a.transpose(0, 3, 1, 2)), dtype=dtype)

    vv = torch.as_tensor(dataset.view_vectors, dtype=dtype)
    return TransitionBatch(
        obs_t=nchw(imgs[instances, views_t]),
        obs_t1=nchw(imgs[instances, views_t1]),
        action=vv[views_t1],
        view_t=vv[views_t],
        view_index_t=np.asarray(views_t),
        view_index_t1=np.asarray(views_t1),
        instance=np.asarray(instances),
    )


def sample_batch(dataset, batch_size, rng, dtype=torch.float32):
    n_pairs = batch_size // 2
    n_i, n_v = dataset.n_instances, dataset.n_views
    if n_i < 2:
        raise InvalidInput("swap pairing needs at least two instances")
    inst = np.stack([rng.choice(n_i, 2, replace=False) for _ in range(n_pairs)]).reshape(-1)
    kt = np.repeat(rng.integers(n_v, size=n_pairs), 2)
    kt1 = np.repeat(rng.integers(n_v, size=n_pairs), 2)
    return make_batch(dataset, inst, kt, kt1, dtype)


def apply_swap(latents, pairs, mask):
    """Exchange shape vectors of the masked pairs. Returns (latents, target map)."""
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    mask = np.asarray(mask, dtype=bool)
    target = np.arange(latents.shape.shape[0])
    i, j = pairs[mask, 0], pairs[mask, 1]
    target[i], target[j] = j, i
    perm = torch.as_tensor(target)
    return PoseShapeLatent(latents.pose, latents.shape[perm]), target


def swap_shape_latents(latents, pairs, rng, swap_probability, view_index):
    """Randomly exchange shape latents between paired slots, keeping the poses.

    ``target[k]`` names the slot whose ground-truth image supervises the
    decoding of slot ``k``; valid only because paired slots were rendered
    from the same view.
    """
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    view_index = np.asarray(view_index)
    if np.any(view_index[pairs[:, 0]] != view_index[pairs[:, 1]]):
        raise InvalidInput("swap partners must share the same view index")
    mask = rng.random(len(pairs)) < swap_probability
    swapped, target = apply_swap(latents, pairs, mask)
    return swapped, target, mask


def sse(pred, target):
    """Per-image sum of squared errors."""
    return ((pred - target) ** 2).flatten(1).sum(1)


@dataclass
class ObjectiveTerms:
    total: torch.Tensor
    constraint_values: torch.Tensor  # (n_constraints,)
    kl_prior_per_dim: torch.Tensor
    kl_transition_per_dim: torch.Tensor
    decoded_t: torch.Tensor
    decoded_t1: torch.Tensor
    target_map: np.ndarray
    shape_t: Optional[torch.Tensor] = None
    shape_t1: Optional[torch.Tensor] = None


def objective(model, batch, cfg, multipliers, generator=None, swap_rng=None):
    """Differentiable training objective for one batch."""
    kind = model.kind
    dtype = model.dtype
    lam = torch.as_tensor(np.asarray(multipliers), dtype=dtype)
    obs_t, obs_t1 = batch.obs_t.to(dtype), batch.obs_t1.to(dtype)
    action, view_t = batch.action.to(dtype), batch.view_t.to(dtype)
    target = np.arange(batch.size)
    zero = obs_t.new_zeros(0)
    shape_t = shape_t1 = None

    if kind == "gqn":
        q = model.encode(obs_t)
        z = q.sample(generator)
        dec_t = model.decode(z, view_t)
        dec_t1 = model.decode(z, action)
        kl_prior = kl_to_standard_normal(q).mean(0)
        kl_trans = zero
    elif kind == "vae":
        q_t, q_t1 = model.encode(obs_t), model.encode(obs_t1)
        z_t = q_t.sample(generator)
        p_t1 = model.transition(z_t, action)
        z_t1 = p_t1.sample(generator)
        dec_t, dec_t1 = model.decode(z_t), model.decode(z_t1)
        kl_prior = 0.5 * (kl_to_standard_normal(q_t) + kl_to_standard_normal(q_t1)).mean(0)
        kl_trans = kl_diag_gaussian(q_t1, p_t1).mean(0)
    else:
        pose_t, shape_b = model.encode(obs_t)
        pose_t1, _ = model.encode(obs_t1)
        p_t = pose_t.sample(generator)
        s = shape_b.sample(generator)
        lat = PoseShapeLatent(p_t, s)
        if cfg.swap_probability > 0:
            if swap_rng is None:
                raise InvalidInput("swap_rng is required when swap_probability > 0")
            lat, target, _ = swap_shape_latents(lat, batch.pairs(), swap_rng, cfg.swap_probability, batch.view_index_t)
        p_t1 = model.transition(p_t, action)
        z_t1 = p_t1.sample(generator)
        # one shape sample serves both time steps
        shape_t = shape_t1 = lat.shape
        dec_t = model.decode((lat.pose, shape_t))
        dec_t1 = model.decode((z_t1, shape_t1))
        kl_pose = 0.5 * (kl_to_standard_normal(pose_t) + kl_to_standard_normal(pose_t1)).mean(0)
        kl_prior = torch.cat([kl_pose, kl_to_standard_normal(shape_b).mean(0)])
        kl_trans = kl_diag_gaussian(pose_t1, p_t1).mean(0)

    tgt = torch.as_tensor(target)
    recon = torch.stack([sse(dec_t, obs_t[tgt]).mean(), sse(dec_t1, obs_t1[tgt]).mean()])
    total = (lam * (recon - cfg.mse_tolerance)).sum()
    if cfg.prior_kl:
        total = total + kl_prior.sum()
    if cfg.transition_kl and kl_trans.numel():
        total = total + kl_trans.sum()
    return ObjectiveTerms(total, recon, kl_prior, kl_trans, dec_t, dec_t1, target, shape_t, shape_t1)


def constrained_update(report, state, cfg):
    """Projected dual ascent on the EMA of each reconstruction constraint.

    The violation is measured relative to the tolerance so ``multiplier_lr``
    does not depend on image size.
    """
    values = np.asarray(report.constraint_values, dtype=np.float64)
    ema = values.copy() if state.ema is None else cfg.ema_decay * state.ema + (1 - cfg.ema_decay) * values
    violation = (ema - cfg.mse_tolerance) / cfg.mse_tolerance
    mult = np.maximum(state.multipliers + cfg.multiplier_lr * violation, 0.0)
    return ConstraintState(mult, ema, state.updates + 1)


def report_from_terms(terms, state):
    cv = terms.constraint_values.detach().cpu().numpy().astype(np.float64)
    return LossReport(
        reconstruction=float(cv.mean()),
        kl_per_dim=terms.kl_prior_per_dim.detach().cpu().numpy().astype(np.float64),
        lagrange_multipliers=state.multipliers.copy(),
        total=float(terms.total.detach()),
        constraint_values=cv,
        kl_transition_per_dim=terms.kl_transition_per_dim.detach().cpu().numpy().astype(np.float64),
    )


def free_energy_step(model, optimizer, batch, cfg, state, generator=None, swap_rng=None):
    """One gradient update followed by one multiplier update. Returns (report, new state)."""
    model.train()
    optimizer.zero_grad()
    terms = objective(model, batch, cfg, state.multipliers, generator, swap_rng)
    report = report_from_terms(terms, state)
    if not report.is_finite():
        raise TrainingDiverged("non-finite loss", diagnostics=report.record())
    terms.total.backward()
    optimizer.step()
    return report, constrained_update(report, state, cfg)


@dataclass
class TrainResult:
    model: object
    state: ConstraintState
    records: list
    checkpoints: list
    converged: bool
    final_constraints: list


def train(model_kind, dataset, cfg, run_dir=None, model=None, checkpoint_every=1, progress=None):
    """Train one model on one category. Writes metrics.jsonl and checkpoints when run_dir is given."""
    from .checkpoint import save_checkpoint

    torch.manual_seed(cfg.seed)
    model = model or build_model(model_kind, seed=cfg.seed)
    if model.kind != model_kind:
        raise InvalidInput(f"model kind {model.kind} does not match {model_kind}")
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    state = ConstraintState.initial(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    data_rng = np.random.default_rng([cfg.seed, 1])
    swap_rng = np.random.default_rng([cfg.seed, 2])
    steps = cfg.steps_per_epoch or max(1, dataset.n_instances * dataset.n_views // cfg.batch_size)

    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "metrics.jsonl", "w")
    records, checkpoints, epoch_recon = [], [], None
    last_good = None
    try:
        for epoch in range(cfg.epochs):
            sums = np.zeros(len(CONSTRAINTS))
            for _ in range(steps):
                batch = sample_batch(dataset, cfg.batch_size, data_rng)
                try:
                    report, state = free_energy_step(model, optimizer, batch, cfg, state, gen, swap_rng)
                except TrainingDiverged as err:
                    err.last_checkpoint = last_good
                    if run_dir is not None:
                        (run_dir / "diverged.json").write_text(json.dumps(err.diagnostics, indent=1))
                    raise
                sums += report.constraint_values
                rec = {"step": len(records), "epoch": epoch, "seed": cfg.seed, **report.record(),
                       "constraint_ema": state.ema.tolist(), "multipliers_next": state.multipliers.tolist()}
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
            epoch_recon = sums / steps
            if progress:
                progress(epoch, epoch_recon, state)
            log.info("epoch %d recon=%s multipliers=%s", epoch, np.round(epoch_recon, 1), np.round(state.multipliers, 3))
            if run_dir is not None and ((epoch + 1) % checkpoint_every == 0 or epoch + 1 == cfg.epochs):
                path = run_dir / f"checkpoint_epoch{epoch + 1:03d}.zip"
                save_checkpoint(path, model, {"seed": cfg.seed, "epoch": epoch + 1, "constraints": state.to_dict(),
                                              "model": model_kind, "dataset_seed": getattr(dataset, "seed", None),
                                              "training_config": asdict(cfg)})
                checkpoints.append(path)
                last_good = path
    finally:
        if log_file:
            log_file.close()
    converged = bool(epoch_recon is not None and np.all(epoch_recon < cfg.mse_tolerance))
    result = TrainResult(model, state, records, checkpoints, converged,
                         [] if epoch_recon is None else epoch_recon.tolist())
    if run_dir is not None:
        summary = {"converged": converged, "final_epoch_constraints": result.final_constraints,
                   "tolerance": cfg.mse_tolerance, "multipliers": state.multipliers.tolist(),
                   "checkpoints": [p.name for p in checkpoints]}
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return result
