"""VAE, GQN and VAEsp generative models.

All three share the convolutional encoder trunk and the upsampling decoder
stack. They differ in their latent heads, in whether a transition network
exists, and in what the decoder is conditioned on:

* ``vae``   -- one 24-d latent, transitioned by actions.
* ``gqn``   -- one 24-d latent, decoder conditioned on the absolute viewpoint.
* ``vaesp`` -- an 8-d pose latent (transitioned) and a 16-d shape latent (static).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .scene import InvalidInput

KINDS = ("vae", "gqn", "vaesp")
LOG_VAR_FLOOR = -30.0

PUBLISHED_PARAMETER_COUNTS = {"vae": 474737, "gqn": 361281, "vaesp": 464449}


class UnsupportedOperation(RuntimeError):
    pass


@dataclass
class GaussianBelief:
    """Diagonal Gaussian; ``mean`` and ``log_var`` share their trailing dimension."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean)
        self.log_var = torch.as_tensor(self.log_var, dtype=self.mean.dtype)
        if self.mean.shape != self.log_var.shape:
            raise InvalidInput(f"mean {tuple(self.mean.shape)} and log_var {tuple(self.log_var.shape)} differ")
        if not torch.isfinite(self.log_var).all():
            raise InvalidInput("log_var must be finite")

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def var(self):
        return self.log_var.exp()

    def sample(self, generator=None):
        return reparam_sample(self, generator)

    def detach(self):
        return GaussianBelief(self.mean.detach(), self.log_var.detach())

    def __getitem__(self, idx):
        return GaussianBelief(self.mean[idx], self.log_var[idx])

    @classmethod
    def cat(cls, beliefs):
        return cls(torch.cat([b.mean for b in beliefs], -1), torch.cat([b.log_var for b in beliefs], -1))


def reparam_sample(belief, generator=None):
    """mean + exp(0.5 * log_var) * eps, eps ~ N(0, I); differentiable in mean and log_var."""
    eps = torch.randn(belief.mean.shape, generator=generator, dtype=belief.mean.dtype, device=belief.mean.device)
    return belief.mean + torch.exp(0.5 * belief.log_var) * eps


class PoseShapeLatent(NamedTuple):
    pose: torch.Tensor
    shape: torch.Tensor


@dataclass
class ArchConfig:
    kind: str = "vaesp"
    image_size: int = 120
    encoder_channels: tuple = (4, 8, 16, 32, 64, 128)
    latent_dim: int = 24
    pose_dim: int = 8
    action_dim: int = 7
    transition_hidden: tuple = (64, 128, 128)
    # outputs of the first five decoder convs; the sixth emits RGB
    decoder_features: tuple = (128, 64, 16, 16, 16)
    # latent-to-spatial bridge; for gqn this is the 128-feature viewpoint-conditioning layer
    bridge_shape: Optional[tuple] = None
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        self.encoder_channels = tuple(self.encoder_channels)
        self.transition_hidden = tuple(self.transition_hidden)
        self.decoder_features = tuple(self.decoder_features)
        if self.bridge_shape is None:
            self.bridge_shape = (self.decoder_features[0], 1, 1) if self.kind == "gqn" else (self.decoder_features[0], 5, 5)
        self.bridge_shape = tuple(self.bridge_shape)

    @property
    def shape_dim(self):
        return self.latent_dim - self.pose_dim

    @property
    def encoder_sizes(self):
        sizes, s = [], self.image_size
        for _ in self.encoder_channels:
            s = (s + 1) // 2  # k=3, stride 2, padding 1
            sizes.append(s)
        return sizes

    @property
    def upsample_sizes(self):
        """Decoder resolutions, mirroring the encoder (4, 8, 15, 30, 60, 120 at full size)."""
        return list(reversed(self.encoder_sizes[:-1])) + [self.image_size]

    @property
    def transitioned_dim(self):
        return self.pose_dim if self.kind == "vaesp" else self.latent_dim

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def reduced_config(kind, image_size=24):
    """Narrow variant used for finite-difference checks."""
    return ArchConfig(kind=kind, image_size=image_size, encoder_channels=(2, 3, 4), transition_hidden=(6, 5, 5),
                      decoder_features=(4, 3), bridge_shape=(4, 1, 1) if kind == "gqn" else (4, 2, 2))


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        layers, c_in = [], 3
        for c in cfg.encoder_channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.LeakyReLU(cfg.leaky_slope)]
            c_in = c
        self.trunk = nn.Sequential(*layers, nn.Flatten())
        flat = c_in * cfg.encoder_sizes[-1] ** 2
        if cfg.kind == "vaesp":
            self.heads = nn.ModuleDict({
                "shape_mean": nn.Linear(flat, cfg.shape_dim),
                "shape_log_var": nn.Linear(flat, cfg.shape_dim),
                "pose_mean": nn.Linear(flat, cfg.pose_dim),
                "pose_log_var": nn.Linear(flat, cfg.pose_dim),
            })
        else:
            self.heads = nn.ModuleDict({"mean": nn.Linear(flat, cfg.latent_dim),
                                        "log_var": nn.Linear(flat, cfg.latent_dim)})

    def forward(self, x):
        h = self.trunk(x)
        return {k: head(h) for k, head in self.heads.items()}


class Transition(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        dims = [cfg.transitioned_dim + cfg.action_dim, *cfg.transition_hidden]
        layers = []
        for a, b in zip(dims, dims[1:]):
            layers += [nn.Linear(a, b), nn.LeakyReLU(cfg.leaky_slope)]
        self.mlp = nn.Sequential(*layers)
        self.mean = nn.Linear(dims[-1], cfg.transitioned_dim)
        self.log_var = nn.Linear(dims[-1], cfg.transitioned_dim)

    def forward(self, z, action):
        h = self.mlp(torch.cat([z, action], -1))
        return GaussianBelief(self.mean(h), self.log_var(h).clamp(min=LOG_VAR_FLOOR))


class Decoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        in_dim = cfg.latent_dim + (cfg.action_dim if cfg.kind == "gqn" else 0)
        self.bridge_shape = cfg.bridge_shape
        self.bridge = nn.Linear(in_dim, int(np.prod(cfg.bridge_shape)))
        self.sizes = cfg.upsample_sizes
        chans = [cfg.bridge_shape[0], *cfg.decoder_features, 3]
        if len(chans) - 1 != len(self.sizes):
            raise InvalidInput(f"{len(chans) - 1} decoder convs but {len(self.sizes)} upsampling stages")
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=1, padding=1) for a, b in zip(chans, chans[1:]))
        self.slope = cfg.leaky_slope

    def forward(self, z):
        h = self.bridge(z).view(-1, *self.bridge_shape)
        last = len(self.convs) - 1
        for i, (conv, size) in enumerate(zip(self.convs, self.sizes)):
            h = F.interpolate(h, size=(size, size), mode="bilinear", align_corners=False)
            h = conv(h)
            h = torch.sigmoid(h) if i == last else F.leaky_relu(h, self.slope)
        return h


def canonical_actions(actions):
    """Flip quaternions to qw >= 0 (q and -q are the same rotation)."""
    a = torch.as_tensor(actions)
    sign = torch.where(a[..., 3:4] < 0, -1.0, 1.0).to(a.dtype)
    return torch.cat([a[..., :3], a[..., 3:] * sign], -1)


class ModelBundle(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.transition_net = None if cfg.kind == "gqn" else Transition(cfg)

    @property
    def kind(self):
        return self.cfg.kind

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def as_batch(self, obs):
        """Accept (H, W, 3) / (N, H, W, 3) arrays or NCHW tensors; return an NCHW tensor."""
        s = self.cfg.image_size
        if isinstance(obs, torch.Tensor) and obs.dim() == 4 and obs.shape[1:] == (3, s, s):
            return obs.to(self.dtype)
        x = torch.as_tensor(np.asarray(obs), dtype=self.dtype)
        if x.dim() == 3:
            x = x[None]
        if x.dim() != 4 or x.shape[1:] != (s, s, 3):
            raise InvalidInput(f"observations must be {s}x{s}x3, got {tuple(x.shape)}")
        return x.permute(0, 3, 1, 2).contiguous()

    def encode(self, obs):
        """Posterior beliefs: a 24-d belief (vae, gqn) or a (pose, shape) pair (vaesp)."""
        out = self.encoder(self.as_batch(obs))
        if self.kind == "vaesp":
            pose = GaussianBelief(out["pose_mean"], out["pose_log_var"].clamp(min=LOG_VAR_FLOOR))
            shape = GaussianBelief(out["shape_mean"], out["shape_log_var"].clamp(min=LOG_VAR_FLOOR))
            return pose, shape
        return GaussianBelief(out["mean"], out["log_var"].clamp(min=LOG_VAR_FLOOR))

    def state_belief(self, obs):
        """Belief over the part of the latent that actions act on (or all of it for gqn)."""
        enc = self.encode(obs)
        return enc[0] if self.kind == "vaesp" else enc

    def transition(self, z, action):
        if self.transition_net is None:
            raise UnsupportedOperation("the gqn model has no transition network")
        z = torch.as_tensor(z, dtype=self.dtype)
        action = canonical_actions(torch.as_tensor(action, dtype=self.dtype))
        if z.shape[-1] != self.cfg.transitioned_dim or action.shape[-1] != self.cfg.action_dim:
            raise InvalidInput(f"transition expects ({self.cfg.transitioned_dim}, {self.cfg.action_dim}) inputs")
        if z.dim() == 2 and action.dim() == 1:
            action = action.expand(z.shape[0], -1)
        if action.dim() == 2 and z.dim() == 1:
            z = z.expand(action.shape[0], -1)
        return self.transition_net(z, action)

    def decode(self, latent, viewpoint=None):
        if isinstance(latent, (tuple, list)):
            pose, shape = (torch.as_tensor(t, dtype=self.dtype) for t in latent)
            if self.kind != "vaesp":
                raise InvalidInput("(pose, shape) latents only apply to vaesp")
            latent = torch.cat([pose, shape], -1)
        z = torch.as_tensor(latent, dtype=self.dtype)
        if z.dim() == 1:
            z = z[None]
        if z.shape[-1] != self.cfg.latent_dim:
            raise InvalidInput(f"decoder expects a {self.cfg.latent_dim}-d latent, got {z.shape[-1]}")
        if self.kind == "gqn":
            if viewpoint is None:
                raise InvalidInput("the gqn decoder needs the absolute viewpoint")
            v = canonical_actions(torch.as_tensor(viewpoint, dtype=self.dtype))
            if v.dim() == 1:
                v = v.expand(z.shape[0], -1)
            z = torch.cat([z, v], -1)
        return self.decoder(z)


def build_model(kind="vaesp", seed=0, dtype=torch.float32, cfg=None, **overrides):
    cfg = cfg or ArchConfig(kind=kind, **overrides)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ModelBundle(cfg)
    return model.to(dtype)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def to_image(x):
    """NCHW tensor -> (N, H, W, 3) float64 array."""
    return x.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float64)


def parameter_count_report():
    rows = []
    for kind in KINDS:
        n = count_parameters(build_model(kind))
        ref = PUBLISHED_PARAMETER_COUNTS[kind]
        rows.append({"kind": kind, "count": n, "published": ref, "rel_error": (n - ref) / ref})
    return rows
