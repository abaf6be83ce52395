"""Procedural objects, camera viewpoints and the viewpoint-manipulation environment."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import geometry

CATEGORIES = ("bottle", "bowl", "can", "mug")

# object height in world units; the camera sphere radius is RADIUS_IN_HEIGHTS heights
CATEGORY_HEIGHT = {"bottle": 1.0, "bowl": 0.7, "can": 0.8, "mug": 0.9}
# bowls and mugs are open at the top so the inside is visible
CATEGORY_TOP_CAP = {"bottle": True, "bowl": False, "can": True, "mug": False}
RADIUS_IN_HEIGHTS = 2.5


class InvalidInput(ValueError):
    """Raised for arguments that violate a documented precondition."""


def check_category(category):
    if category not in CATEGORIES:
        raise InvalidInput(f"unknown category {category!r}; expected one of {CATEGORIES}")
    return category


def camera_radius(category):
    return RADIUS_IN_HEIGHTS * CATEGORY_HEIGHT[check_category(category)]


@dataclass(frozen=True)
class Handle:
    """Torus segment attached to the +x side of a mug body."""

    center_frac: float  # height fraction of the torus center
    major_radius: float
    minor_radius: float
    span: float  # angular extent of the arc in radians


@dataclass(frozen=True)
class ObjectSpec:
    category: str
    profile: tuple  # ((height_fraction, radius), ...)
    albedo: tuple
    instance_id: int = 0
    handle: Optional[Handle] = None

    def __post_init__(self):
        check_category(self.category)
        prof = np.asarray(self.profile, dtype=np.float64)
        if prof.ndim != 2 or prof.shape[1] != 2 or len(prof) < 2:
            raise InvalidInput("profile needs at least two (height_fraction, radius) points")
        h, r = prof[:, 0], prof[:, 1]
        if np.any(r <= 0):
            raise InvalidInput("profile radii must be positive")
        if np.any(np.diff(h) <= 0) or h[0] < 0 or h[-1] > 1:
            raise InvalidInput("height fractions must be strictly increasing in [0, 1]")
        if (self.handle is not None) != (self.category == "mug"):
            raise InvalidInput("a handle is present iff the category is mug")
        if len(self.albedo) != 3 or not all(0.0 <= c <= 1.0 for c in self.albedo):
            raise InvalidInput("albedo must be an RGB triple in [0, 1]")

    @property
    def height(self):
        return CATEGORY_HEIGHT[self.category]

    def to_dict(self):
        d = {
            "category": self.category,
            "instance_id": int(self.instance_id),
            "profile": [[float(a), float(b)] for a, b in self.profile],
            "albedo": [float(c) for c in self.albedo],
            "handle": None,
        }
        if self.handle is not None:
            d["handle"] = {k: float(v) for k, v in vars(self.handle).items()}
        return d

    @classmethod
    def from_dict(cls, d):
        handle = Handle(**d["handle"]) if d.get("handle") else None
        return cls(
            category=d["category"],
            profile=tuple(tuple(p) for p in d["profile"]),
            albedo=tuple(d["albedo"]),
            instance_id=int(d["instance_id"]),
            handle=handle,
        )

    def shape_factors(self):
        """Flat vector of the generative shape parameters (ground truth for disentanglement checks)."""
        prof = np.asarray(self.profile, dtype=np.float64)
        parts = [prof[:, 1], prof[1:-1, 0], np.asarray(self.albedo)]
        if self.handle is not None:
            parts.append(np.array(list(vars(self.handle).values())))
        return np.concatenate(parts)


def _random_albedo(rng):
    # saturated colours so the object never blends into the grey background
    h = rng.uniform(0.0, 1.0)
    s = rng.uniform(0.55, 0.9)
    v = rng.uniform(0.65, 0.95)
    return tuple(float(c) for c in colorsys.hsv_to_rgb(h, s, v))


def _profile(category, rng):
    u = rng.uniform
    if category == "can":
        r = u(0.2, 0.3)
        lip = u(0.85, 0.95)
        return ((0.0, r * lip), (0.04, r), (0.96, r), (1.0, r * lip))
    if category == "bottle":
        rb = u(0.17, 0.26)
        rn = u(0.05, 0.08)
        sh = u(0.45, 0.65)
        neck = u(sh + 0.15, 0.9)
        return ((0.0, rb * 0.95), (0.03, rb), (sh, rb), ((sh + neck) / 2, u(0.5, 0.7) * rb + 0.3 * rn),
                (neck, rn), (1.0, rn * u(1.0, 1.25)))
    if category == "bowl":
        foot = u(0.1, 0.18)
        rim = u(0.34, 0.42)
        belly = u(0.55, 0.8)
        return ((0.0, foot), (0.15, foot + 0.3 * (rim - foot) * belly), (0.5, foot + (rim - foot) * (0.5 + 0.4 * belly)),
                (0.8, rim * u(0.93, 0.99)), (1.0, rim))
    if category == "mug":
        r0 = u(0.17, 0.24)
        taper = u(0.9, 1.15)
        return ((0.0, r0), (0.5, r0 * (1 + taper) / 2), (1.0, r0 * taper))
    raise InvalidInput(category)


def sample_object(category, rng, instance_id=0):
    """Draw a random object of a category; same generator state gives the same spec."""
    check_category(category)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    profile = _profile(category, rng)
    albedo = _random_albedo(rng)
    handle = None
    if category == "mug":
        handle = Handle(
            center_frac=float(rng.uniform(0.45, 0.55)),
            major_radius=float(rng.uniform(0.1, 0.13)),
            minor_radius=float(rng.uniform(0.025, 0.04)),
            span=float(np.pi),
        )
    profile = tuple((float(h), float(r)) for h, r in profile)
    return ObjectSpec(category, profile, albedo, int(instance_id), handle)


@dataclass(frozen=True)
class CameraViewpoint:
    position: np.ndarray
    orientation: np.ndarray  # (w, x, y, z)

    @classmethod
    def from_position(cls, position):
        position = np.asarray(position, dtype=np.float64)
        return cls(position, geometry.look_at(position))

    @classmethod
    def from_vector(cls, vec, radius=None):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (7,):
            raise InvalidInput(f"viewpoint vectors have 7 entries, got shape {vec.shape}")
        vp = cls(vec[:3].copy(), vec[3:].copy())
        vp.validate(radius)
        return vp

    def to_vector(self):
        return np.concatenate([self.position, self.orientation])

    @property
    def radius(self):
        return float(np.linalg.norm(self.position))

    def validate(self, radius=None, tol=1e-6):
        q = np.asarray(self.orientation)
        if not np.all(np.isfinite(q)) or abs(np.linalg.norm(q) - 1.0) > tol:
            raise InvalidInput("viewpoint orientation must be a unit quaternion")
        if radius is not None and abs(self.radius - radius) > tol:
            raise InvalidInput(f"viewpoint must lie on the sphere of radius {radius}")
        if geometry.alignment_error(self.position, q) > tol:
            raise InvalidInput("camera does not look at the origin")
        return self

    def __eq__(self, other):
        return isinstance(other, CameraViewpoint) and np.array_equal(self.to_vector(), other.to_vector())

    __hash__ = None


@dataclass(frozen=True)
class Action:
    """Absolute target viewpoint in the world frame."""

    target: CameraViewpoint

    @classmethod
    def from_vector(cls, vec, radius=None):
        return cls(CameraViewpoint.from_vector(vec, radius))

    def to_vector(self):
        return self.target.to_vector()


def sample_viewpoints(rng, n, radius, hemisphere="upper"):
    pos = geometry.sample_sphere_positions(rng, n, radius, hemisphere)
    return [CameraViewpoint.from_position(p) for p in pos]


@dataclass(frozen=True)
class EnvState:
    spec: ObjectSpec
    viewpoint: CameraViewpoint
    rng_seed: int = 0


def step(state, action):
    """Move the camera to the action's absolute target and observe."""
    from .raster import render

    target = action.target if isinstance(action, Action) else action
    target.validate(camera_radius(state.spec.category))
    new = replace(state, viewpoint=target)
    return new, render(state.spec, target)


@dataclass
class ViewpointEnv:
    """Stateful wrapper around `step` for interactive use."""

    state: EnvState
    history: list = field(default_factory=list)

    @classmethod
    def reset(cls, spec, viewpoint=None, seed=0):
        if viewpoint is None:
            viewpoint = sample_viewpoints(np.random.default_rng(seed), 1, camera_radius(spec.category))[0]
        return cls(EnvState(spec, viewpoint, seed))

    def observe(self):
        from .raster import render

        return render(self.state.spec, self.state.viewpoint)

    def step(self, action):
        self.state, obs = step(self.state, action)
        self.history.append(self.state.viewpoint)
        return obs
