"""Camera placement on the view sphere.

Camera frame convention: +x forward (viewing direction), +y left, +z up.
World up is +z. Quaternions are (w, x, y, z), canonicalized to w >= 0.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

WORLD_UP = np.array([0.0, 0.0, 1.0])
# used when the camera sits on the world-up axis
FALLBACK_UP = np.array([1.0, 0.0, 0.0])
FORWARD = np.array([1.0, 0.0, 0.0])


def canonical_quaternion(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_to_matrix(q):
    w, x, y, z = canonical_quaternion(q)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(m):
    x, y, z, w = Rotation.from_matrix(m).as_quat()
    return canonical_quaternion([w, x, y, z])


def look_at_matrix(position):
    """Rotation whose columns are the camera forward, left and up axes in world coordinates."""
    p = np.asarray(position, dtype=np.float64)
    n = np.linalg.norm(p)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("look_at needs a non-zero camera position")
    forward = -p / n
    right = np.cross(forward, WORLD_UP)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, FALLBACK_UP)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return np.column_stack([forward, -right, up])


def look_at(position):
    """Unit quaternion orienting a camera at `position` towards the origin."""
    return matrix_to_quat(look_at_matrix(position))


def alignment_error(position, q):
    """1 - cos(angle) between the rotated forward axis and the direction to the origin."""
    p = np.asarray(position, dtype=np.float64)
    fwd = quat_to_matrix(q) @ FORWARD
    return 1.0 - float(fwd @ (-p / np.linalg.norm(p)))


def spherical_position(radius, azimuth, elevation):
    ce = np.cos(elevation)
    return radius * np.array([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])


def sample_sphere_positions(rng, n, radius, hemisphere="upper"):
    """Uniform-area samples on the view sphere (or its upper half)."""
    if hemisphere == "upper":
        z = rng.uniform(0.0, 1.0, size=n)
    elif hemisphere == "full":
        z = rng.uniform(-1.0, 1.0, size=n)
    else:
        raise ValueError(f"unknown hemisphere {hemisphere!r}")
    phi = rng.uniform(0.0, 2 * np.pi, size=n)
    s = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return radius * np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
