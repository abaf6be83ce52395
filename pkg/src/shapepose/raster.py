"""Deterministic z-buffer rasterizer for procedural surfaces of revolution.

Gouraud-shaded Lambertian surfaces lit by a headlight fixed in the camera frame,
so a rotationally symmetric object looks the same from every azimuth.
"""
from __future__ import annotations

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import geometry
from .scene import CATEGORY_TOP_CAP

IMAGE_SIZE = 120
FOV_DEG = 35.0
BACKGROUND = 0.5
AMBIENT = 0.3
DIFFUSE = 0.7
SEGMENTS = 48
RINGS = 24
# direction towards the light, camera frame (forward, left, up)
LIGHT_CAM = np.array([-1.0, 0.35, 0.5]) / np.linalg.norm([-1.0, 0.35, 0.5])


class RenderError(RuntimeError):
    pass


def _revolve(zs, rs, drdz, segments):
    theta = 2 * np.pi * np.arange(segments) / segments
    c, s = np.cos(theta), np.sin(theta)
    verts = np.stack([rs[:, None] * c, rs[:, None] * s, np.broadcast_to(zs[:, None], (len(zs), segments))], -1)
    norms = np.stack([np.broadcast_to(c, (len(zs), segments)), np.broadcast_to(s, (len(zs), segments)),
                      np.broadcast_to(-drdz[:, None], (len(zs), segments))], -1)
    norms = norms / np.linalg.norm(norms, axis=-1, keepdims=True)
    nr = len(zs)
    idx = np.arange(nr * segments).reshape(nr, segments)
    a, b = idx[:-1], np.roll(idx[:-1], -1, axis=1)
    c2, d = idx[1:], np.roll(idx[1:], -1, axis=1)
    faces = np.concatenate([np.stack([a, b, d], -1).reshape(-1, 3), np.stack([a, d, c2], -1).reshape(-1, 3)])
    return verts.reshape(-1, 3), norms.reshape(-1, 3), faces


def _cap(z, r, segments, normal_z):
    theta = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([r * np.cos(theta), r * np.sin(theta), np.full(segments, z)], -1)
    verts = np.vstack([[0.0, 0.0, z], ring])
    norms = np.tile([0.0, 0.0, normal_z], (segments + 1, 1))
    k = np.arange(segments)
    faces = np.stack([np.zeros(segments, int), 1 + k, 1 + (k + 1) % segments], -1)
    return verts, norms, faces


def _handle(spec, body, segments=24, tube=10):
    hd = spec.handle
    height = spec.height
    zc = (hd.center_frac - 0.5) * height
    xc = float(body(hd.center_frac))
    phi = np.linspace(-hd.span / 2, hd.span / 2, segments)
    psi = 2 * np.pi * np.arange(tube) / tube
    radial = np.stack([np.cos(phi), np.zeros_like(phi), np.sin(phi)], -1)  # (S, 3)
    center = np.array([xc, 0.0, zc]) + hd.major_radius * radial
    off = np.cos(psi)[None, :, None] * radial[:, None, :] + np.sin(psi)[None, :, None] * np.array([0.0, 1.0, 0.0])
    verts = center[:, None, :] + hd.minor_radius * off
    idx = np.arange(segments * tube).reshape(segments, tube)
    a, b = idx[:-1], np.roll(idx[:-1], -1, axis=1)
    c, d = idx[1:], np.roll(idx[1:], -1, axis=1)
    faces = np.concatenate([np.stack([a, b, d], -1).reshape(-1, 3), np.stack([a, d, c], -1).reshape(-1, 3)])
    return verts.reshape(-1, 3), off.reshape(-1, 3), faces


def build_mesh(spec, segments=SEGMENTS, rings=RINGS):
    """Triangulate an ObjectSpec. Returns (vertices, vertex normals, faces)."""
    prof = np.asarray(spec.profile, dtype=np.float64)
    body = PchipInterpolator(prof[:, 0], prof[:, 1])
    hs = np.linspace(prof[0, 0], prof[-1, 0], rings)
    height = spec.height
    zs = (hs - 0.5) * height
    rs = body(hs)
    drdz = body.derivative()(hs) / height
    parts = [_revolve(zs, rs, drdz, segments), _cap(zs[0], rs[0], segments, -1.0)]
    if CATEGORY_TOP_CAP[spec.category]:
        parts.append(_cap(zs[-1], rs[-1], segments, 1.0))
    if spec.handle is not None:
        parts.append(_handle(spec, body))
    verts, norms, faces, offset = [], [], [], 0
    for v, n, f in parts:
        verts.append(v)
        norms.append(n)
        faces.append(f + offset)
        offset += len(v)
    return np.vstack(verts), np.vstack(norms), np.vstack(faces)


def focal_length(size=IMAGE_SIZE, fov_deg=FOV_DEG):
    return (size / 2) / np.tan(np.radians(fov_deg) / 2)


def project(points, viewpoint, size=IMAGE_SIZE):
    """World points -> (column, row, depth) in pixel units."""
    rot = geometry.quat_to_matrix(viewpoint.orientation)
    cam = (np.asarray(points) - viewpoint.position) @ rot
    f = focal_length(size)
    depth = cam[:, 0]
    u = size / 2 - f * cam[:, 1] / depth
    v = size / 2 - f * cam[:, 2] / depth
    return u, v, depth


def rasterize(verts, norms, faces, albedo, viewpoint, size=IMAGE_SIZE):
    rot = geometry.quat_to_matrix(viewpoint.orientation)
    light = rot @ LIGHT_CAM
    u, v, depth = project(verts, viewpoint, size)
    if np.any(depth <= 1e-6):
        raise RenderError("geometry behind the camera")
    inv_z = 1.0 / depth
    lam = norms @ light
    i_front = AMBIENT + DIFFUSE * np.clip(lam, 0.0, None)
    i_back = AMBIENT + DIFFUSE * np.clip(-lam, 0.0, None)

    tri_u, tri_v = u[faces], v[faces]
    area = (tri_u[:, 1] - tri_u[:, 0]) * (tri_v[:, 2] - tri_v[:, 0]) - (tri_u[:, 2] - tri_u[:, 0]) * (tri_v[:, 1] - tri_v[:, 0])
    keep = np.abs(area) > 1e-12
    if not np.any(keep):
        raise RenderError("mesh has no triangle with non-zero projected area")
    # facing decided from the interpolated vertex normals, independent of winding
    centroid = verts[faces].mean(axis=1)
    front = (norms[faces].sum(axis=1) * (viewpoint.position - centroid)).sum(-1) >= 0

    zbuf = np.zeros((size, size))
    shade = np.full((size, size), -1.0)
    x0 = np.clip(np.floor(tri_u.min(1) - 0.5).astype(int), 0, size - 1)
    x1 = np.clip(np.ceil(tri_u.max(1) - 0.5).astype(int), 0, size - 1)
    y0 = np.clip(np.floor(tri_v.min(1) - 0.5).astype(int), 0, size - 1)
    y1 = np.clip(np.ceil(tri_v.max(1) - 0.5).astype(int), 0, size - 1)
    for t in np.nonzero(keep)[0]:
        xs = np.arange(x0[t], x1[t] + 1) + 0.5
        ys = np.arange(y0[t], y1[t] + 1) + 0.5
        px, py = np.meshgrid(xs, ys)
        tu, tv = tri_u[t], tri_v[t]
        w0 = (tu[1] - px) * (tv[2] - py) - (tu[2] - px) * (tv[1] - py)
        w1 = (tu[2] - px) * (tv[0] - py) - (tu[0] - px) * (tv[2] - py)
        w0, w1 = w0 / area[t], w1 / area[t]
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        f = faces[t]
        z = w0 * inv_z[f[0]] + w1 * inv_z[f[1]] + w2 * inv_z[f[2]]
        sub_z = zbuf[y0[t]:y1[t] + 1, x0[t]:x1[t] + 1]
        win = inside & (z > sub_z)
        if not win.any():
            continue
        inten = i_front[f] if front[t] else i_back[f]
        col = w0 * inten[0] + w1 * inten[1] + w2 * inten[2]
        sub_z[win] = z[win]
        shade[y0[t]:y1[t] + 1, x0[t]:x1[t] + 1][win] = col[win]

    img = np.full((size, size, 3), BACKGROUND)
    mask = shade >= 0
    img[mask] = shade[mask, None] * np.asarray(albedo)[None, :]
    return quantize(np.clip(img, 0.0, 1.0))


def quantize(img):
    """Snap to 8-bit levels; renders are exactly representable as PNG."""
    return np.round(np.asarray(img) * 255.0) / 255.0


def render(spec, viewpoint, size=IMAGE_SIZE):
    verts, norms, faces = build_mesh(spec)
    return rasterize(verts, norms, faces, spec.albedo, viewpoint, size)


def to_uint8(img):
    return np.round(np.asarray(img) * 255.0).astype(np.uint8)


def background_fraction(img):
    return float(np.mean(np.all(np.abs(np.asarray(img) - quantize(BACKGROUND)) < 1e-9, axis=-1)))
