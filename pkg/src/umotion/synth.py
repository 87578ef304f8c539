"""Deterministic synthetic point-cloud sequences with known motion.

A textured sphere shell is sampled densely in its own frame, moved, and
voxelized.  The motion sidecar stores, for every voxel of frame t, the
backward displacement to where its surface sample sat in frame t-1 (the
quantity the codec's warp consumes: ``s + m`` lands on the reference).
"""

from __future__ import annotations

import math

import numpy as np

KINDS = ("translate", "rotate", "articulate")


def _texture(local):
    """Colour as a function of object-frame position: stripes, checks and a gradient."""
    x, y, z = local[:, 0], local[:, 1], local[:, 2]
    r = 128 + 90 * np.sin(0.9 * x) * np.cos(0.7 * y) + 20 * np.tanh(z / 6)
    g = 128 + 80 * np.sign(np.sin(0.6 * (x + z))) * np.sign(np.sin(0.6 * y))
    b = 128 + 100 * np.cos(0.5 * z + 0.3 * x)
    return np.clip(np.stack([r, g, b], axis=1), 0, 255)


def _sphere_samples(radius, n_samples, rng):
    v = rng.normal(size=(n_samples, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    # a thin shell so voxelization gives a closed, two-voxel-ish thick surface
    return v * (radius + rng.uniform(-0.5, 0.5, size=(n_samples, 1)))


def _rot_z(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


def _voxelize(pos, colors, prev_pos, precision):
    vox = np.floor(pos).astype(np.int64)
    lim = (1 << precision) - 1
    ok = np.all((vox >= 0) & (vox <= lim), axis=1)
    vox, colors, back = vox[ok], colors[ok], (prev_pos - pos)[ok]
    from .sparse import build_tensor

    t = build_tensor(vox, np.concatenate([colors, back], axis=1).astype(np.float64), precision)
    rgb = np.clip(np.rint(t.F[:, :3]), 0, 255).astype(np.int64)
    return t.coords.copy(), rgb, t.F[:, 3:].copy()


def synth_sequence(kind="translate", frames=4, points=2000, precision=6, seed=0, shift=(4, 0, 0), angle=5.0, radius=None):
    """Return ``(frames, motions)``: per-frame ``(coords, rgb)`` tuples and backward-motion arrays."""
    if kind not in KINDS:
        raise ValueError(f"unknown sequence kind {kind!r}; choose from {KINDS}")
    if precision > 10:
        raise ValueError("toy sequences are limited to 10-bit precision")
    rng = np.random.default_rng(seed)
    size = 1 << precision
    if radius is None:
        # a voxelized unit-thick shell occupies 8.1 pi r^2 voxels
        radius = min(math.sqrt(points / (8.1 * math.pi)), size / 4)
    local = _sphere_samples(radius, max(20 * points, 20000), rng)
    colors = _texture(local)
    shift = np.asarray(shift, dtype=np.float64)
    total = shift * (frames - 1)
    center = np.full(3, size / 2.0) - total / 2.0
    center = center + rng.uniform(-0.5, 0.5, size=3) * (kind != "translate")
    out, motions = [], []
    prev = None
    for t in range(frames):
        if kind == "translate":
            pos = local + center + shift * t
        elif kind == "rotate":
            pos = local @ _rot_z(angle * t).T + np.full(3, size / 2.0)
        else:
            upper = local[:, 2] > 0
            pos = local.copy()
            pos[upper] = local[upper] @ _rot_z(angle * t).T
            pos = pos + np.full(3, size / 2.0)
            pos[upper] += shift * t
        back = pos if prev is None else prev
        coords, rgb, motion = _voxelize(pos, colors, back, precision)
        out.append((coords, rgb))
        motions.append(motion)
        prev = pos
    return out, motions
