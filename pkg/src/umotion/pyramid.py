"""Octree-level hierarchy of a frame and colour conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse import SparseTensor, avg_pool_down, build_tensor

KR, KB = 0.2126, 0.0722
KG = 1.0 - KR - KB


def rgb_to_yuv(rgb, bitdepth=8):
    """BT.709 limited-range RGB → YUV code values (unrounded)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    peak = (1 << bitdepth) - 1
    s = float(1 << (bitdepth - 8))
    r, g, b = rgb[..., 0] / peak, rgb[..., 1] / peak, rgb[..., 2] / peak
    y = KR * r + KG * g + KB * b
    cb = (b - y) / (2 * (1 - KB))
    cr = (r - y) / (2 * (1 - KR))
    return np.stack([(219 * y + 16) * s, (224 * cb + 128) * s, (224 * cr + 128) * s], axis=-1)


def yuv_to_rgb(yuv, bitdepth=8):
    """Inverse of :func:`rgb_to_yuv` (unrounded, unclipped)."""
    yuv = np.asarray(yuv, dtype=np.float64)
    peak = (1 << bitdepth) - 1
    s = float(1 << (bitdepth - 8))
    y = (yuv[..., 0] / s - 16) / 219
    cb = (yuv[..., 1] / s - 128) / 224
    cr = (yuv[..., 2] / s - 128) / 224
    r = y + 2 * (1 - KR) * cr
    b = y + 2 * (1 - KB) * cb
    g = (y - KR * r - KB * b) / KG
    return np.stack([r, g, b], axis=-1) * peak


def rgb_to_yuv_codes(rgb, bitdepth=8):
    return np.clip(np.rint(rgb_to_yuv(rgb, bitdepth)), 0, (1 << bitdepth) - 1).astype(np.int64)


def yuv_codes_to_rgb(yuv, bitdepth=8):
    return np.clip(np.rint(yuv_to_rgb(yuv, bitdepth)), 0, (1 << bitdepth) - 1).astype(np.int64)


@dataclass
class FramePyramid:
    """Layers ``low..high`` of one frame; ``kind`` is ``"color"`` or ``"occupancy"``."""

    layers: dict
    kind: str
    high: int
    low: int

    def __getitem__(self, level) -> SparseTensor:
        return self.layers[level]

    @property
    def levels(self):
        return range(self.low, self.high + 1)

    @property
    def depth(self):
        return self.high - self.low + 1

    @property
    def top(self) -> SparseTensor:
        return self.layers[self.high]


def build_pyramid(coords, attrs=None, precision=6, depth=5) -> FramePyramid:
    """Layer ``precision`` holds the (deduplicated) input; lower layers are parents.

    Colour layers average their children; occupancy layers carry ones.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if depth < 2 or depth > precision + 1:
        raise ValueError(f"depth {depth} invalid for precision {precision}")
    if coords.size and (coords.min() < 0 or coords.max() >= (1 << precision)):
        raise ValueError(f"coordinates outside [0, 2^{precision})")
    kind = "occupancy" if attrs is None else "color"
    feats = np.ones((len(coords), 1)) if attrs is None else np.asarray(attrs, dtype=np.float64).reshape(len(coords), -1)
    top = build_tensor(coords, feats.astype(np.float64), precision)
    layers = {precision: top}
    low = precision - depth + 1
    cur = top
    for level in range(precision - 1, low - 1, -1):
        cur = avg_pool_down(cur)
        if kind == "occupancy":
            cur = cur.with_feats(np.ones((len(cur), 1)))
        else:
            cur = cur.with_feats(np.asarray(cur.feats.value))
        layers[level] = cur
    return FramePyramid(layers, kind, precision, low)


def check_pyramid(p: FramePyramid) -> None:
    """Raise if parent/child consistency or the occupancy invariant fails."""
    for level in range(p.low, p.high):
        if not np.array_equal(p[level + 1].cs.parents().keys, p[level].cs.keys):
            raise AssertionError(f"layer {level} is not the parent set of layer {level + 1}")
    if p.kind == "occupancy":
        for level in p.levels:
            if not np.all(p[level].F == 1):
                raise AssertionError("occupancy features must be one")
