"""Coordinate-hashed sparse voxel tensors.

Coordinates are kept sorted by their Morton (z-order) key, which doubles as
the hash used for lookups: ``searchsorted`` on the sorted key array.  Feature
matrices may be plain arrays or :class:`~umotion.autodiff.Var` nodes; every
operation here is differentiable in the features.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._accel import njit, use_numba

COORD_BIAS = 1 << 20
_COORD_MAX = (1 << 21) - 1


def _spread_bits(v):
    v = v & 0x1FFFFF
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


def _morton_numpy(coords):
    c = coords.astype(np.int64) + COORD_BIAS
    if c.size and (c.min() < 0 or c.max() > _COORD_MAX):
        raise ValueError("coordinate out of the 21-bit hashing range")
    c = c.astype(np.uint64)
    key = _spread_bits(c[:, 0]) | (_spread_bits(c[:, 1]) << np.uint64(1)) | (_spread_bits(c[:, 2]) << np.uint64(2))
    return key.astype(np.int64)


@njit
def _morton_kernel(coords, out):
    for i in range(coords.shape[0]):
        key = 0
        for a in range(3):
            v = coords[i, a] + 1048576
            if v < 0 or v > 2097151:
                return False
            for bit in range(21):
                key |= ((v >> bit) & 1) << (3 * bit + a)
        out[i] = key
    return True


def morton_keys(coords) -> np.ndarray:
    """Int64 Morton keys of integer coordinates (each axis in ±2^20)."""
    coords = np.ascontiguousarray(np.asarray(coords, dtype=np.int64).reshape(-1, 3))
    if use_numba():
        out = np.empty(len(coords), dtype=np.int64)
        if not _morton_kernel(coords, out):
            raise ValueError("coordinate out of the 21-bit hashing range")
        return out
    return _morton_numpy(coords)


class CoordSet:
    """An immutable, canonically ordered set of voxel coordinates at one scale."""

    __slots__ = ("coords", "keys", "scale", "_cache", "__weakref__")

    def __init__(self, coords, scale, keys=None):
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        self.keys = morton_keys(self.coords) if keys is None else keys
        self.scale = int(scale)
        self._cache = {}
        self.coords.setflags(write=False)
        self.keys.setflags(write=False)

    @classmethod
    def from_coords(cls, coords, scale):
        """Canonicalize arbitrary coordinates; returns the set and the row→slot map."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        keys = morton_keys(coords)
        uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        return cls(coords[first], scale, uniq), inverse.reshape(-1)

    @classmethod
    def empty(cls, scale):
        return cls(np.zeros((0, 3), np.int64), scale, np.zeros(0, np.int64))

    def __len__(self):
        return len(self.keys)

    def __repr__(self):
        return f"CoordSet(n={len(self)}, scale={self.scale})"

    def same(self, other: "CoordSet") -> bool:
        return self is other or (len(self) == len(other) and np.array_equal(self.keys, other.keys))

    def lookup_keys(self, keys) -> np.ndarray:
        if len(self.keys) == 0:
            return np.full(len(keys), -1, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return np.where(self.keys[pos] == keys, pos, -1)

    def lookup(self, coords) -> np.ndarray:
        """Row index of each coordinate, ``-1`` where absent."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return self.lookup_keys(morton_keys(coords))

    def contains(self, coords) -> np.ndarray:
        return self.lookup(coords) >= 0

    def cached(self, key, fn):
        hit = self._cache.get(key)
        if hit is None:
            hit = fn()
            self._cache[key] = hit
        return hit

    def parents(self) -> "CoordSet":
        return self.cached("parents", lambda: CoordSet.from_coords(self.coords >> 1, self.scale - 1)[0])

    def children(self) -> "CoordSet":
        """All 8 children of every coordinate, at scale + 1."""

        def build():
            kids = (2 * self.coords[:, None, :] + CHILD_OFFSETS[None]).reshape(-1, 3)
            return CoordSet.from_coords(kids, self.scale + 1)[0]

        return self.cached("children", build)

    def parent_index(self, lower: "CoordSet") -> np.ndarray:
        """Row in ``lower`` of each coordinate's parent (``-1`` for orphans)."""
        return self.cached(("parent_index", lower), lambda: lower.lookup(self.coords >> 1))

    def subset_index(self, sub: "CoordSet") -> np.ndarray:
        return self.cached(("subset", sub), lambda: self.lookup_keys(sub.keys))


CHILD_OFFSETS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)
CUBE3_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
POINT_OFFSET = np.zeros((1, 3), dtype=np.int64)


def kernel_offsets(size: int) -> np.ndarray:
    if size == 1:
        return POINT_OFFSET
    if size == 2:
        return CHILD_OFFSETS
    if size == 3:
        return CUBE3_OFFSETS
    r = np.arange(size) - (size - 1) // 2
    return np.array(list(itertools.product(r, repeat=3)), dtype=np.int64)


class SparseTensor:
    """Features aligned row-for-row with a :class:`CoordSet`."""

    __slots__ = ("cs", "feats")

    def __init__(self, cs: CoordSet, feats):
        if len(ad.value(feats)) != len(cs):
            raise ValueError(f"feature rows {len(ad.value(feats))} != coordinate count {len(cs)}")
        self.cs = cs
        self.feats = feats

    @property
    def coords(self):
        return self.cs.coords

    @property
    def scale(self):
        return self.cs.scale

    @property
    def channels(self):
        return ad.value(self.feats).shape[1]

    @property
    def F(self) -> np.ndarray:
        return ad.value(self.feats)

    def __len__(self):
        return len(self.cs)

    def __repr__(self):
        return f"SparseTensor(n={len(self)}, channels={self.channels}, scale={self.scale})"

    def with_feats(self, feats) -> "SparseTensor":
        return SparseTensor(self.cs, feats)


@dataclass
class KernelWeights:
    """Kernel taps with per-tap ``C_in x C_out`` matrices and a bias."""

    offsets: np.ndarray
    weight: object  # (taps, C_in, C_out) array or Var
    bias: object = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64).reshape(-1, 3)
        if len(np.unique(morton_keys(self.offsets))) != len(self.offsets):
            raise ValueError("kernel offsets must be unique")
        if ad.value(self.weight).shape[0] != len(self.offsets):
            raise ValueError("one weight matrix per offset required")

    @property
    def c_in(self):
        return ad.value(self.weight).shape[1]

    @property
    def c_out(self):
        return ad.value(self.weight).shape[2]


# -- construction -------------------------------------------------------------


def build_tensor(coords, feats, scale) -> SparseTensor:
    """Canonical tensor from raw rows; duplicate coordinates are averaged."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    feats = np.asarray(feats, dtype=np.float32 if np.asarray(feats).dtype != np.float64 else np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if len(coords) != len(feats):
        raise ValueError(f"{len(coords)} coordinates but {len(feats)} feature rows")
    cs, inverse = CoordSet.from_coords(coords, scale)
    if len(cs) == len(coords):
        out = np.empty_like(feats)
        out[inverse] = feats
        return SparseTensor(cs, out)
    sums = np.zeros((len(cs), feats.shape[1]), dtype=np.float64)
    np.add.at(sums, inverse, feats)
    counts = np.bincount(inverse, minlength=len(cs)).astype(np.float64)
    return SparseTensor(cs, (sums / counts[:, None]).astype(feats.dtype))


def zeros_like_cs(cs: CoordSet, channels: int, dtype=np.float32) -> SparseTensor:
    return SparseTensor(cs, np.zeros((len(cs), channels), dtype=dtype))


# -- set operations -------------------------------------------------------


def union_concat(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    """Channel concatenation over the union of coordinates, zero-padding the gaps."""
    if a.scale != b.scale:
        raise ValueError(f"scale mismatch {a.scale} vs {b.scale}")
    if a.cs.same(b.cs):
        return SparseTensor(a.cs, ad.concat([a.feats, b.feats], axis=1))

    def build():
        keys = np.union1d(a.cs.keys, b.cs.keys)
        coords = np.empty((len(keys), 3), dtype=np.int64)
        ia = np.searchsorted(keys, a.cs.keys)
        ib = np.searchsorted(keys, b.cs.keys)
        coords[ia] = a.coords
        coords[ib] = b.coords
        return CoordSet(coords, a.scale, keys), ia, ib

    cs, ia, ib = a.cs.cached(("union", b.cs), build)
    n = len(cs)
    feats = ad.concat([ad.scatter_rows(a.feats, ia, n), ad.scatter_rows(b.feats, ib, n)], axis=1)
    return SparseTensor(cs, feats)


def concat_channels(*ts: SparseTensor) -> SparseTensor:
    base = ts[0]
    for t in ts[1:]:
        if not t.cs.same(base.cs):
            raise ValueError("concat_channels requires identical coordinate sets")
    return SparseTensor(base.cs, ad.concat([t.feats for t in ts], axis=1))


def prune(t: SparseTensor, keep) -> SparseTensor:
    """Drop rows whose coordinate is not in ``keep`` (a CoordSet or coordinate array)."""
    if isinstance(keep, CoordSet):
        if keep.same(t.cs):
            return t
        mask = keep.lookup_keys(t.cs.keys) >= 0
    else:
        keep = np.asarray(keep, dtype=np.int64).reshape(-1, 3)
        mask = np.isin(t.cs.keys, morton_keys(keep))
    if mask.all():
        return t
    rows = np.flatnonzero(mask)
    cs = CoordSet(t.coords[rows], t.scale, t.cs.keys[rows])
    return SparseTensor(cs, ad.take_rows(t.feats, rows, unique=True))


def restrict(t: SparseTensor, cs: CoordSet) -> SparseTensor:
    """Rows of ``t`` at exactly the coordinates of ``cs`` (which must be a subset)."""
    if cs.same(t.cs):
        return SparseTensor(cs, t.feats)
    idx = t.cs.subset_index(cs)
    if (idx < 0).any():
        raise KeyError("restrict target is not a subset of the tensor's coordinates")
    return SparseTensor(cs, ad.take_rows(t.feats, idx, unique=True))


# -- convolution ------------------------------------------------------------


def conv_map(in_cs: CoordSet, out_cs: CoordSet, offsets: np.ndarray, stride: int):
    """Kernel map of ``out[u] += W_k in[stride*u + k]`` as a :class:`~umotion.autodiff.KernelMap`."""
    key = ("conv", in_cs, offsets.tobytes(), stride)

    def build():
        ins, outs, taps = [], [], []
        base = stride * out_cs.coords
        for k, off in enumerate(offsets):
            idx = in_cs.lookup(base + off)
            hit = np.flatnonzero(idx >= 0)
            ins.append(idx[hit])
            outs.append(hit)
            taps.append(np.full(len(hit), k, dtype=np.int64))
        return ad.KernelMap(np.concatenate(ins), np.concatenate(outs), np.concatenate(taps), len(in_cs), len(out_cs), len(offsets))

    return out_cs.cached(key, build)


def deconv_map(in_cs: CoordSet, out_cs: CoordSet, offsets: np.ndarray, stride: int):
    """Kernel map of the transposed convolution ``out[stride*u + k] += W_k in[u]``."""
    key = ("deconv", in_cs, offsets.tobytes(), stride)

    def build():
        ins, outs, taps = [], [], []
        for k, off in enumerate(offsets):
            src = out_cs.coords - off
            ok = np.all(src % stride == 0, axis=1)
            idx = np.full(len(out_cs), -1, dtype=np.int64)
            idx[ok] = in_cs.lookup(src[ok] // stride)
            hit = np.flatnonzero(idx >= 0)
            ins.append(idx[hit])
            outs.append(hit)
            taps.append(np.full(len(hit), k, dtype=np.int64))
        return ad.KernelMap(np.concatenate(ins), np.concatenate(outs), np.concatenate(taps), len(in_cs), len(out_cs), len(offsets))

    return out_cs.cached(key, build)


def _as_cs(coords, scale) -> CoordSet:
    if isinstance(coords, CoordSet):
        return coords
    return CoordSet.from_coords(coords, scale)[0]


def sparse_conv(t: SparseTensor, w: KernelWeights, out_coords=None, stride: int = 1) -> SparseTensor:
    """Generalized sparse convolution onto ``out_coords``.

    Defaults: the input coordinates for stride 1, their parents for stride 2.
    """
    if t.channels != w.c_in:
        raise ValueError(f"channel mismatch: tensor has {t.channels}, kernel expects {w.c_in}")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if out_coords is None:
        out_cs = t.cs if stride == 1 else t.cs.parents()
    else:
        out_cs = _as_cs(out_coords, t.scale if stride == 1 else t.scale - 1)
    feats = ad.conv_gather(t.feats, w.weight, w.bias, conv_map(t.cs, out_cs, w.offsets, stride))
    return SparseTensor(out_cs, feats)


def sparse_deconv(t: SparseTensor, w: KernelWeights, target=None, stride: int = 2) -> SparseTensor:
    """Transposed sparse convolution; generative when ``target`` is None."""
    if t.channels != w.c_in:
        raise ValueError(f"channel mismatch: tensor has {t.channels}, kernel expects {w.c_in}")
    if target is None:

        def build():
            pts = (stride * t.coords[:, None, :] + w.offsets[None]).reshape(-1, 3)
            return CoordSet.from_coords(pts, t.scale + 1)[0]

        out_cs = t.cs.children() if np.array_equal(w.offsets, CHILD_OFFSETS) and stride == 2 else t.cs.cached(
            ("gen", w.offsets.tobytes(), stride), build
        )
    else:
        out_cs = _as_cs(target, t.scale + 1)
    feats = ad.conv_gather(t.feats, w.weight, w.bias, deconv_map(t.cs, out_cs, w.offsets, stride))
    return SparseTensor(out_cs, feats)


def sparse_deconv_generative(t: SparseTensor, w: KernelWeights) -> SparseTensor:
    return sparse_deconv(t, w, target=None, stride=2)


# -- pooling ------------------------------------------------------------------


def avg_pool_down(t: SparseTensor) -> SparseTensor:
    """Parents at scale-1, each carrying the mean of its occupied children."""
    parents = t.cs.parents()
    seg = t.cs.parent_index(parents)
    counts = np.bincount(seg, minlength=len(parents)).astype(t.F.dtype)
    summed = ad.segment_sum(t.feats, seg, len(parents))
    return SparseTensor(parents, ad.mul(summed, (1.0 / counts)[:, None]))


def trans_pool_up(t: SparseTensor, target) -> SparseTensor:
    """Every target coordinate copies its parent's feature row."""
    target = _as_cs(target, t.scale + 1)
    idx = target.parent_index(t.cs)
    if (idx < 0).any():
        bad = target.coords[np.flatnonzero(idx < 0)[0]]
        raise KeyError(f"target coordinate {tuple(int(v) for v in bad)} has no parent in the source tensor")
    return SparseTensor(target, ad.take_rows(t.feats, idx))


def dense_grid(t: SparseTensor, origin, shape) -> np.ndarray:
    """Scatter a tensor into a dense (X, Y, Z, C) array; for oracles and debugging."""
    out = np.zeros(tuple(shape) + (t.channels,), dtype=np.float64)
    rel = t.coords - np.asarray(origin)
    out[rel[:, 0], rel[:, 1], rel[:, 2]] = t.F
    return out
