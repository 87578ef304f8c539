"""Hierarchical latents, top-down motion features, motion decoding and 3DAWI warping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .context import DetachRestorePair
from .knn import knn
from .nn import Conv, ConvStack, relu
from .pyramid import FramePyramid
from .sparse import SparseTensor, trans_pool_up, union_concat, zeros_like_cs


@dataclass
class AWIConfig:
    k: int = 6
    alpha_init: float = 4.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be at least 1")
        if self.alpha_init <= 0:
            raise ValueError("alpha must be positive")


@dataclass
class MotionState:
    e_down: dict = field(default_factory=dict)
    e_coded: dict = field(default_factory=dict)
    e_up: dict = field(default_factory=dict)
    motion: dict = field(default_factory=dict)


class LatentEncoder:
    """f_H from p_H; f_l from p_l and the stride-2 downsampled f_{l+1}."""

    def __init__(self, store, name, in_channels, channels, high, low):
        self.high, self.low = high, low
        self.top = ConvStack(store, f"{name}.{high}", [in_channels, channels, channels])
        self.down = {}
        self.fuse = {}
        for level in range(low, high):
            self.down[level] = Conv(store, f"{name}.down{level}", channels, channels, 2, stride=2)
            self.fuse[level] = ConvStack(store, f"{name}.{level}", [in_channels + channels, channels, channels])

    def __call__(self, feats: dict) -> dict:
        out = {self.high: self.top(feats[self.high])}
        for level in range(self.high - 1, self.low - 1, -1):
            p = feats[level]
            d = self.down[level](relu(out[level + 1]), out=p.cs)
            out[level] = self.fuse[level](union_concat(p, d), out=p.cs)
        return out


def encode_latent_pyramid(p: FramePyramid, encoder: LatentEncoder, scale=1.0) -> dict:
    """Latents f_l for every layer; ``scale`` maps raw features into the network range."""
    feats = {level: p[level].with_feats(np.asarray(p[level].F * scale, dtype=np.float32)) for level in p.levels}
    return encoder(feats)


class MotionFeatureNet:
    def __init__(self, store, name, channels, motion_channels, has_upper):
        self.down = Conv(store, f"{name}.down", motion_channels, motion_channels, 2, stride=2) if has_upper else None
        self.net = ConvStack(store, f"{name}.net", [2 * channels + motion_channels, motion_channels, motion_channels])
        self.motion_channels = motion_channels


def motion_feature_extract(f, f_ref, e_down_upper, net: MotionFeatureNet) -> SparseTensor:
    """Embedding on coords(f) from [f, f_ref] over their union and the upper embedding."""
    if f.scale != f_ref.scale:
        raise ValueError(f"scale mismatch {f.scale} vs {f_ref.scale}")
    if e_down_upper is None or net.down is None:
        upper = zeros_like_cs(f.cs, net.motion_channels)
    else:
        upper = net.down(e_down_upper, out=f.cs)
    x = union_concat(union_concat(f, f_ref), upper)
    return net.net(x, out=f.cs)


def decode_motion(e_up: SparseTensor, m_lower: SparseTensor | None, net: ConvStack) -> SparseTensor:
    """m_l = 2 up(m_{l-1}) + dm(e_up, up); the lowest motion layer has no inheritance."""
    if m_lower is None:
        return net(e_up)
    up = trans_pool_up(m_lower, e_up.cs)
    up = up.with_feats(ad.mul(up.feats, 2.0))
    dm = net(union_concat(e_up, up))
    return up.with_feats(ad.add(up.feats, dm.feats))


def inherit_motion(m_lower: SparseTensor, target) -> SparseTensor:
    up = trans_pool_up(m_lower, target)
    return up.with_feats(ad.mul(up.feats, 2.0))


def warp_3dawi(f_ref: SparseTensor, m: SparseTensor, k: int, alpha) -> SparseTensor:
    """Inter context on coords(m): inverse-distance KNN interpolation at s + m_s."""
    if len(f_ref) == 0:
        raise ValueError("empty reference")
    pos = m.coords.astype(np.float32)
    query = ad.add(m.feats, pos)
    nbr, _ = knn(ad.value(query), f_ref.coords, k)
    return SparseTensor(m.cs, ad.awi(f_ref.feats, f_ref.coords, query, nbr, alpha))


def zero_motion_context(f_ref: SparseTensor, target, k: int, alpha) -> SparseTensor:
    m = zeros_like_cs(target, 3)
    return warp_3dawi(f_ref, m, k, alpha)


class UInter:
    """All motion-related parameters for one codec."""

    def __init__(self, store, name, channels, motion_channels, high, low, motion_layers, awi: AWIConfig):
        from .entropy import ChunkKind, EntropyCoder

        self.store, self.name = store, name
        self.high, self.low = high, low
        self.cm = motion_channels
        self.motion_layers = sorted(motion_layers)
        self.awi = awi
        self.mfe = {
            level: MotionFeatureNet(store, f"{name}.mfe{level}", channels, motion_channels, level < high)
            for level in range(self.motion_layers[0] if self.motion_layers else high, high + 1)
        }
        self.pairs, self.coders, self.mdec = {}, {}, {}
        for i, level in enumerate(self.motion_layers):
            self.pairs[level] = DetachRestorePair(store, f"{name}.dr{level}", motion_channels, motion_channels)
            self.coders[level] = EntropyCoder(
                store, f"{name}.coder{level}", motion_channels, motion_channels + 3, ChunkKind.MOTION
            )
            cin = motion_channels if i == 0 else motion_channels + 3
            self.mdec[level] = ConvStack(store, f"{name}.mdec{level}", [cin, motion_channels, 3])
            store.params[f"{name}.mdec{level}.1.w"] *= 0.1
        store.add(f"{name}.alpha", (), value=awi.alpha_init)

    def alpha(self):
        return self.store.var(f"{self.name}.alpha")

    def top_down(self, f: dict, f_ref: dict) -> dict:
        """e_d for every layer from H down to the lowest motion layer."""
        e_d = {}
        upper = None
        for level in sorted(self.mfe, reverse=True):
            upper = motion_feature_extract(f[level], f_ref[level], upper, self.mfe[level])
            e_d[level] = upper
        return e_d
