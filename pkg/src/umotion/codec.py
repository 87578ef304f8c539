"""Attribute and geometry P-frame codecs built on one shared layer loop.

The same routine runs in ``train``, ``eval``, ``encode`` and ``decode`` modes
(see :class:`~umotion.entropy.CodingSession`).  The encoder's reconstruction
is computed from the quantized symbols exactly as the decoder computes it, so
both sides agree bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import rangecoder as rc
from .context import IntraContext, TwoStage, detach, restore, two_stage_latent_detach, two_stage_latent_restore
from .entropy import ChunkKind, CodingSession, EntropyCoder, normalize_lambda
from .nn import ConvStack, OccupancyHead, ParamStore
from .pyramid import FramePyramid, build_pyramid
from .sparse import CoordSet, SparseTensor, concat_channels, restrict, trans_pool_up, zeros_like_cs
from .u_inter import (
    AWIConfig,
    LatentEncoder,
    MotionState,
    UInter,
    decode_motion,
    encode_latent_pyramid,
    inherit_motion,
    warp_3dawi,
)

log = logging.getLogger(__name__)

COLOR_SCALE = 1.0 / 255.0


@dataclass
class CodecConfig:
    mode: str = "attribute"
    precision: int = 6
    depth: int | None = None
    channels: int = 32
    motion_channels: int = 24
    motion_layers: list | None = None
    lossless_layers: int | None = None
    lam: float = 2537.0
    k: int = 6
    alpha_init: float = 4.0
    bottom_up: bool = True

    def __post_init__(self):
        if self.mode not in ("attribute", "geometry"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.depth is None:
            # toy-scale defaults; the five-layer attribute model is depth=5
            self.depth = 4 if self.mode == "attribute" else 3
        if self.depth < 2 or self.depth > self.precision + 1:
            raise ValueError(f"depth {self.depth} invalid for precision {self.precision}")
        if self.motion_layers is None:
            self.motion_layers = [self.low, self.low + 1][: self.depth - (self.mode == "geometry")]
        self.motion_layers = sorted(int(v) for v in self.motion_layers)
        top = self.precision if self.mode == "attribute" else self.precision - 1
        for a, b in zip(self.motion_layers, self.motion_layers[1:]):
            if b != a + 1:
                raise ValueError("motion layers must be contiguous")
        if self.motion_layers and (self.motion_layers[0] < self.low or self.motion_layers[-1] > top):
            raise ValueError(f"motion layers must lie in [{self.low}, {top}]")
        if self.mode == "geometry":
            if self.lossless_layers is None:
                self.lossless_layers = self.depth - 1
            if not 0 <= self.lossless_layers <= self.depth - 1:
                raise ValueError("lossless_layers must be between 0 and depth - 1")
        AWIConfig(self.k, self.alpha_init)

    @property
    def high(self):
        return self.precision

    @property
    def low(self):
        return self.precision - self.depth + 1

    def is_lossless(self, level) -> bool:
        return level <= self.low + self.lossless_layers

    def layer_lambda(self, level) -> float:
        return 1.0 if self.is_lossless(level) else self.lam

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "CodecConfig":
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


@dataclass
class FrameResult:
    """Outcome of one P-frame pass."""

    chunks: list
    bits: dict
    recon_coords: np.ndarray
    recon_attrs: np.ndarray | None
    rate: object = None
    loss: object = None
    distortion: dict = field(default_factory=dict)
    bce: dict = field(default_factory=dict)
    motion: dict = field(default_factory=dict)
    latents: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)

    @property
    def nbits(self) -> float:
        return float(sum(self.bits.values()))


class UMotionCodec:
    """Parameters and modules of one trained codec."""

    def __init__(self, cfg: CodecConfig, store: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.store = store or ParamStore(seed=seed)
        s, C, Cm = self.store, cfg.channels, cfg.motion_channels
        geo = cfg.mode == "geometry"
        self.in_channels = 1 if geo else 3
        self.encoder = LatentEncoder(s, "enc", self.in_channels, C, cfg.high, cfg.low)
        self.uinter = UInter(s, "mot", C, Cm, cfg.high, cfg.low, cfg.motion_layers, AWIConfig(cfg.k, cfg.alpha_init))
        coded = range(cfg.low, cfg.high) if geo else range(cfg.low, cfg.high + 1)
        self.coded_levels = list(coded)
        self.two_stage = {lv: TwoStage(s, f"lat{lv}", C) for lv in coded}
        self.coders = {lv: EntropyCoder(s, f"coder{lv}", C, 2 * C, ChunkKind.LATENT) for lv in coded}
        self.intra = {lv: IntraContext(s, f"intra{lv}", C, generative=geo) for lv in range(cfg.low + 1, cfg.high + 1)}
        if geo:
            self.occupancy = {lv: OccupancyHead(s, f"occ{lv}", C) for lv in range(cfg.low + 1, cfg.high + 1)}
        else:
            self.recon = {lv: ConvStack(s, f"rec{lv}", [C + 3, C, 3]) for lv in range(cfg.low + 1, cfg.high + 1)}
            for lv in self.recon:
                s.params[f"rec{lv}.1.w"] *= 0.1

    def digest(self) -> bytes:
        h = hashlib.sha256(self.cfg.digest())
        h.update(self.store.digest())
        return h.digest()

    # -- motion ----------------------------------------------------------------

    def _motion_layer(self, cc, level, cs, st: MotionState, lam_t, zero_motion):
        ui, cfg = self.uinter, self.cfg
        Cm = cfg.motion_channels
        if zero_motion:
            m = zeros_like_cs(cs, 3)
        elif level in ui.motion_layers:
            have_lower = (level - 1) in st.e_up
            ctx_e = trans_pool_up(st.e_up[level - 1], cs) if have_lower and cfg.bottom_up else zeros_like_cs(cs, Cm)
            ctx_m = inherit_motion(st.motion[level - 1], cs) if have_lower else zeros_like_cs(cs, 3)
            e = None
            if not cc.decoding:
                e_d = st.e_down[level]
                if not e_d.cs.same(cs):
                    e_d = retarget(e_d, cs)
                e = detach(e_d, [ctx_e], ui.pairs[level]) if cfg.bottom_up else e_d
                st.e_coded[level] = e
            e_hat, bits, _ = ui.coders[level](cc, e, concat_channels(ctx_e, ctx_m), lam_t, cs, level)
            e_up = restore(e_hat, [ctx_e], ui.pairs[level]) if cfg.bottom_up else e_hat
            st.e_up[level] = e_up
            m = decode_motion(e_up, st.motion.get(level - 1), ui.mdec[level])
            st.motion[level] = m
            return m, bits
        elif (level - 1) in st.motion:
            m = inherit_motion(st.motion[level - 1], cs)
        else:
            m = zeros_like_cs(cs, 3)
        st.motion[level] = m
        return m, None

    def _latent_layer(self, cc, level, cs, f, f_ref, m, f_bar, lam_t, res):
        ts = self.two_stage[level]
        f_check = warp_3dawi(f_ref, m, self.cfg.k, self.uinter.alpha())
        r = None
        if not cc.decoding:
            if not f.cs.same(cs):
                f = retarget(f, cs)
            r = two_stage_latent_detach(f, f_check, f_bar, ts)
            res.residuals[level] = r
            res.latents[level] = f
        r_hat, bits, _ = self.coders[level](cc, r, concat_channels(f_check, f_bar), lam_t, cs, level)
        return two_stage_latent_restore(r_hat, f_check, f_bar, ts), bits

    # -- attribute ------------------------------------------------------------

    def attribute_frame(self, cc: CodingSession, geom: FramePyramid, ref: FramePyramid, cur: FramePyramid | None, lam, zero_motion=False):
        cfg = self.cfg
        lam_t = normalize_lambda(lam)
        f_ref = encode_latent_pyramid(ref, self.encoder, COLOR_SCALE)
        st = MotionState()
        res = FrameResult([], {}, geom.top.coords, None)
        if not cc.decoding:
            f = encode_latent_pyramid(cur, self.encoder, COLOR_SCALE)
            if self.uinter.motion_layers and not zero_motion:
                st.e_down = self.uinter.top_down(f, f_ref)
        rate = ad.Var(np.float32(0))
        f_hat, p_hat = {}, {}
        for level in range(cfg.low, cfg.high + 1):
            cs = geom[level].cs
            m, mbits = self._motion_layer(cc, level, cs, st, lam_t, zero_motion)
            if mbits is not None:
                rate = ad.add(rate, mbits)
            f_bar = self.intra[level](f_hat[level - 1], cs) if level > cfg.low else zeros_like_cs(cs, cfg.channels)
            f_hat[level], lbits = self._latent_layer(
                cc, level, cs, None if cc.decoding else f[level], f_ref[level], m, f_bar, lam_t, res
            )
            rate = ad.add(rate, lbits)
            if level == cfg.low:
                if cc.decoding:
                    codes = rc.decode_uniform(cc.take(ChunkKind.BASE, level), 3 * len(cs), 8).reshape(-1, 3)
                else:
                    codes = np.clip(ad.round_half_away(cur[level].F), 0, 255).astype(np.int64)
                    if cc.mode == "encode":
                        cc.put(ChunkKind.BASE, level, rc.encode_uniform(codes.ravel(), 8))
                payload_bits = 8 * len(cc.chunks[cc.cursor - 1].payload) if cc.decoding else (
                    8 * len(cc.chunks[-1].payload) if cc.mode == "encode" else 24.0 * len(cs)
                )
                cc.account(ChunkKind.BASE, level, payload_bits)
                p_hat[level] = SparseTensor(cs, (codes * COLOR_SCALE).astype(np.float32))
            else:
                up = trans_pool_up(p_hat[level - 1], cs)
                dp = self.recon[level](concat_channels(f_hat[level], up))
                p_hat[level] = up.with_feats(ad.add(up.feats, dp.feats))
                if not cc.decoding:
                    target = (cur[level].F * COLOR_SCALE).astype(np.float32)
                    res.distortion[level] = ad.mean(ad.square(ad.sub(p_hat[level].feats, target)))
        top = p_hat[cfg.high].F
        res.recon_attrs = np.clip(ad.round_half_away(top.astype(np.float64) * 255.0), 0, 255).astype(np.int64)
        res.motion = st.motion
        res.rate = rate
        if not cc.decoding:
            n = len(cur.top)
            dist = sum((res.distortion[lv] for lv in res.distortion), ad.Var(np.float32(0)))
            res.loss = attribute_loss(rate, dist, lam, n)
        return res

    # -- geometry -------------------------------------------------------------

    def geometry_frame(self, cc: CodingSession, ref: FramePyramid, cur: FramePyramid | None, counts=None, zero_motion=False):
        cfg = self.cfg
        lam_t = 0.5
        f_ref = encode_latent_pyramid(ref, self.encoder, 1.0)
        st = MotionState()
        res = FrameResult([], {}, None, None)
        if cc.decoding:
            counts = counts if counts is not None else _read_counts(cc.take(ChunkKind.HEADER, cfg.high), cfg)
        else:
            counts = {lv: len(cur[lv]) for lv in cur.levels}
            if cc.mode == "encode":
                cc.put(ChunkKind.HEADER, cfg.high, _write_counts(counts, cfg))
        f = None
        if not cc.decoding:
            f = encode_latent_pyramid(cur, self.encoder, 1.0)
            if self.uinter.motion_layers and not zero_motion:
                st.e_down = self.uinter.top_down(f, f_ref)
        rate = ad.Var(np.float32(0))
        bce_total = ad.Var(np.float32(0))
        cs = {}
        f_hat = {}
        low = cfg.low
        # base layer: raw coordinates
        nb = 3 * low
        if cc.decoding:
            packed = rc.decode_uniform(cc.take(ChunkKind.BASE, low), counts[low], nb) if nb else np.zeros(counts[low], np.int64)
            cs[low] = CoordSet.from_coords(_unpack_coords(packed, low), low)[0]
            cc.account(ChunkKind.BASE, low, 8 * len(cc.chunks[cc.cursor - 1].payload) if nb else 0)
        else:
            cs[low] = cur[low].cs
            if cc.mode == "encode":
                payload = rc.encode_uniform(_pack_coords(cs[low].coords, low), nb) if nb else b""
                cc.put(ChunkKind.BASE, low, payload)
                cc.account(ChunkKind.BASE, low, 8 * len(payload))
            else:
                cc.account(ChunkKind.BASE, low, nb * len(cs[low]))
        for level in range(low, cfg.high + 1):
            if level > low:
                cand = self.intra[level](f_hat[level - 1])
                logits = self.occupancy[level](cand).feats
                truth = None
                if not cc.decoding:
                    truth = (cur[level].cs.lookup_keys(cand.cs.keys) >= 0).astype(np.float32)[:, None]
                    bce = ad.bce_bits(logits, truth)
                    res.bce[level] = bce
                    bce_total = ad.add(bce_total, ad.mul(bce, cfg.layer_lambda(level)))
                lv = ad.value(logits)[:, 0]
                if cfg.is_lossless(level):
                    p_codes = rc.prob_to_code(1.0 / (1.0 + np.exp(-lv.astype(np.float64))))
                    if cc.decoding:
                        keep = rc.decode_binary(cc.take(ChunkKind.OCCUPANCY, level), p_codes).astype(bool)
                        cc.account(ChunkKind.OCCUPANCY, level, 8 * len(cc.chunks[cc.cursor - 1].payload))
                    else:
                        keep = truth[:, 0] > 0
                        if cc.mode == "encode":
                            payload = rc.encode_binary(keep.astype(np.int64), p_codes)
                            cc.put(ChunkKind.OCCUPANCY, level, payload)
                            cc.account(ChunkKind.OCCUPANCY, level, 8 * len(payload))
                        else:
                            cc.account(ChunkKind.OCCUPANCY, level, float(ad.value(res.bce[level])))
                elif cc.training:
                    keep = truth[:, 0] > 0
                else:
                    keep = top_n_mask(lv, counts[level])
                rows = np.flatnonzero(keep)
                cs[level] = CoordSet(cand.cs.coords[rows], level, cand.cs.keys[rows])
                f_bar = restrict(cand, cs[level])
            else:
                f_bar = zeros_like_cs(cs[level], cfg.channels)
            if level == cfg.high:
                break
            m, mbits = self._motion_layer(cc, level, cs[level], st, lam_t, zero_motion)
            if mbits is not None:
                rate = ad.add(rate, mbits)
            f_hat[level], lbits = self._latent_layer(
                cc, level, cs[level], None if f is None else f[level], f_ref[level], m, f_bar, lam_t, res
            )
            rate = ad.add(rate, lbits)
        res.recon_coords = cs[cfg.high].coords
        res.motion = st.motion
        res.rate = rate
        if not cc.decoding:
            res.loss = geometry_loss(rate, bce_total, len(cur.top))
        return res


# -- losses ---------------------------------------------------------------------


def attribute_loss(rate_bits, distortion, lam, n_points):
    """``rate / N + lambda * sum of per-layer mean squared colour errors``."""
    return ad.add(ad.mul(rate_bits, 1.0 / n_points), ad.mul(distortion, float(lam)))


def geometry_loss(rate_bits, weighted_bce_bits, n_points):
    """``(rate + sum_l lambda_l BCE_l) / N``; BCE in bits over the candidate voxels."""
    return ad.mul(ad.add(rate_bits, weighted_bce_bits), 1.0 / n_points)


# -- helpers --------------------------------------------------------------------


def top_n_mask(scores, n) -> np.ndarray:
    """Keep the ``n`` highest scores; ties go to the earlier (canonical) row."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(len(scores)), -scores.astype(np.float64)))
    keep = np.zeros(len(scores), dtype=bool)
    keep[order[: max(0, min(int(n), len(scores)))]] = True
    return keep


def retarget(t: SparseTensor, cs: CoordSet, k: int = 3) -> SparseTensor:
    """Move encoder-side features onto a decoded coordinate set (inverse-distance KNN)."""
    from .knn import knn

    if t.cs.same(cs):
        return t
    nbr, _ = knn(cs.coords.astype(np.float64), t.coords, k)
    feats = ad.awi(t.feats, t.coords, cs.coords.astype(np.float32), nbr, np.float32(0.0))
    return SparseTensor(cs, feats)


def _pack_coords(coords, bits) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    return (c[:, 0] << (2 * bits)) | (c[:, 1] << bits) | c[:, 2]


def _unpack_coords(packed, bits) -> np.ndarray:
    mask = (1 << bits) - 1
    packed = np.asarray(packed, dtype=np.int64)
    return np.stack([(packed >> (2 * bits)) & mask, (packed >> bits) & mask, packed & mask], axis=1)


def _write_counts(counts, cfg) -> bytes:
    return struct.pack(f"<{cfg.depth}I", *(counts[lv] for lv in range(cfg.low, cfg.high + 1)))


def _read_counts(payload, cfg) -> dict:
    if len(payload) != 4 * cfg.depth:
        raise rc.CorruptStream("bad geometry header")
    vals = struct.unpack(f"<{cfg.depth}I", payload)
    return {lv: v for lv, v in zip(range(cfg.low, cfg.high + 1), vals)}


def frame_crc(coords, attrs=None) -> int:
    order = np.lexsort(np.asarray(coords).T[::-1])
    crc = zlib.crc32(np.ascontiguousarray(np.asarray(coords, dtype="<i4")[order]).tobytes())
    if attrs is not None:
        crc = zlib.crc32(np.ascontiguousarray(np.asarray(attrs, dtype="<u1")[order]).tobytes(), crc)
    return crc & 0xFFFFFFFF
