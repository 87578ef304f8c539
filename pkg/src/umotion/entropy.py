"""Variable-rate quantization and the hybrid context/hyperprior entropy coder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rangecoder as rc
from .nn import Conv, ConvStack, Linear, relu
from .sparse import CoordSet, SparseTensor, concat_channels

log = logging.getLogger(__name__)

LAMBDA_MIN = 256.0
LAMBDA_MAX = 18000.0
SIGMA_MIN = rc.SIGMA_MIN
PMF_FLOOR = ad.PMF_FLOOR


def quantize(x, q_glob_enc=0.0, q_loc_enc=0.0, training=False, rng=None):
    """``round(x (1 + q_glob_enc)(1 + q_loc_enc))``; uniform noise replaces rounding in training."""
    scaled = ad.mul(ad.mul(x, 1.0 + np.asarray(ad.value(q_glob_enc))), ad.add(1.0, q_loc_enc))
    return ad.straight_through_quantize(scaled, training, rng)


def dequantize(x_q, q_glob_dec=0.0, q_loc_dec=0.0):
    return ad.mul(ad.mul(x_q, 1.0 + np.asarray(ad.value(q_glob_dec))), ad.add(1.0, q_loc_dec))


def gaussian_pmf(x_q, mu, sigma):
    """Probability mass of integer ``x_q`` under N(mu, sigma), floored at 2^-16."""
    return np.maximum(ad.gaussian_pmf_value(x_q, mu, np.maximum(sigma, SIGMA_MIN)), PMF_FLOOR)


def estimate_rate(x_q, mu, sigma):
    """Bits needed for ``x_q``: the differentiable sum of ``-log2 pmf``."""
    return ad.gaussian_bits(x_q, mu, sigma)


def normalize_lambda(lam, lo=LAMBDA_MIN, hi=LAMBDA_MAX) -> float:
    if lam < lo or lam > hi:
        log.warning("lambda %.1f outside the trained range [%g, %g]; clamping", lam, lo, hi)
        lam = min(max(lam, lo), hi)
    return (math.log(lam) - math.log(lo)) / (math.log(hi) - math.log(lo))


class LambdaMapping:
    """Normalized log-λ → per-channel global step modifiers (encoder and decoder side)."""

    def __init__(self, store, name, channels, hidden=16):
        self.store, self.name, self.channels = store, name, channels
        self.fc0 = Linear(store, f"{name}.fc0", 1, hidden)
        self.fc1 = Linear(store, f"{name}.fc1", hidden, 2 * channels)
        store.params[f"{name}.fc1.w"][...] = 0
        store.add(f"{name}.skip", (1, 2 * channels), value=np.r_[np.full(channels, 1.5), np.zeros(channels)])

    def __call__(self, t: float):
        x = ad.Var(np.array([[t]], dtype=self.store.dtype))
        h = ad.add(self.fc1(ad.relu(self.fc0(x))), ad.mul(x, self.store.var(f"{self.name}.skip")))
        h = ad.reshape(h, (2 * self.channels,))
        a = h[: self.channels]
        b = h[self.channels :]
        log_enc = a
        log_dec = ad.sub(b, a)
        return ad.sub(ad.exp(log_enc), 1.0), ad.sub(ad.exp(log_dec), 1.0)


def lambda_to_qglob(mapping: LambdaMapping, lam: float):
    """``(q_glob_enc, q_glob_dec)`` arrays for a rate parameter λ."""
    qe, qd = mapping(normalize_lambda(lam))
    return qe.value, qd.value


# -- coding session -----------------------------------------------------------------


class ChunkKind:
    HEADER = 1
    BASE = 2
    OCCUPANCY = 3
    MOTION_HYPER = 4
    MOTION = 5
    LATENT_HYPER = 6
    LATENT = 7
    CHECK = 8

    NAMES = {1: "header", 2: "base", 3: "occupancy", 4: "motion_hyper", 5: "motion", 6: "latent_hyper", 7: "latent", 8: "check"}


@dataclass
class Chunk:
    kind: int
    layer: int
    payload: bytes


class StreamDesync(RuntimeError):
    pass


@dataclass
class CodingSession:
    """Mode plus the chunk queue shared by every coder in one frame.

    ``train`` adds quantization noise, ``eval`` rounds and only estimates
    rates, ``encode`` writes chunks, ``decode`` reads them back in order.
    """

    mode: str
    rng: np.random.Generator | None = None
    chunks: list = field(default_factory=list)
    bits: dict = field(default_factory=dict)
    cursor: int = 0

    @property
    def training(self):
        return self.mode == "train"

    @property
    def decoding(self):
        return self.mode == "decode"

    def put(self, kind, layer, payload):
        self.chunks.append(Chunk(kind, layer, payload))

    def take(self, kind, layer) -> bytes:
        if self.cursor >= len(self.chunks):
            raise StreamDesync(f"missing {ChunkKind.NAMES.get(kind, kind)} chunk for layer {layer}")
        ch = self.chunks[self.cursor]
        if ch.kind != kind or ch.layer != layer:
            raise StreamDesync(
                f"expected {ChunkKind.NAMES.get(kind, kind)}@{layer}, found {ChunkKind.NAMES.get(ch.kind, ch.kind)}@{ch.layer}"
            )
        self.cursor += 1
        return ch.payload

    def account(self, kind, layer, bits):
        key = (ChunkKind.NAMES[kind], layer)
        self.bits[key] = self.bits.get(key, 0.0) + float(bits)


def _symbols(v) -> np.ndarray:
    return np.clip(ad.value(v).astype(np.float64), -rc.SYMBOL_LIMIT, rc.SYMBOL_LIMIT).astype(np.int64)


class EntropyCoder:
    """Stride-2 analysis, hyperprior + context entropy model, stride-2 synthesis.

    The coded variable lives on the parents of the input coordinates; its
    hyper-latent one scale further down.
    """

    def __init__(self, store, name, channels, ctx_channels, kind, hyper_channels=None):
        self.store, self.name, self.C = store, name, channels
        self.kind, self.hyper_kind = kind, kind - 1
        cy = hyper_channels or max(channels // 2, 4)
        self.cy = cy
        self.down = Conv(store, f"{name}.down", channels, channels, 2, stride=2)
        self.ctx_down = Conv(store, f"{name}.ctx_down", ctx_channels, channels, 2, stride=2)
        self.hyper_enc = Conv(store, f"{name}.henc", channels, cy, 2, stride=2)
        self.hyper_dec = Conv(store, f"{name}.hdec", cy, channels, 2, stride=2, transposed=True)
        self.fusion = ConvStack(store, f"{name}.fuse", [2 * channels, channels, 4 * channels])
        self.up = Conv(store, f"{name}.up", channels, channels, 2, stride=2, transposed=True)
        store.add(f"{name}.prior_mu", (cy,), init="zeros")
        store.add(f"{name}.prior_s", (cy,), value=1.0)
        self.lam = LambdaMapping(store, f"{name}.lam", channels)

    def prior(self):
        mu = self.store.var(f"{self.name}.prior_mu")
        sigma = ad.add(ad.softplus(self.store.var(f"{self.name}.prior_s")), SIGMA_MIN)
        return mu, sigma

    def entropy_params(self, ctx_d: SparseTensor, h: SparseTensor, lam_t: float):
        """Gaussian mean/scale of the scaled variable and the step factors."""
        C = self.C
        out = self.fusion(concat_channels(ctx_d, h.with_feats(ad.relu(h.feats)))).feats
        mu, s_raw, qe_raw, qd_raw = out[:, :C], out[:, C : 2 * C], out[:, 2 * C : 3 * C], out[:, 3 * C :]
        q_loc_enc = ad.mul(ad.tanh(qe_raw), 0.5)
        q_loc_dec = ad.mul(ad.tanh(qd_raw), 0.5)
        q_glob_enc, q_glob_dec = self.lam(lam_t)
        scale_enc = ad.mul(ad.add(q_glob_enc, 1.0), ad.add(q_loc_enc, 1.0))
        mu_s = ad.mul(mu, scale_enc)
        sigma_s = ad.add(ad.mul(ad.softplus(s_raw), scale_enc), SIGMA_MIN)
        return mu_s, sigma_s, q_glob_enc, q_loc_enc, q_glob_dec, q_loc_dec

    def __call__(self, cc: CodingSession, x: SparseTensor | None, ctx: SparseTensor, lam_t: float, target: CoordSet, layer: int):
        """Return ``(x_hat on target, estimated bits, coded symbols)``."""
        down_cs = target.parents()
        hyper_cs = down_cs.parents()
        ctx_d = self.ctx_down(ctx, out=down_cs)
        xd = None
        if not cc.decoding:
            xd = self.down(x, out=down_cs)
            y = self.hyper_enc(relu(xd), out=hyper_cs).feats

        # hyper-latent under the factorized prior
        pmu, psig = self.prior()
        if cc.training:
            y_q = ad.straight_through_quantize(y, True, cc.rng)
        elif cc.decoding:
            mc = np.broadcast_to(rc.mu_to_code(pmu.value), (len(hyper_cs), self.cy)).ravel()
            sc = np.broadcast_to(rc.sigma_to_code(psig.value), (len(hyper_cs), self.cy)).ravel()
            sym = rc.decode_gaussian(cc.take(self.hyper_kind, layer), mc, sc)
            y_q = ad.Var(sym.reshape(len(hyper_cs), self.cy).astype(self.store.dtype))
        else:
            y_q = ad.straight_through_quantize(y, False)
        hyper_bits = ad.gaussian_bits(y_q, pmu, psig)
        if cc.mode == "encode":
            mc = np.broadcast_to(rc.mu_to_code(pmu.value), y_q.shape).ravel()
            sc = np.broadcast_to(rc.sigma_to_code(psig.value), y_q.shape).ravel()
            sym = _symbols(y_q)
            y_q = ad.Var(sym.astype(self.store.dtype))
            payload = rc.encode_gaussian(sym.ravel(), mc, sc)
            cc.put(self.hyper_kind, layer, payload)
            cc.account(self.hyper_kind, layer, 8 * len(payload))
        elif cc.decoding:
            cc.account(self.hyper_kind, layer, 8 * len(cc.chunks[cc.cursor - 1].payload))
        else:
            cc.account(self.hyper_kind, layer, hyper_bits.value)
        h = self.hyper_dec(SparseTensor(hyper_cs, y_q), out=down_cs)

        mu_s, sigma_s, qge, qle, qgd, qld = self.entropy_params(ctx_d, h, lam_t)
        if cc.decoding:
            sym = rc.decode_gaussian(
                cc.take(self.kind, layer), rc.mu_to_code(mu_s.value).ravel(), rc.sigma_to_code(sigma_s.value).ravel()
            )
            cc.account(self.kind, layer, 8 * len(cc.chunks[cc.cursor - 1].payload))
            x_q = ad.Var(sym.reshape(len(down_cs), self.C).astype(self.store.dtype))
        else:
            scaled = ad.mul(ad.mul(xd.feats, ad.add(qge, 1.0)), ad.add(qle, 1.0))
            x_q = ad.straight_through_quantize(scaled, cc.training, cc.rng)
        if cc.mode == "encode":
            sym = _symbols(x_q)
            x_q = ad.Var(sym.astype(self.store.dtype))
        main_bits = ad.gaussian_bits(x_q, mu_s, sigma_s)
        if cc.mode == "encode":
            payload = rc.encode_gaussian(sym.ravel(), rc.mu_to_code(mu_s.value).ravel(), rc.sigma_to_code(sigma_s.value).ravel())
            cc.put(self.kind, layer, payload)
            cc.account(self.kind, layer, 8 * len(payload))
        elif not cc.decoding:
            cc.account(self.kind, layer, main_bits.value)
        x_hat_d = ad.mul(ad.mul(x_q, ad.add(qgd, 1.0)), ad.add(qld, 1.0))
        x_hat = self.up(SparseTensor(down_cs, x_hat_d), out=target)
        return x_hat, ad.add(hyper_bits, main_bits), x_q
