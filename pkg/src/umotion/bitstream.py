"""The ``.umot`` container and sequence-level encode/decode.

Layout (little-endian)::

    "UMOT" u16 version, u8 mode, 32-byte model hash, f32 lambda, u8 flags, u32 frames
    frame:  u8 type (0 = I, 1 = P), u32 chunk count, chunks
    chunk:  u32 length, payload = [u8 kind][u8 layer][data], u32 crc32(payload)

I-frames are stored losslessly.  Every P-frame carries the CRC of the
reference it was predicted from and of its own reconstruction, so a wrong
reference or a decoder desync is reported instead of silently producing
garbage.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import rangecoder as rc
from .codec import UMotionCodec, _pack_coords, _unpack_coords, frame_crc
from .entropy import Chunk, ChunkKind, CodingSession
from .pyramid import build_pyramid
from .rangecoder import CorruptStream
from .sparse import build_tensor

MAGIC = b"UMOT"
VERSION = 1
MODES = {"attribute": 0, "geometry": 1}
FLAG_ZERO_MOTION = 1
FRAME_I, FRAME_P = 0, 1
GEOMETRY = 9
RATE_KINDS = {ChunkKind.HEADER, ChunkKind.BASE, ChunkKind.OCCUPANCY, ChunkKind.MOTION_HYPER, ChunkKind.MOTION, ChunkKind.LATENT_HYPER, ChunkKind.LATENT}
_HEAD = struct.Struct("<4sHB32sfBI")


class ReferenceMismatch(CorruptStream):
    pass


@dataclass
class Frame:
    coords: np.ndarray
    attrs: np.ndarray | None = None

    def canonical(self, precision) -> "Frame":
        """Deduplicated, Morton-ordered copy (colours averaged and rounded)."""
        feats = np.zeros((len(self.coords), 1)) if self.attrs is None else np.asarray(self.attrs, np.float64)
        t = build_tensor(self.coords, feats, precision)
        attrs = None if self.attrs is None else np.clip(np.rint(t.F), 0, 255).astype(np.int64)
        return Frame(t.coords.copy(), attrs)


@dataclass
class EncodedFrame:
    ftype: int
    chunks: list
    bits: dict = field(default_factory=dict)

    @property
    def rate_bits(self) -> int:
        return 8 * sum(len(c.payload) for c in self.chunks if c.kind in RATE_KINDS)


@dataclass
class Container:
    mode: str
    digest: bytes
    lam: float
    flags: int
    frames: list


def write_container(c: Container) -> bytes:
    out = bytearray(_HEAD.pack(MAGIC, VERSION, MODES[c.mode], c.digest, c.lam, c.flags, len(c.frames)))
    for fr in c.frames:
        out += struct.pack("<BI", fr.ftype, len(fr.chunks))
        for ch in fr.chunks:
            payload = struct.pack("<BB", ch.kind, ch.layer) + ch.payload
            out += struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))
    return bytes(out)


def read_container(data: bytes) -> Container:
    if len(data) < _HEAD.size:
        raise CorruptStream("truncated container header")
    magic, version, mode, digest, lam, flags, nframes = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptStream("not a .umot stream")
    if version != VERSION:
        raise CorruptStream(f"unsupported stream version {version}")
    names = {v: k for k, v in MODES.items()}
    if mode not in names:
        raise CorruptStream(f"unknown mode byte {mode}")
    pos = _HEAD.size
    frames = []
    try:
        for _ in range(nframes):
            ftype, nchunks = struct.unpack_from("<BI", data, pos)
            pos += 5
            chunks = []
            for _ in range(nchunks):
                (length,) = struct.unpack_from("<I", data, pos)
                pos += 4
                if length < 2 or pos + length + 4 > len(data):
                    raise CorruptStream("truncated chunk")
                payload = data[pos : pos + length]
                pos += length
                (crc,) = struct.unpack_from("<I", data, pos)
                pos += 4
                if zlib.crc32(payload) != crc:
                    raise CorruptStream("chunk CRC mismatch")
                chunks.append(Chunk(payload[0], payload[1], bytes(payload[2:])))
            frames.append(EncodedFrame(ftype, chunks))
    except struct.error as exc:
        raise CorruptStream("truncated stream") from exc
    if pos != len(data):
        raise CorruptStream("trailing bytes after last frame")
    return Container(names[mode], digest, float(lam), flags, frames)


# -- frames -----------------------------------------------------------------------


def encode_iframe(frame: Frame, precision: int) -> EncodedFrame:
    n = len(frame.coords)
    chunks = [
        Chunk(ChunkKind.HEADER, precision, struct.pack("<I", n)),
        Chunk(GEOMETRY, precision, rc.encode_uniform(_pack_coords(frame.coords, precision), 3 * precision)),
    ]
    if frame.attrs is not None:
        chunks.append(Chunk(ChunkKind.BASE, precision, rc.encode_uniform(np.asarray(frame.attrs).ravel(), 8)))
    return EncodedFrame(FRAME_I, chunks)


def decode_iframe(ef: EncodedFrame, precision: int, with_attrs: bool) -> Frame:
    it = iter(ef.chunks)
    try:
        (n,) = struct.unpack("<I", _expect(next(it), ChunkKind.HEADER))
        coords = _unpack_coords(rc.decode_uniform(_expect(next(it), GEOMETRY), n, 3 * precision), precision)
        attrs = rc.decode_uniform(_expect(next(it), ChunkKind.BASE), n * 3, 8).reshape(n, 3) if with_attrs else None
    except (StopIteration, struct.error) as exc:
        raise CorruptStream("incomplete I-frame") from exc
    return Frame(coords, attrs)


def _expect(ch: Chunk, kind) -> bytes:
    if ch.kind != kind:
        raise CorruptStream(f"expected chunk kind {kind}, found {ch.kind}")
    return ch.payload


def _pyramid(frame: Frame, cfg, with_attrs=True):
    attrs = frame.attrs if with_attrs else None
    return build_pyramid(frame.coords, None if attrs is None else np.asarray(attrs, np.float64), cfg.precision, cfg.depth)


def encode_pframe(model: UMotionCodec, frame: Frame, ref: Frame, lam: float, zero_motion=False):
    """Returns ``(EncodedFrame, reconstructed Frame, FrameResult)``."""
    cfg = model.cfg
    cc = CodingSession("encode")
    cc.put(ChunkKind.CHECK, 0, struct.pack("<I", frame_crc(ref.coords, ref.attrs)))
    ref_pyr = _pyramid(ref, cfg)
    if cfg.mode == "attribute":
        cc.put(GEOMETRY, cfg.high, struct.pack("<I", len(frame.coords)) + rc.encode_uniform(_pack_coords(frame.coords, cfg.precision), 3 * cfg.precision))
        cur = _pyramid(frame, cfg)
        res = model.attribute_frame(cc, cur, ref_pyr, cur, lam, zero_motion)
        recon = Frame(cur.top.coords.copy(), res.recon_attrs)
    else:
        cur = _pyramid(frame, cfg, with_attrs=False)
        res = model.geometry_frame(cc, ref_pyr, cur, zero_motion=zero_motion)
        recon = Frame(np.asarray(res.recon_coords).copy(), None)
    cc.put(ChunkKind.CHECK, 1, struct.pack("<I", frame_crc(recon.coords, recon.attrs)))
    return EncodedFrame(FRAME_P, cc.chunks, cc.bits), recon, res


def decode_pframe(model: UMotionCodec, ef: EncodedFrame, ref: Frame, lam: float, zero_motion=False) -> Frame:
    cfg = model.cfg
    cc = CodingSession("decode", chunks=list(ef.chunks))
    (ref_crc,) = struct.unpack("<I", cc.take(ChunkKind.CHECK, 0))
    if ref_crc != frame_crc(ref.coords, ref.attrs):
        raise ReferenceMismatch("reference frame does not match the one used by the encoder")
    ref_pyr = _pyramid(ref, cfg)
    if cfg.mode == "attribute":
        geo = cc.take(GEOMETRY, cfg.high)
        (n,) = struct.unpack_from("<I", geo)
        coords = _unpack_coords(rc.decode_uniform(geo[4:], n, 3 * cfg.precision), cfg.precision)
        geom = build_pyramid(coords, None, cfg.precision, cfg.depth)
        res = model.attribute_frame(cc, geom, ref_pyr, None, lam, zero_motion)
        recon = Frame(geom.top.coords.copy(), res.recon_attrs)
    else:
        res = model.geometry_frame(cc, ref_pyr, None, zero_motion=zero_motion)
        recon = Frame(np.asarray(res.recon_coords).copy(), None)
    (rec_crc,) = struct.unpack("<I", cc.take(ChunkKind.CHECK, 1))
    if rec_crc != frame_crc(recon.coords, recon.attrs):
        raise CorruptStream("decoded frame does not match the encoder reconstruction (desync)")
    if cc.cursor != len(cc.chunks):
        raise CorruptStream("unconsumed chunks at end of frame")
    ef.bits = cc.bits
    return recon


# -- sequences -------------------------------------------------------------------


@dataclass
class SequenceResult:
    data: bytes
    recons: list
    frames: list
    results: list

    def pframe_bpp(self, n_points) -> list:
        return [ef.rate_bits / n for ef, n in zip(self.frames, n_points) if ef.ftype == FRAME_P]


def encode_sequence(model: UMotionCodec, frames, lam: float, zero_motion=False) -> SequenceResult:
    """First frame intra (lossless), the rest predicted from the previous reconstruction."""
    cfg = model.cfg
    geo = cfg.mode == "geometry"
    # the header stores lambda as f32; encode with exactly what the decoder will read
    lam = float(np.float32(lam))
    frames = [Frame(f.coords, None if geo else f.attrs).canonical(cfg.precision) for f in frames]
    encoded, recons, results = [], [], []
    for i, fr in enumerate(frames):
        if i == 0:
            encoded.append(encode_iframe(fr, cfg.precision))
            recons.append(fr)
            results.append(None)
            continue
        ef, rec, res = encode_pframe(model, fr, recons[-1], lam, zero_motion)
        encoded.append(ef)
        recons.append(rec)
        results.append(res)
    flags = FLAG_ZERO_MOTION if zero_motion else 0
    data = write_container(Container(cfg.mode, model.digest(), lam, flags, encoded))
    return SequenceResult(data, recons, encoded, results)


def decode_sequence(model: UMotionCodec, data: bytes) -> list:
    c = read_container(data)
    if c.mode != model.cfg.mode:
        raise CorruptStream(f"stream is {c.mode}-mode, model is {model.cfg.mode}-mode")
    if c.digest != model.digest():
        raise CorruptStream("model hash mismatch: stream was produced with a different checkpoint or config")
    out = []
    zero_motion = bool(c.flags & FLAG_ZERO_MOTION)
    for i, ef in enumerate(c.frames):
        if ef.ftype == FRAME_I:
            out.append(decode_iframe(ef, model.cfg.precision, c.mode == "attribute"))
        elif ef.ftype == FRAME_P:
            if not out:
                raise CorruptStream("P-frame without a reference")
            out.append(decode_pframe(model, ef, out[-1], c.lam, zero_motion))
        else:
            raise CorruptStream(f"unknown frame type {ef.ftype}")
    return out
