"""R-D evaluation, ablation variants and motion-accuracy measurement."""

from __future__ import annotations

import copy

import numpy as np

from .bitstream import Frame, encode_sequence
from .codec import UMotionCodec
from .metrics import RDPoint, psnr_d1, psnr_d2, psnr_yuv


def evaluate(model: UMotionCodec, frames, lam, zero_motion=False, label=""):
    """Encode a sequence and report mean P-frame bpp and quality.

    Returns a dict with ``bpp``, quality fields, the per-layer bit split and
    the :class:`~umotion.bitstream.SequenceResult`.
    """
    res = encode_sequence(model, frames, lam, zero_motion)
    canon = [Frame(f.coords, None if model.cfg.mode == "geometry" else f.attrs).canonical(model.cfg.precision) for f in frames]
    bpps, ys, yuvs, d1s, d2s = [], [], [], [], []
    layer_bits = {}
    for ef, orig, rec in zip(res.frames[1:], canon[1:], res.recons[1:]):
        bpps.append(ef.rate_bits / len(orig.coords))
        for key, v in ef.bits.items():
            layer_bits[key] = layer_bits.get(key, 0.0) + v / len(orig.coords)
        if model.cfg.mode == "attribute":
            y, _, _, yuv = psnr_yuv(orig.coords, orig.attrs, rec.coords, rec.attrs)
            ys.append(y)
            yuvs.append(yuv)
        else:
            d1s.append(psnr_d1(orig.coords, rec.coords, model.cfg.precision))
            d2s.append(psnr_d2(orig.coords, rec.coords, model.cfg.precision))
    n = max(len(bpps), 1)
    out = {
        "lam": lam,
        "bpp": float(np.mean(bpps)),
        "layer_bpp": {f"{k[0]}@{k[1]}": v / n for k, v in sorted(layer_bits.items(), key=lambda kv: (kv[0][1], kv[0][0]))},
        "result": res,
        "label": label,
    }
    if model.cfg.mode == "attribute":
        out.update(y_psnr=float(np.mean(ys)), yuv_psnr=float(np.mean(yuvs)))
    else:
        out.update(d1_psnr=float(np.mean(d1s)), d2_psnr=float(np.mean(d2s)))
    return out


def rd_curve(model, frames, lams, zero_motion=False, label=""):
    pts = []
    for lam in lams:
        ev = evaluate(model, frames, lam, zero_motion, label)
        q = ev["y_psnr"] if model.cfg.mode == "attribute" else ev["d1_psnr"]
        metric = "Y-PSNR" if model.cfg.mode == "attribute" else "D1-PSNR"
        pts.append(RDPoint(ev["bpp"], q, metric, label or f"lam={lam:g}"))
    return pts


def ablation_zero_motion(model, frames, lams):
    """Same checkpoint, motion forced to zero and no motion chunks written."""
    return rd_curve(model, frames, lams, zero_motion=True, label="zero-motion")


def no_bottom_up_variant(model: UMotionCodec) -> UMotionCodec:
    """A model sharing the parameters but coding e_l = e_d,l directly."""
    cfg = copy.deepcopy(model.cfg)
    cfg.bottom_up = False
    return UMotionCodec(cfg, store=model.store)


def ablation_no_bottom_up(model, frames, lams):
    return rd_curve(no_bottom_up_variant(model), frames, lams, label="no-bottom-up")


def decoded_motion(model, frames, lam):
    """Decoded motion fields per P-frame: a list of ``{level: (coords, m)}``."""
    res = encode_sequence(model, frames, lam)
    out = []
    for r in res.results[1:]:
        out.append({lv: (m.coords.copy(), np.asarray(m.F, dtype=np.float64).copy()) for lv, m in r.motion.items()})
    return out


def motion_error(model, frames, gt_backward, lam, level=None):
    """Median decoded motion and its distance to the ground truth at ``level``.

    ``gt_backward`` holds the full-resolution backward displacement of every
    frame; at layer ``l`` it is expressed in that layer's voxel units
    (divided by ``2^(H-l)``).  ``level`` defaults to the finest coded motion layer.
    """
    cfg = model.cfg
    level = max(cfg.motion_layers) if level is None else level
    scale = 2.0 ** (cfg.high - level)
    fields = decoded_motion(model, frames, lam)
    medians, errs = [], []
    for t, fld in enumerate(fields, start=1):
        _, m = fld[level]
        med = np.median(m, axis=0)
        gt = np.median(np.asarray(gt_backward[t]), axis=0) / scale
        medians.append(med)
        errs.append(float(np.linalg.norm(med - gt)))
    return {"level": level, "median": np.array(medians), "error": np.array(errs), "scale": scale}
