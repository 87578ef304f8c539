"""Single-P-frame training with a lossless reference, and checkpoint I/O."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .bitstream import Frame
from .codec import CodecConfig, UMotionCodec
from .entropy import LAMBDA_MAX, LAMBDA_MIN, CodingSession
from .nn import Adam, ParamStore, PlateauDecay, forward_backward, load_checkpoint, save_checkpoint
from .pyramid import build_pyramid

log = logging.getLogger(__name__)


def save_model(path, model: UMotionCodec, extra: dict | None = None) -> None:
    meta = {"config": model.cfg.to_dict(), "format": "umotion-codec"}
    meta.update(extra or {})
    save_checkpoint(path, model.store, meta)


def load_model(path) -> UMotionCodec:
    params, meta = load_checkpoint(path)
    if meta.get("format") != "umotion-codec":
        raise ValueError(f"{path}: not a codec checkpoint")
    cfg = CodecConfig.from_dict(meta["config"])
    model = UMotionCodec(cfg)
    missing = set(model.store.params) ^ set(params)
    if missing:
        raise ValueError(f"{path}: parameter set does not match the config ({sorted(missing)[:3]}...)")
    for name, arr in params.items():
        if model.store.params[name].shape != arr.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        model.store.params[name][...] = arr
    return model


def frame_pairs(sequences, mode, precision=6, depth=5):
    """Consecutive ``(reference, current)`` pyramids from lists of frames."""
    pairs = []
    for seq in sequences:
        pyr = []
        for fr in seq:
            fr = Frame(fr.coords, None if mode == "geometry" else fr.attrs).canonical(precision)
            attrs = None if fr.attrs is None else fr.attrs.astype(np.float64)
            pyr.append(build_pyramid(fr.coords, attrs, precision, depth))
        pairs.extend(zip(pyr[:-1], pyr[1:]))
    if not pairs:
        raise ValueError("training needs at least one sequence with two frames")
    return pairs


def sample_lambda(rng) -> float:
    return float(math.exp(rng.uniform(math.log(LAMBDA_MIN), math.log(LAMBDA_MAX))))


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    bpp: list = field(default_factory=list)
    lams: list = field(default_factory=list)
    seconds: float = 0.0
    stopped: str = ""


def train_step(model: UMotionCodec, ref, cur, lam, rng):
    """One forward/backward pass; returns the loss value and the frame result."""
    with ad.Tape() as tape:
        cc = CodingSession("train", rng=rng)
        if model.cfg.mode == "attribute":
            res = model.attribute_frame(cc, cur, ref, cur, lam)
        else:
            res = model.geometry_frame(cc, ref, cur)
        forward_backward(tape, res.loss, model.store)
    return float(res.loss.value), res


def train(model: UMotionCodec, pairs, steps, lr=1e-3, seed=0, lam=None, time_budget=None, log_every=50, clip=5.0, opt=None):
    """Adam with plateau decay; λ resampled each step unless fixed.

    Stops early when ``time_budget`` seconds elapse.  A non-finite loss
    restores the last good parameters and ends training.
    """
    rng = np.random.default_rng(seed)
    opt = opt or Adam(model.store, lr=lr, clip=clip)
    sched = PlateauDecay(opt, patience=150)
    hist = TrainLog()
    start = time.perf_counter()
    good = {k: v.copy() for k, v in model.store.params.items()}
    for step in range(steps):
        ref, cur = pairs[rng.integers(len(pairs))]
        if model.cfg.mode == "attribute":
            lam_i = sample_lambda(rng) if lam is None else float(lam)
        else:
            lam_i = model.cfg.lam
        try:
            loss, res = train_step(model, ref, cur, lam_i, rng)
        except FloatingPointError as exc:
            log.error("step %d: %s; restoring last good parameters", step, exc)
            for k, v in good.items():
                model.store.params[k][...] = v
            hist.stopped = "diverged"
            break
        opt.step()
        sched.update(loss)
        hist.losses.append(loss)
        hist.lams.append(lam_i)
        hist.bpp.append(float(res.rate.value) / len(cur.top))
        if step % 100 == 0:
            good = {k: v.copy() for k, v in model.store.params.items()}
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f bpp %.3f lam %.0f lr %.1e", step, loss, hist.bpp[-1], lam_i, opt.lr)
        if time_budget is not None and time.perf_counter() - start > time_budget:
            hist.stopped = "time"
            break
    hist.seconds = time.perf_counter() - start
    return hist
