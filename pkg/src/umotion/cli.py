"""Command-line entry point: ``umotion {synth,train,encode,decode,eval,ablate,report}``.

Every failure exits non-zero with one ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import logging
import os
import sys
import time

import numpy as np

from .bitstream import Frame, decode_sequence, encode_sequence
from .config import ConfigError, RunConfig, build_config, load_config
from .metrics import bd_rate, read_rd_jsonl, write_rd_jsonl
from .ply import PlyCloud, PlyError, read_ply, write_ply
from .pyramid import rgb_to_yuv_codes, yuv_codes_to_rgb
from .rangecoder import CorruptStream

log = logging.getLogger("umotion")

EXIT_USAGE, EXIT_CONFIG, EXIT_INPUT, EXIT_STREAM, EXIT_MODEL = 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, msg, code=EXIT_INPUT):
        super().__init__(msg)
        self.code = code


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


# -- sequence I/O -------------------------------------------------------------


def _ply_paths(inputs):
    paths = []
    for p in inputs:
        if os.path.isdir(p):
            found = sorted(glob.glob(os.path.join(p, "*.ply")))
            if not found:
                raise CliError(f"{p}: directory holds no .ply files")
            paths.extend(found)
        else:
            paths.append(p)
    if not paths:
        raise CliError("no input frames given")
    return paths


def load_frames(inputs, mode, precision):
    frames = []
    for path in _ply_paths(inputs):
        try:
            cloud = read_ply(path)
        except (OSError, PlyError) as exc:
            raise CliError(f"{path}: {exc}") from exc
        coords = np.rint(np.asarray(cloud.points, dtype=np.float64)).astype(np.int64)
        if coords.size and (coords.min() < 0 or coords.max() >= 1 << precision):
            raise CliError(f"{path}: coordinates outside the {precision}-bit cube")
        if mode == "attribute":
            if cloud.colors is None:
                raise CliError(f"{path}: attribute mode needs red/green/blue properties")
            frames.append(Frame(coords, rgb_to_yuv_codes(cloud.colors)))
        else:
            frames.append(Frame(coords))
    return frames


def save_frames(frames, out_dir, binary=False):
    os.makedirs(out_dir, exist_ok=True)
    for i, fr in enumerate(frames):
        colors = None if fr.attrs is None else yuv_codes_to_rgb(fr.attrs)
        write_ply(PlyCloud(fr.coords.astype(np.int32), colors), os.path.join(out_dir, f"frame_{i:03d}.ply"), binary)


def _model(cfg: RunConfig):
    from .train import load_model

    if not cfg.checkpoint:
        raise CliError("a checkpoint is required (--checkpoint)", EXIT_CONFIG)
    try:
        model = load_model(cfg.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"{cfg.checkpoint}: {exc}", EXIT_MODEL) from exc
    if model.cfg.mode != cfg.mode:
        raise CliError(f"checkpoint is a {model.cfg.mode}-mode model, run config says {cfg.mode}", EXIT_CONFIG)
    return model


def rate_report(frames, counts) -> list:
    """Per-layer bits per point split into motion, latent and hyper parts."""
    lines = []
    for i, (ef, n) in enumerate(zip(frames, counts)):
        if not ef.bits:
            continue
        per = {}
        for (kind, layer), bits in ef.bits.items():
            name = kind.lower()
            group = "hyper" if name.endswith("hyper") else ("motion" if name.startswith("motion") else name)
            per.setdefault(layer, {}).setdefault(group, 0.0)
            per[layer][group] += bits / n
        for layer in sorted(per):
            parts = " ".join(f"{g}={v:.4f}" for g, v in sorted(per[layer].items()))
            lines.append(f"frame {i} layer {layer}: {parts} bpp")
        lines.append(f"frame {i} total: {ef.rate_bits / n:.4f} bpp")
    return lines


# -- commands -------------------------------------------------------------------


def cmd_synth(args, cfg):
    from .synth import synth_sequence

    shift = tuple(float(v) for v in args.shift.split(","))
    if len(shift) != 3:
        raise CliError("--shift needs three comma-separated values", EXIT_USAGE)
    frames, motions = synth_sequence(args.kind, args.frames, args.points, cfg.precision, cfg.seed, shift, args.angle)
    out = cfg.output or "synth"
    os.makedirs(out, exist_ok=True)
    for i, (coords, rgb) in enumerate(frames):
        write_ply(PlyCloud(coords.astype(np.int32), rgb), os.path.join(out, f"frame_{i:03d}.ply"), args.binary)
    np.savez(os.path.join(out, "motion.npz"), **{f"frame_{i:03d}": m for i, m in enumerate(motions)})
    print(f"wrote {len(frames)} frames ({', '.join(str(len(c)) for c, _ in frames)} points) to {out}")


def cmd_train(args, cfg):
    from .codec import UMotionCodec
    from .train import frame_pairs, load_model, save_model, train

    cfg.check_paths(["inputs"])
    seqs = [load_frames([p], cfg.mode, cfg.precision) for p in cfg.inputs]
    if cfg.checkpoint and os.path.exists(cfg.checkpoint) and args.resume:
        model = load_model(cfg.checkpoint)
    else:
        model = UMotionCodec(cfg.codec_config(), seed=cfg.seed)
    pairs = frame_pairs(seqs, cfg.mode, cfg.precision, model.cfg.depth)
    hist = train(model, pairs, cfg.steps, lr=cfg.lr, seed=cfg.seed, time_budget=args.time_budget)
    out = cfg.output or cfg.checkpoint or "model.npz"
    save_model(out, model, {"steps": len(hist.losses), "seed": cfg.seed})
    print(f"trained {len(hist.losses)} steps in {hist.seconds:.0f}s, final loss {hist.losses[-1]:.4f}; saved {out}")


def cmd_encode(args, cfg):
    cfg.check_paths()
    model = _model(cfg)
    frames = load_frames(cfg.inputs, cfg.mode, cfg.precision)
    t0 = time.perf_counter()
    res = encode_sequence(model, frames, np.float32(cfg.lam).item(), args.zero_motion)
    out = cfg.output or "out.umot"
    with open(out, "wb") as fh:
        fh.write(res.data)
    for line in rate_report(res.frames, [len(f.coords) for f in res.recons]):
        print(line)
    print(f"wrote {out}: {len(res.data)} bytes, sha256 {_sha(res.data)}, {time.perf_counter() - t0:.1f}s")
    if args.recon:
        save_frames(res.recons, args.recon)


def cmd_decode(args, cfg):
    cfg.check_paths(["checkpoint"])
    model = _model(cfg)
    src = args.stream
    try:
        with open(src, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CliError(f"{src}: {exc.strerror}") from exc
    frames = decode_sequence(model, data)
    out = cfg.output or "decoded"
    save_frames(frames, out, args.binary)
    digest = hashlib.sha256(b"".join(f.coords.tobytes() + (b"" if f.attrs is None else f.attrs.tobytes()) for f in frames))
    print(f"decoded {len(frames)} frames to {out}, content sha256 {digest.hexdigest()[:16]}")


def _rd(model, frames, lams, label, zero_motion=False):
    from .experiments import rd_curve

    return rd_curve(model, frames, [np.float32(v).item() for v in lams], zero_motion, label)


def cmd_eval(args, cfg):
    cfg.check_paths()
    model = _model(cfg)
    frames = load_frames(cfg.inputs, cfg.mode, cfg.precision)
    pts = _rd(model, frames, cfg.lams, "u-motion")
    out = cfg.output or "rd.jsonl"
    write_rd_jsonl(out, pts, {"checkpoint": cfg.checkpoint, "inputs": cfg.inputs})
    for p in pts:
        print(f"{p.label}: {p.bpp:.4f} bpp, {p.metric} {p.quality:.3f} dB")
    print(f"wrote {out}")


def cmd_ablate(args, cfg):
    from .experiments import no_bottom_up_variant

    cfg.check_paths()
    model = _model(cfg)
    frames = load_frames(cfg.inputs, cfg.mode, cfg.precision)
    full = _rd(model, frames, cfg.lams, "full")
    variants = {"zero-motion": _rd(model, frames, cfg.lams, "zero-motion", True)}
    if cfg.mode == "attribute":
        variants["no-bottom-up"] = _rd(no_bottom_up_variant(model), frames, cfg.lams, "no-bottom-up")
    out = cfg.output or "ablation.jsonl"
    write_rd_jsonl(out, full + [p for pts in variants.values() for p in pts], {"checkpoint": cfg.checkpoint})
    for name, pts in variants.items():
        for a, b in zip(full, pts):
            print(f"{name}: bpp {a.bpp:.4f} -> {b.bpp:.4f}, {a.metric} {a.quality:.3f} -> {b.quality:.3f}")
        if len(pts) >= 4:
            try:
                print(f"{name}: BD-rate vs full {bd_rate(full, pts):+.2f}%")
            except ValueError as exc:
                print(f"{name}: BD-rate unavailable ({exc})")
    print(f"wrote {out}")


def cmd_report(args, cfg):
    try:
        a, b = read_rd_jsonl(args.anchor), read_rd_jsonl(args.test)
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"cannot read R-D files: {exc}") from exc
    if args.label_a:
        a = [p for p in a if p.label == args.label_a]
    if args.label_b:
        b = [p for p in b if p.label == args.label_b]
    print(f"BD-rate: {bd_rate(a, b):+.3f}%")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="umotion", description="Learned point-cloud video codec with U-structured motion coding.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, inputs=True):
        p.add_argument("--config", help="YAML run configuration; flags override it")
        p.add_argument("--mode", choices=["attribute", "geometry"])
        p.add_argument("--precision", type=int)
        p.add_argument("--depth", type=int)
        p.add_argument("--motion-layers", dest="motion_layers")
        p.add_argument("--lossless-layers", dest="lossless_layers", type=int)
        p.add_argument("--lam", type=float)
        p.add_argument("--lams")
        p.add_argument("--k", type=int)
        p.add_argument("--alpha-init", dest="alpha_init", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--checkpoint")
        p.add_argument("-o", "--output")
        if inputs:
            p.add_argument("inputs", nargs="*", help="PLY files or directories (sorted by name)")

    p = sub.add_parser("synth", help="write a synthetic PLY sequence with a motion sidecar")
    common(p, inputs=False)
    p.add_argument("--kind", default="translate", choices=["translate", "rotate", "articulate"])
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--shift", default="4,0,0")
    p.add_argument("--angle", type=float, default=5.0)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; each input is one sequence directory")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--time-budget", dest="time_budget", type=float)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="PLY sequence -> .umot")
    common(p)
    p.add_argument("--zero-motion", dest="zero_motion", action="store_true")
    p.add_argument("--recon", help="also write the encoder-side reconstruction here")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help=".umot -> PLY sequence")
    common(p, inputs=False)
    p.add_argument("stream")
    p.add_argument("--binary", action="store_true")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="R-D points over the lambda list as JSON lines")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full model vs zero-motion and no-bottom-up variants")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="BD-rate of TEST against ANCHOR")
    p.add_argument("anchor")
    p.add_argument("test")
    p.add_argument("--label-a", dest="label_a")
    p.add_argument("--label-b", dest="label_b")
    p.set_defaults(func=cmd_report, config=None)
    return ap


_CFG_KEYS = ("mode", "precision", "depth", "motion_layers", "lossless_layers", "lam", "lams", "k", "alpha_init", "seed", "checkpoint", "output", "steps", "lr")


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in _CFG_KEYS}
    inputs = getattr(args, "inputs", None)
    if inputs:
        overrides["inputs"] = list(inputs)
    if getattr(args, "config", None):
        return load_config(args.config, overrides)
    return build_config({}, overrides)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args) if args.command != "report" else None
        args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorruptStream as exc:
        print(f"error: stream: {exc}", file=sys.stderr)
        return EXIT_STREAM
    except (OSError, ValueError) as exc:
        print(f"error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
