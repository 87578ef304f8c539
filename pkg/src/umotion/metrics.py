"""Colour PSNR, D1/D2 geometry PSNR, bits per point and BD-rate."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .sparse import morton_keys

PSNR_CAP = 100.0


@dataclass
class RDPoint:
    bpp: float
    quality: float
    metric: str = "Y-PSNR"
    label: str = ""

    def __post_init__(self):
        if self.bpp < 0:
            raise ValueError("bpp must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def psnr_from_mse(mse, peak) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _match(orig_coords, recon_coords):
    ko = morton_keys(orig_coords)
    kr = morton_keys(recon_coords)
    if len(ko) != len(kr) or not np.array_equal(np.sort(ko), np.sort(kr)):
        raise ValueError("psnr_yuv needs identical geometry in both clouds")
    return np.argsort(ko, kind="stable"), np.argsort(kr, kind="stable")


def psnr_yuv(orig_coords, orig_yuv, recon_coords, recon_yuv, bitdepth=8):
    """``(Y, U, V, YUV)`` PSNRs over matched points; YUV = (6Y + U + V) / 8."""
    io, ir = _match(orig_coords, recon_coords)
    a = np.asarray(orig_yuv, dtype=np.float64)[io]
    b = np.asarray(recon_yuv, dtype=np.float64)[ir]
    peak = float((1 << bitdepth) - 1)
    mse = ((a - b) ** 2).mean(axis=0)
    y, u, v = (psnr_from_mse(m, peak) for m in mse)
    return y, u, v, combine_yuv(y, u, v)


def combine_yuv(y, u, v) -> float:
    return (6.0 * y + u + v) / 8.0


def _nn_sq(src, dst):
    d, idx = cKDTree(dst).query(src, k=1)
    return d * d, idx


def estimate_normals(points, k=16):
    """Unoriented PCA normals from the ``k`` nearest neighbours."""
    pts = np.asarray(points, dtype=np.float64)
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    idx = idx.reshape(len(pts), k)
    nb = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _check(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("geometry PSNR needs non-empty clouds")
    return a, b


def d1_mse(orig, recon):
    """Symmetric point-to-point MSE: the larger of the two directional means."""
    a, b = _check(orig, recon)
    return max(_nn_sq(b, a)[0].mean(), _nn_sq(a, b)[0].mean())


def psnr_d1(orig, recon, precision) -> float:
    return psnr_from_mse(d1_mse(orig, recon), math.sqrt(3.0) * ((1 << precision) - 1))


def d2_mse(orig, recon, k=16):
    """Point-to-plane MSE with errors projected on normals of the reference cloud.

    recon->orig uses the matched reference point's normal, orig->recon the
    reference point's own normal.
    """
    a, b = _check(orig, recon)
    na = estimate_normals(a, k)
    _, ia = _nn_sq(b, a)
    ba = (((b - a[ia]) * na[ia]).sum(axis=1) ** 2).mean()
    _, ib = _nn_sq(a, b)
    ab = (((a - b[ib]) * na).sum(axis=1) ** 2).mean()
    return max(ba, ab)


def psnr_d2(orig, recon, precision, k=16) -> float:
    return psnr_from_mse(d2_mse(orig, recon, k), math.sqrt(3.0) * ((1 << precision) - 1))


def bpp(total_bits, n_points) -> float:
    if n_points <= 0:
        raise ValueError("point count must be positive")
    return total_bits / n_points


def bd_rate(curve_a, curve_b) -> float:
    """Average rate change of B relative to A at equal quality, in percent.

    Cubic fits of log-rate against quality are integrated over the overlapping
    quality interval; negative values mean B needs fewer bits.
    """
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    lo, hi = max(qa.min(), qb.min()), min(qa.max(), qb.max())
    if hi <= lo:
        raise ValueError("R-D curves have no overlapping quality range")
    pa = np.polyint(np.polyfit(qa, np.log(ra), 3))
    pb = np.polyint(np.polyfit(qb, np.log(rb), 3))
    avg = ((np.polyval(pb, hi) - np.polyval(pb, lo)) - (np.polyval(pa, hi) - np.polyval(pa, lo))) / (hi - lo)
    return (math.exp(avg) - 1.0) * 100.0


def _curve(points):
    pts = [(p.bpp, p.quality) if isinstance(p, RDPoint) else tuple(p) for p in points]
    if len(pts) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    r = np.array([p[0] for p in pts], dtype=np.float64)
    q = np.array([p[1] for p in pts], dtype=np.float64)
    if (r <= 0).any():
        raise ValueError("rates must be positive")
    return r, q


def write_rd_jsonl(path, points, meta=None) -> None:
    with open(path, "w") as fh:
        if meta is not None:
            fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for p in points:
            fh.write(p.to_json() + "\n")


def read_rd_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "meta" in rec:
                continue
            out.append(RDPoint(**rec))
    return out
