"""K-nearest-neighbour search over integer reference points.

Results are ordered by (squared distance, reference row); the reference rows
are in canonical order, so ties resolve identically on encoder and decoder.
The numba path buckets the references into a uniform grid and searches
expanding shells of cells; the fallback uses a k-d tree and re-resolves ties
with a radius query.  :func:`knn_exhaustive` is the O(N*M) oracle.
"""

import math

import numpy as np
from scipy.spatial import cKDTree

from ._accel import njit, use_numba


def _sq_dist(q, r):
    dx = q[:, None, 0] - r[None, :, 0]
    dy = q[:, None, 1] - r[None, :, 1]
    dz = q[:, None, 2] - r[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def knn_exhaustive(query, ref, k):
    """Reference implementation: full distance matrix, stable sort."""
    q = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    if len(r) == 0:
        raise ValueError("empty reference set")
    k = min(k, len(r))
    idx = np.empty((len(q), k), dtype=np.int64)
    d2 = np.empty((len(q), k), dtype=np.float64)
    for start in range(0, len(q), 256):
        block = _sq_dist(q[start : start + 256], r)
        order = np.argsort(block, axis=1, kind="stable")[:, :k]
        idx[start : start + 256] = order
        d2[start : start + 256] = np.take_along_axis(block, order, axis=1)
    return idx, np.sqrt(d2)


@njit
def _cell_key(cx, cy, cz):
    return ((cx + 1048576) << 42) | ((cy + 1048576) << 21) | (cz + 1048576)


@njit
def _knn_grid_kernel(q, r, k, cell, order, ukeys, starts, cmin, cmax, out_idx, out_d2):
    nq = q.shape[0]
    best_d = np.empty(k, dtype=np.float64)
    best_i = np.empty(k, dtype=np.int64)
    for qi in range(nq):
        qx = q[qi, 0]
        qy = q[qi, 1]
        qz = q[qi, 2]
        cx = int(math.floor(qx / cell))
        cy = int(math.floor(qy / cell))
        cz = int(math.floor(qz / cell))
        found = 0
        rmax = max(
            max(abs(cx - cmin[0]), abs(cmax[0] - cx)),
            max(max(abs(cy - cmin[1]), abs(cmax[1] - cy)), max(abs(cz - cmin[2]), abs(cmax[2] - cz))),
        )
        ring = 0
        while True:
            for ix in range(cx - ring, cx + ring + 1):
                for iy in range(cy - ring, cy + ring + 1):
                    for iz in range(cz - ring, cz + ring + 1):
                        if max(abs(ix - cx), max(abs(iy - cy), abs(iz - cz))) != ring:
                            continue
                        key = _cell_key(ix, iy, iz)
                        pos = np.searchsorted(ukeys, key)
                        if pos >= ukeys.shape[0] or ukeys[pos] != key:
                            continue
                        for j in range(starts[pos], starts[pos + 1]):
                            ri = order[j]
                            dx = qx - r[ri, 0]
                            dy = qy - r[ri, 1]
                            dz = qz - r[ri, 2]
                            d2 = dx * dx + dy * dy + dz * dz
                            if found == k:
                                if d2 > best_d[k - 1] or (d2 == best_d[k - 1] and ri > best_i[k - 1]):
                                    continue
                                slot = k - 1
                            else:
                                slot = found
                                found += 1
                            while slot > 0 and (
                                best_d[slot - 1] > d2 or (best_d[slot - 1] == d2 and best_i[slot - 1] > ri)
                            ):
                                best_d[slot] = best_d[slot - 1]
                                best_i[slot] = best_i[slot - 1]
                                slot -= 1
                            best_d[slot] = d2
                            best_i[slot] = ri
            if ring >= rmax:
                break
            if found == k:
                lo = min(qx - (cx - ring) * cell, (cx + ring + 1) * cell - qx)
                lo = min(lo, min(qy - (cy - ring) * cell, (cy + ring + 1) * cell - qy))
                lo = min(lo, min(qz - (cz - ring) * cell, (cz + ring + 1) * cell - qz))
                if best_d[k - 1] < lo * lo:
                    break
            ring += 1
        for j in range(k):
            out_idx[qi, j] = best_i[j]
            out_d2[qi, j] = best_d[j]


def _knn_grid(q, r, k):
    extent = r.max(axis=0) - r.min(axis=0) + 1.0
    cell = max(1.0, float(np.cbrt(np.prod(extent) * k / len(r))))
    cells = np.floor(r / cell).astype(np.int64)
    keys = ((cells[:, 0] + 1048576) << 42) | ((cells[:, 1] + 1048576) << 21) | (cells[:, 2] + 1048576)
    order = np.argsort(keys, kind="stable")
    skeys = keys[order]
    ukeys, starts = np.unique(skeys, return_index=True)
    starts = np.append(starts, len(skeys)).astype(np.int64)
    out_idx = np.empty((len(q), k), dtype=np.int64)
    out_d2 = np.empty((len(q), k), dtype=np.float64)
    _knn_grid_kernel(
        q, r, k, cell, order.astype(np.int64), ukeys, starts, cells.min(axis=0), cells.max(axis=0), out_idx, out_d2
    )
    return out_idx, np.sqrt(out_d2)


def _knn_kdtree(q, r, k):
    tree = cKDTree(r)
    _, first = tree.query(q, k=k)
    first = first.reshape(len(q), k)
    out_idx = np.empty((len(q), k), dtype=np.int64)
    out_d2 = np.empty((len(q), k), dtype=np.float64)
    kth = np.sqrt(_row_sq_dist(q, r[first[:, -1]]))
    for i, cand in enumerate(tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-12)):
        cand = np.asarray(cand, dtype=np.int64)
        d2 = _row_sq_dist(np.broadcast_to(q[i], (len(cand), 3)), r[cand])
        sel = np.lexsort((cand, d2))[:k]
        out_idx[i] = cand[sel]
        out_d2[i] = d2[sel]
    return out_idx, np.sqrt(out_d2)


def _row_sq_dist(a, b):
    dx = a[:, 0] - b[:, 0]
    dy = a[:, 1] - b[:, 1]
    dz = a[:, 2] - b[:, 2]
    return dx * dx + dy * dy + dz * dz


def knn(query, ref, k):
    """``(index, distance)`` arrays of shape ``(len(query), min(k, len(ref)))``."""
    q = np.ascontiguousarray(np.asarray(query, dtype=np.float64).reshape(-1, 3))
    r = np.ascontiguousarray(np.asarray(ref, dtype=np.float64).reshape(-1, 3))
    if len(r) == 0:
        raise ValueError("empty reference set")
    if k < 1:
        raise ValueError("k must be positive")
    k = min(k, len(r))
    if len(q) == 0:
        return np.zeros((0, k), np.int64), np.zeros((0, k), np.float64)
    if use_numba():
        return _knn_grid(q, r, k)
    return _knn_kdtree(q, r, k)
