"""Reverse-mode automatic differentiation on numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :meth:`Tape.backward` walks them in reverse.  Outside a tape the same
functions just compute values, which is what inference uses.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import sparse as sp
from scipy import special

_TAPES: list["Tape"] = []

LN2 = math.log(2.0)


class Var:
    """An array value with an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, item):
        return getitem(self, item)


class Tape:
    """Records differentiable operations for one backward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[tuple[str, Var]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def backward(self, loss: Var) -> None:
        value = np.asarray(loss.value)
        if value.size != 1:
            raise ValueError("loss must be a scalar")
        if not np.isfinite(value).all():
            raise FloatingPointError(f"non-finite loss {float(value.reshape(-1)[0])}")
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
                node._backward = None


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def leaf(value, name=None) -> Var:
    """A differentiable input; registered on the active tape under ``name``."""
    v = Var(value, requires_grad=True)
    tape = active_tape()
    if tape is not None and name is not None:
        tape.leaves.append((name, v))
    return v


def _node(out_value, parents, backward) -> Var:
    tape = active_tape()
    if tape is not None and any(isinstance(p, Var) and p.requires_grad for p in parents):
        out = Var(out_value, requires_grad=True)
        out._backward = backward
        tape.nodes.append(out)
        return out
    return Var(out_value)


def _acc(v, g) -> None:
    if isinstance(v, Var) and v.requires_grad:
        if v.grad is None:
            v.grad = np.array(g, dtype=v.value.dtype, copy=True)
        else:
            v.grad = v.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def _pair(a, b):
    """Operand values; bare Python/NumPy scalars adopt the other operand's float dtype."""
    av, bv = value(a), value(b)
    if isinstance(a, (int, float, np.number)) and bv.dtype.kind == "f":
        av = np.asarray(a, dtype=bv.dtype)
    elif isinstance(b, (int, float, np.number)) and av.dtype.kind == "f":
        bv = np.asarray(b, dtype=av.dtype)
    return av, bv


def add(a, b):
    av, bv = _pair(a, b)

    def bw(g):
        _acc(a, _unbroadcast(g, av.shape))
        _acc(b, _unbroadcast(g, bv.shape))

    return _node(av + bv, (a, b), bw)


def sub(a, b):
    av, bv = _pair(a, b)

    def bw(g):
        _acc(a, _unbroadcast(g, av.shape))
        _acc(b, _unbroadcast(-g, bv.shape))

    return _node(av - bv, (a, b), bw)


def mul(a, b):
    av, bv = _pair(a, b)

    def bw(g):
        _acc(a, _unbroadcast(g * bv, av.shape))
        _acc(b, _unbroadcast(g * av, bv.shape))

    return _node(av * bv, (a, b), bw)


def div(a, b):
    av, bv = _pair(a, b)
    out = av / bv

    def bw(g):
        _acc(a, _unbroadcast(g / bv, av.shape))
        _acc(b, _unbroadcast(-g * out / bv, bv.shape))

    return _node(out, (a, b), bw)


def neg(a):
    return _node(-value(a), (a,), lambda g: _acc(a, -g))


def relu(a):
    av = value(a)
    mask = av > 0
    return _node(av * mask, (a,), lambda g: _acc(a, g * mask))


def sigmoid(a):
    out = special.expit(value(a))
    return _node(out, (a,), lambda g: _acc(a, g * out * (1 - out)))


def tanh(a):
    out = np.tanh(value(a))
    return _node(out, (a,), lambda g: _acc(a, g * (1 - out * out)))


def exp(a):
    out = np.exp(value(a))
    return _node(out, (a,), lambda g: _acc(a, g * out))


def log(a):
    av = value(a)
    return _node(np.log(av), (a,), lambda g: _acc(a, g / av))


def softplus(a):
    av = value(a)
    out = np.logaddexp(0, av).astype(av.dtype, copy=False)
    return _node(out, (a,), lambda g: _acc(a, g * special.expit(av)))


def square(a):
    av = value(a)
    return _node(av * av, (a,), lambda g: _acc(a, 2 * g * av))


def sqrt(a):
    out = np.sqrt(value(a))
    return _node(out, (a,), lambda g: _acc(a, g / (2 * out)))


# -- reductions and shape ----------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001
    av = value(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, av.shape))

    return _node(np.sum(av, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), np.asarray(1.0 / max(n, 1), dtype=av.dtype))


def reshape(a, shape):
    av = value(a)
    return _node(av.reshape(shape), (a,), lambda g: _acc(a, g.reshape(av.shape)))


def getitem(a, item):
    av = value(a)

    def bw(g):
        full = np.zeros_like(av)
        full[item] = g
        _acc(a, full)

    return _node(av[item], (a,), bw)


def concat(xs, axis=1):
    vals = [value(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        for x, gi in zip(xs, np.split(g, sizes, axis=axis)):
            _acc(x, gi)

    return _node(np.concatenate(vals, axis=axis), tuple(xs), bw)


def matmul(a, b):
    av, bv = value(a), value(b)

    def bw(g):
        _acc(a, g @ bv.T)
        _acc(b, av.T @ g)

    return _node(av @ bv, (a, b), bw)


# -- row gather / scatter (sparse tensor plumbing) ---------------------------


def take_rows(a, idx, unique=False):
    """``a[idx]``; pass ``unique=True`` when ``idx`` has no repeats."""
    av = value(a)

    def bw(g):
        full = np.zeros_like(av)
        if unique:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _acc(a, full)

    return _node(av[idx], (a,), bw)


def scatter_rows(a, idx, n):
    """Rows of ``a`` placed at distinct positions ``idx`` of an ``n``-row zero array."""
    av = value(a)
    out = np.zeros((n,) + av.shape[1:], dtype=av.dtype)
    out[idx] = av
    return _node(out, (a,), lambda g: _acc(a, g[idx]))


def segment_sum(a, seg, n):
    av = value(a)
    out = np.zeros((n,) + av.shape[1:], dtype=av.dtype)
    np.add.at(out, seg, av)
    return _node(out, (a,), lambda g: _acc(a, g[seg]))


# -- fused primitives --------------------------------------------------------


class KernelMap:
    """A sparse-convolution kernel map ``(in_idx, out_idx, tap)`` grouped by tap.

    Per-tap row groups and the equivalent selection matrix are derived
    lazily and kept, so a map cached on a coordinate set is analysed once.
    """

    # above this fill ratio one big matmul + sparse sum beats per-tap products
    DENSE_FILL = 0.4

    def __init__(self, in_idx, out_idx, tap, n_in, n_out, ntap):
        self.in_idx, self.out_idx, self.tap = in_idx, out_idx, tap
        self.n_in, self.n_out, self.ntap = n_in, n_out, ntap
        self._groups = None
        self._mat = None

    def __iter__(self):
        return iter((self.in_idx, self.out_idx, self.tap))

    def __len__(self):
        return len(self.in_idx)

    @property
    def fill(self) -> float:
        return len(self.in_idx) / max(self.n_in * self.ntap, 1)

    @property
    def groups(self):
        if self._groups is None:
            bounds = np.searchsorted(self.tap, np.arange(self.ntap + 1))
            self._groups = [
                (k, self.in_idx[bounds[k] : bounds[k + 1]], self.out_idx[bounds[k] : bounds[k + 1]])
                for k in range(self.ntap)
                if bounds[k + 1] > bounds[k]
            ]
        return self._groups

    def matrix(self, dtype):
        """``A`` with ``out = A @ (x @ W_all).reshape(n_in * ntap, cout)``."""
        if self._mat is None or self._mat[0].dtype != dtype:
            A = sp.csr_matrix(
                (np.ones(len(self.in_idx), dtype=dtype), (self.out_idx, self.in_idx * self.ntap + self.tap)),
                shape=(self.n_out, self.n_in * self.ntap),
            )
            self._mat = (A, A.T.tocsr())
        return self._mat


def conv_gather(x, w, b, in_idx, out_idx=None, tap=None, n_out=None):
    """Sparse convolution from a precomputed kernel map.

    ``out[o] = b + sum over (i, o, k) in the map of x[i] @ w[k]``.  The map
    is either a :class:`KernelMap` passed as ``in_idx`` or tap-grouped
    ``in_idx, out_idx, tap`` arrays with ``n_out``.  Sparse maps run tap by tap: within one tap every row occurs at
    most once, so each is a gather, a matmul and a collision-free
    scatter-add.  Dense maps (3x3x3 kernels on surfaces) instead compute
    ``x @ w_k`` for all taps in one product and sum through a sparse matrix.
    """
    xv, wv = value(x), value(w)
    n_in, cin = xv.shape
    ntap, _, cout = wv.shape
    kmap = in_idx if isinstance(in_idx, KernelMap) else KernelMap(in_idx, out_idx, tap, n_in, n_out, ntap)
    if kmap.n_in != n_in or kmap.ntap != ntap:
        raise ValueError("kernel map does not match the input/weight shapes")
    n_out = kmap.n_out
    dt = np.result_type(xv.dtype, wv.dtype)
    dense = ntap > 1 and kmap.fill > KernelMap.DENSE_FILL

    out = np.zeros((n_out, cout), dtype=dt)
    if b is not None:
        out += value(b)
    if dense:
        w_all = wv.transpose(1, 0, 2).reshape(cin, ntap * cout)
        A, At = kmap.matrix(dt)
        out += A @ (xv @ w_all).reshape(n_in * ntap, cout)
    else:
        for k, ii, oo in kmap.groups:
            out[oo] += xv[ii] @ wv[k]

    def bw(g):
        g = g.astype(dt, copy=False)
        need_w = isinstance(w, Var) and w.requires_grad
        need_x = isinstance(x, Var) and x.requires_grad
        if b is not None:
            _acc(b, g.sum(axis=0))
        if dense:
            gy = (At @ g).reshape(n_in, ntap * cout)
            if need_w:
                _acc(w, (xv.T @ gy).reshape(cin, ntap, cout).transpose(1, 0, 2))
            if need_x:
                _acc(x, gy @ w_all.T)
            return
        gw = np.zeros_like(wv) if need_w else None
        gx = np.zeros((n_in, cin), dtype=dt) if need_x else None
        for k, ii, oo in kmap.groups:
            go = g[oo]
            if need_w:
                gw[k] = xv[ii].T @ go
            if need_x:
                gx[ii] += go @ wv[k].T
        if need_w:
            _acc(w, gw)
        if need_x:
            _acc(x, gx)

    return _node(out, (x, w, b), bw)


AWI_MIN_DIST = 1e-4


def awi(ref_feats, ref_pos, query, nbr, alpha):
    """Inverse-distance KNN interpolation with a penalty floor on the normalizer.

    ``out[s] = sum_v f[v] / d_v / max(sum_v 1/d_v, alpha)`` over the neighbour
    rows ``nbr[s]``.  Neighbour selection is treated as constant; gradients
    flow to the features, the query positions and ``alpha``.
    """
    fv = value(ref_feats)
    qv = value(query)
    av = value(alpha)
    dt = fv.dtype
    nq, k = nbr.shape
    diff = qv[:, None, :].astype(np.float64) - ref_pos[nbr].astype(np.float64)
    d_raw = np.sqrt((diff * diff).sum(axis=2))
    clamped = d_raw < AWI_MIN_DIST
    d = np.where(clamped, AWI_MIN_DIST, d_raw)
    w = 1.0 / d
    S = w.sum(axis=1)
    use_alpha = av >= S
    den = np.where(use_alpha, av, S)
    coef = (w / den[:, None]).astype(dt)
    A = sp.csr_matrix(
        (coef.ravel(), nbr.ravel(), np.arange(0, nq * k + 1, k)), shape=(nq, fv.shape[0])
    )
    out = np.asarray(A @ fv, dtype=dt)

    def bw(g):
        g = g.astype(np.float64)
        if isinstance(ref_feats, Var) and ref_feats.requires_grad:
            _acc(ref_feats, (A.T @ g).astype(dt))
        num_dot = (g * out).sum(axis=1) * den  # g . N
        gw = (g[:, None, :] * fv[nbr]).sum(axis=2) / den[:, None]  # d out / d w_k via numerator
        gw = gw - np.where(use_alpha, 0.0, num_dot / den**2)[:, None]
        if isinstance(query, Var) and query.requires_grad:
            gd = np.where(clamped, 0.0, -gw / (d * d))
            unit = diff / d[:, :, None]
            _acc(query, (gd[:, :, None] * unit).sum(axis=1).astype(qv.dtype))
        if isinstance(alpha, Var) and alpha.requires_grad:
            ga = -np.where(use_alpha, num_dot / den**2, 0.0).sum()
            _acc(alpha, np.asarray(ga, dtype=av.dtype).reshape(av.shape))

    return _node(out, (ref_feats, query, alpha), bw)


PMF_FLOOR = 2.0**-16


def gaussian_pmf_value(x, mu, sigma):
    """P(X in [x-0.5, x+0.5]) for X ~ N(mu, sigma), computed on the lower tail."""
    t = np.abs(np.asarray(x, np.float64) - mu)
    a = (0.5 - t) / sigma
    b = (-0.5 - t) / sigma
    return special.ndtr(a) - special.ndtr(b)


def gaussian_bits(x, mu, sigma):
    """Total ``-log2 max(pmf, 2^-16)`` over all elements, differentiable."""
    xv, mv, sv = value(x), value(mu), value(sigma)
    dt = xv.dtype
    xv64 = np.asarray(xv, np.float64)
    mv64 = np.broadcast_to(np.asarray(mv, np.float64), xv.shape)
    sv64 = np.broadcast_to(np.asarray(sv, np.float64), xv.shape)
    diff = xv64 - mv64
    t = np.abs(diff)
    a = (0.5 - t) / sv64
    b = (-0.5 - t) / sv64
    p = special.ndtr(a) - special.ndtr(b)
    floored = p < PMF_FLOOR
    pc = np.maximum(p, PMF_FLOOR)
    bits = -np.log2(pc).sum()

    def bw(g):
        g = float(g)
        phi_a = np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
        phi_b = np.exp(-0.5 * b * b) / math.sqrt(2 * math.pi)
        dbits_dp = np.where(floored, 0.0, -1.0 / (pc * LN2)) * g
        dp_dt = (phi_b - phi_a) / sv64
        dp_dx = dp_dt * np.sign(diff)
        dp_ds = -(a * phi_a - b * phi_b) / sv64
        _acc(x, (dbits_dp * dp_dx).astype(dt))
        _acc(mu, _unbroadcast(-dbits_dp * dp_dx, np.shape(mv)).astype(dt))
        _acc(sigma, _unbroadcast(dbits_dp * dp_ds, np.shape(sv)).astype(dt))

    return _node(np.asarray(bits, dtype=dt), (x, mu, sigma), bw)


def bce_bits(logits, target):
    """Binary cross-entropy in bits, summed, from logits."""
    zv = value(logits)
    y = np.asarray(target, dtype=zv.dtype)
    nats = np.logaddexp(0, zv) - y * zv
    out = np.asarray(nats.sum() / LN2, dtype=zv.dtype)
    return _node(out, (logits,), lambda g: _acc(logits, g * (special.expit(zv) - y) / LN2))


def round_half_away(x):
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def straight_through_quantize(x, training, rng=None):
    """Additive uniform noise (training) or half-away rounding; identity gradient."""
    xv = value(x)
    if training:
        if rng is None:
            raise ValueError("training-mode quantization needs an rng")
        out = xv + rng.uniform(-0.5, 0.5, size=xv.shape).astype(xv.dtype)
    else:
        out = round_half_away(xv).astype(xv.dtype)
    return _node(out, (x,), lambda g: _acc(x, g))
