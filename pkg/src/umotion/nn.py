"""Parameters, layers and the optimizer."""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

from . import autodiff as ad
from .sparse import KernelWeights, SparseTensor, kernel_offsets, sparse_conv, sparse_deconv

CHECKPOINT_MAGIC = b"UMCK"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameter arrays plus gradient accumulators."""

    def __init__(self, seed=0, dtype=np.float32):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.frozen = False

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def __len__(self):
        return len(self.params)

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def add(self, name, shape, init="kaiming", fan_in=None, value=None):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        if value is not None:
            arr = np.broadcast_to(np.asarray(value, dtype=self.dtype), shape).copy()
        elif init == "zeros":
            arr = np.zeros(shape, dtype=self.dtype)
        elif init == "kaiming":
            bound = np.sqrt(6.0 / (fan_in or shape[0]))
            arr = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def var(self, name) -> ad.Var:
        """The parameter as a graph input; differentiable when a tape is active."""
        if self.frozen or ad.active_tape() is None:
            return ad.Var(self.params[name])
        return ad.leaf(self.params[name], name=name)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def collect(self, tape: ad.Tape):
        for name, v in tape.leaves:
            if v.grad is not None and name in self.grads:
                self.grads[name] += v.grad

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype=dtype)
        out.params = {k: v.astype(dtype) for k, v in self.params.items()}
        out.grads = {k: np.zeros_like(v) for k, v in out.params.items()}
        return out

    def zero_(self, prefix=""):
        for n in self.names(prefix):
            self.params[n][...] = 0

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        return h.digest()


def forward_backward(tape: ad.Tape, loss: ad.Var, store: ParamStore) -> dict[str, np.ndarray]:
    """Backpropagate ``loss`` and deposit the parameter gradients in ``store``."""
    store.zero_grad()
    tape.backward(loss)
    store.collect(tape)
    return store.grads


class Adam:
    def __init__(self, store: ParamStore, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip=None):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}

    def step(self):
        self.t += 1
        scale = 1.0
        if self.clip is not None:
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in self.store.grads.values()))
            if norm > self.clip:
                scale = self.clip / norm
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, p in self.store.params.items():
            g = self.store.grads[name] * scale
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(store: ParamStore, opt: Adam | None = None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> Adam:
    """One Adam update; pass the returned optimizer back in to keep its moments."""
    if opt is None:
        opt = Adam(store, lr=lr, betas=(beta1, beta2), eps=eps)
    opt.step()
    return opt


class PlateauDecay:
    """Halve the learning rate when the smoothed loss stops improving."""

    def __init__(self, opt: Adam, factor=0.5, patience=200, min_lr=1e-5, smoothing=0.98):
        self.opt = opt
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.smoothing = smoothing
        self.ema = None
        self.best = np.inf
        self.wait = 0

    def update(self, loss: float):
        self.ema = loss if self.ema is None else self.smoothing * self.ema + (1 - self.smoothing) * loss
        if self.ema < self.best * (1 - 1e-3):
            self.best = self.ema
            self.wait = 0
            return
        self.wait += 1
        if self.wait >= self.patience:
            self.opt.lr = max(self.min_lr, self.opt.lr * self.factor)
            self.wait = 0
            self.best = self.ema


# -- layers -------------------------------------------------------------------


class Conv:
    """Sparse convolution layer; ``transposed=True`` gives the deconvolution."""

    def __init__(self, store, name, cin, cout, ksize=3, stride=1, transposed=False, bias=True):
        self.store, self.name = store, name
        self.offsets = kernel_offsets(ksize)
        self.stride = stride
        self.transposed = transposed
        taps = len(self.offsets)
        store.add(f"{name}.w", (taps, cin, cout), fan_in=taps * cin)
        self.bias = bias
        if bias:
            store.add(f"{name}.b", (cout,), init="zeros")

    def weights(self) -> KernelWeights:
        b = self.store.var(f"{self.name}.b") if self.bias else None
        return KernelWeights(self.offsets, self.store.var(f"{self.name}.w"), b)

    def __call__(self, x: SparseTensor, out=None) -> SparseTensor:
        if self.transposed:
            return sparse_deconv(x, self.weights(), target=out, stride=self.stride)
        return sparse_conv(x, self.weights(), out_coords=out, stride=self.stride)


class Linear:
    def __init__(self, store, name, cin, cout):
        self.store, self.name = store, name
        store.add(f"{name}.w", (cin, cout), fan_in=cin)
        store.add(f"{name}.b", (cout,), init="zeros")

    def __call__(self, x):
        return ad.matmul(x, self.store.var(f"{self.name}.w")) + self.store.var(f"{self.name}.b")


def relu(t: SparseTensor) -> SparseTensor:
    return t.with_feats(ad.relu(t.feats))


class ConvStack:
    """Stride-1 convolutions with ReLU between them (none after the last)."""

    def __init__(self, store, name, widths, ksize=3):
        self.layers = [Conv(store, f"{name}.{i}", a, b, ksize) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]

    def __call__(self, x: SparseTensor, out=None) -> SparseTensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x, out if i == last else None)
            if i != last:
                x = relu(x)
        return x


class IRN:
    """Inception-residual block: (3³→1³) and 1³ branches, merged back to C, plus identity."""

    def __init__(self, store, name, channels):
        c4 = max(channels // 4, 1)
        self.a0 = Conv(store, f"{name}.a0", channels, c4, 3)
        self.a1 = Conv(store, f"{name}.a1", c4, c4, 1)
        self.b0 = Conv(store, f"{name}.b0", channels, c4, 1)
        self.merge = Conv(store, f"{name}.m", 2 * c4, channels, 1)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        a = self.a1(relu(self.a0(x)))
        b = self.b0(x)
        cat = SparseTensor(x.cs, ad.concat([ad.relu(a.feats), ad.relu(b.feats)], axis=1))
        return x.with_feats(ad.add(x.feats, self.merge(cat).feats))


class OccupancyHead:
    """Two IRN blocks and a 1³ convolution to one occupancy logit per voxel."""

    def __init__(self, store, name, channels):
        self.irn0 = IRN(store, f"{name}.irn0", channels)
        self.irn1 = IRN(store, f"{name}.irn1", channels)
        self.out = Conv(store, f"{name}.out", channels, 1, 1)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        return self.out(relu(self.irn1(relu(self.irn0(x)))))


# -- checkpoint archive -------------------------------------------------------


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """Named float32 little-endian tensors behind a versioned header."""
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(store.params)))
    for name in sorted(store.params):
        arr = np.ascontiguousarray(store.params[name], dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    meta = json.loads(data[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params, meta
