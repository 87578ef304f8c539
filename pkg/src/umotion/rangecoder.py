"""Carry-propagating 32-bit range coder with 16-bit frequency totals.

Streams are produced by the numba kernels when available and by the plain
Python :class:`RangeEncoder` / :class:`RangeDecoder` otherwise; both emit
identical bytes.

Gaussian symbols are coded over a window ``[m - W, m + W]`` around the
rounded mean plus two escape symbols; values outside the window follow the
escape as an order-0 Exp-Golomb code of equiprobable bits.  Means and scales
are snapped to a fixed 16-bit grid before any table is built, so encoder and
decoder always derive the same frequencies.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from ._accel import njit, use_numba

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF

SIGMA_MIN = 0.04
SIGMA_MAX = 4096.0
_SIGMA_STEP = math.log(SIGMA_MAX / SIGMA_MIN) / 65535.0
MU_SCALE = 64.0
SYMBOL_LIMIT = 1 << 15
MAX_HALF_WINDOW = 4096


class CorruptStream(ValueError):
    """Raised when a stream ends early or fails its consistency checks."""


# -- parameter grids ----------------------------------------------------------


def mu_to_code(mu):
    return np.clip(np.rint(np.asarray(mu, np.float64) * MU_SCALE) + 32768, 0, 65535).astype(np.int64)


def code_to_mu(code):
    return (np.asarray(code, np.float64) - 32768) / MU_SCALE


def sigma_to_code(sigma):
    s = np.clip(np.asarray(sigma, np.float64), SIGMA_MIN, SIGMA_MAX)
    return np.clip(np.rint(np.log(s / SIGMA_MIN) / _SIGMA_STEP), 0, 65535).astype(np.int64)


def code_to_sigma(code):
    return SIGMA_MIN * np.exp(np.asarray(code, np.float64) * _SIGMA_STEP)


def prob_to_code(p1):
    """Probability of a one-bit on the 16-bit grid, kept inside (0, 1)."""
    return np.clip(np.rint(np.asarray(p1, np.float64) * TOTAL), 1, TOTAL - 1).astype(np.int64)


def half_window(sigma):
    return np.minimum(np.maximum(np.ceil(8.0 * np.asarray(sigma, np.float64)), 2), MAX_HALF_WINDOW).astype(np.int64)


# -- reference implementation -------------------------------------------------


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start, size, total):
        r = self.range // total
        self.low += start * r
        self.range = size * r
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bit(self, bit):
        self.encode(bit, 1, 2)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        self.r = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._byte()) & MASK32

    def _byte(self):
        if self.pos >= len(self.data):
            raise CorruptStream("range-coded stream truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self, total):
        self.r = self.range // total
        v = self.code // self.r
        if v >= total:
            raise CorruptStream("range decoder out of bounds")
        return v

    def consume(self, start, size):
        self.code -= start * self.r
        self.range = size * self.r
        while self.range < TOP:
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.range <<= 8

    def decode_bit(self):
        v = self.target(2)
        self.consume(v, 1)
        return v


def _phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _gauss_cum(i, nsym, lo, mu, sigma):
    if i <= 0:
        return 0
    if i >= nsym:
        return TOTAL
    b = _phi((lo + i - 1 - 0.5 - mu) / sigma)
    return int(math.floor(b * (TOTAL - nsym))) + i


def _eg_write(enc, value):
    v = value + 1
    nbits = v.bit_length()
    for _ in range(nbits - 1):
        enc.encode_bit(0)
    for j in range(nbits - 1, -1, -1):
        enc.encode_bit((v >> j) & 1)


def _eg_read(dec):
    zeros = 0
    while dec.decode_bit() == 0:
        zeros += 1
        if zeros > 20:
            raise CorruptStream("Exp-Golomb prefix too long")
    v = 1
    for _ in range(zeros):
        v = (v << 1) | dec.decode_bit()
    return v - 1


def _gauss_params(mu_code, sigma_code):
    mu = (mu_code - 32768) / MU_SCALE
    sigma = SIGMA_MIN * math.exp(sigma_code * _SIGMA_STEP)
    w = int(min(max(math.ceil(8.0 * sigma), 2), MAX_HALF_WINDOW))
    center = int(math.floor(mu + 0.5))
    return mu, sigma, center - w, 2 * w + 1


def _py_encode_gaussian(symbols, mu_codes, sigma_codes):
    enc = RangeEncoder()
    for s, mc, sc in zip(symbols.tolist(), mu_codes.tolist(), sigma_codes.tolist()):
        mu, sigma, lo, n = _gauss_params(mc, sc)
        nsym = n + 2
        if s < lo:
            i = 0
        elif s >= lo + n:
            i = n + 1
        else:
            i = s - lo + 1
        c0 = _gauss_cum(i, nsym, lo, mu, sigma)
        c1 = _gauss_cum(i + 1, nsym, lo, mu, sigma)
        enc.encode(c0, c1 - c0, TOTAL)
        if i == 0:
            _eg_write(enc, lo - 1 - s)
        elif i == n + 1:
            _eg_write(enc, s - (lo + n))
    return enc.finish()


def _py_decode_gaussian(data, mu_codes, sigma_codes):
    dec = RangeDecoder(data)
    out = np.empty(len(mu_codes), dtype=np.int64)
    for j, (mc, sc) in enumerate(zip(mu_codes.tolist(), sigma_codes.tolist())):
        mu, sigma, lo, n = _gauss_params(mc, sc)
        nsym = n + 2
        t = dec.target(TOTAL)
        a, b = 0, nsym  # cum(a) <= t < cum(b)
        while b - a > 1:
            mid = (a + b) // 2
            if _gauss_cum(mid, nsym, lo, mu, sigma) <= t:
                a = mid
            else:
                b = mid
        c0 = _gauss_cum(a, nsym, lo, mu, sigma)
        c1 = _gauss_cum(a + 1, nsym, lo, mu, sigma)
        dec.consume(c0, c1 - c0)
        if a == 0:
            out[j] = lo - 1 - _eg_read(dec)
        elif a == n + 1:
            out[j] = lo + n + _eg_read(dec)
        else:
            out[j] = lo + a - 1
    return out, dec.pos


def _py_encode_binary(bits, p_codes):
    enc = RangeEncoder()
    for b, p in zip(bits.tolist(), p_codes.tolist()):
        if b:
            enc.encode(TOTAL - p, p, TOTAL)
        else:
            enc.encode(0, TOTAL - p, TOTAL)
    return enc.finish()


def _py_decode_binary(data, p_codes):
    dec = RangeDecoder(data)
    out = np.empty(len(p_codes), dtype=np.int64)
    for j, p in enumerate(p_codes.tolist()):
        t = dec.target(TOTAL)
        if t >= TOTAL - p:
            dec.consume(TOTAL - p, p)
            out[j] = 1
        else:
            dec.consume(0, TOTAL - p)
            out[j] = 0
    return out, dec.pos


def _py_encode_table(symbols, cum):
    enc = RangeEncoder()
    for j, s in enumerate(symbols.tolist()):
        row = cum[j if cum.shape[0] > 1 else 0]
        enc.encode(int(row[s]), int(row[s + 1] - row[s]), TOTAL)
    return enc.finish()


def _py_decode_table(data, cum, n):
    dec = RangeDecoder(data)
    out = np.empty(n, dtype=np.int64)
    for j in range(n):
        row = cum[j if cum.shape[0] > 1 else 0]
        t = dec.target(TOTAL)
        s = int(np.searchsorted(row, t, side="right")) - 1
        dec.consume(int(row[s]), int(row[s + 1] - row[s]))
        out[j] = s
    return out, dec.pos


# -- numba kernels --------------------------------------------------------------


@njit
def _nb_phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@njit
def _nb_gauss_cum(i, nsym, lo, mu, sigma):
    if i <= 0:
        return 0
    if i >= nsym:
        return 65536
    b = _nb_phi((lo + i - 1 - 0.5 - mu) / sigma)
    return int(math.floor(b * (65536 - nsym))) + i


@njit
def _nb_gauss_params(mu_code, sigma_code, step):
    mu = (mu_code - 32768) / 64.0
    sigma = 0.04 * math.exp(sigma_code * step)
    w = int(min(max(math.ceil(8.0 * sigma), 2.0), 4096.0))
    center = int(math.floor(mu + 0.5))
    return mu, sigma, center - w, 2 * w + 1


@njit
def _nb_shift_low(st, out):
    # st = [low, range, cache, cache_size, npos]
    low = st[0]
    if low < 0xFF000000 or low > 0xFFFFFFFF:
        carry = low >> 32
        temp = st[2]
        while True:
            if st[4] >= out.shape[0]:
                return False
            out[st[4]] = (temp + carry) & 0xFF
            st[4] += 1
            temp = 0xFF
            st[3] -= 1
            if st[3] == 0:
                break
        st[2] = (low >> 24) & 0xFF
    st[3] += 1
    st[0] = (low & 0x00FFFFFF) << 8
    return True


@njit
def _nb_encode(st, out, start, size, total):
    r = st[1] // total
    st[0] += start * r
    st[1] = size * r
    while st[1] < 16777216:
        st[1] <<= 8
        if not _nb_shift_low(st, out):
            return False
    return True


@njit
def _nb_finish(st, out):
    for _ in range(5):
        if not _nb_shift_low(st, out):
            return False
    return True


@njit
def _nb_eg_write(st, out, value):
    v = value + 1
    nbits = 0
    t = v
    while t > 0:
        nbits += 1
        t >>= 1
    for _ in range(nbits - 1):
        if not _nb_encode(st, out, 0, 1, 2):
            return False
    for j in range(nbits - 1, -1, -1):
        if not _nb_encode(st, out, (v >> j) & 1, 1, 2):
            return False
    return True


@njit
def _nb_encode_gaussian(symbols, mu_codes, sigma_codes, step, out):
    st = np.array([0, 0xFFFFFFFF, 0, 1, 0], dtype=np.int64)
    for j in range(symbols.shape[0]):
        s = symbols[j]
        mu, sigma, lo, n = _nb_gauss_params(mu_codes[j], sigma_codes[j], step)
        nsym = n + 2
        if s < lo:
            i = 0
        elif s >= lo + n:
            i = n + 1
        else:
            i = s - lo + 1
        c0 = _nb_gauss_cum(i, nsym, lo, mu, sigma)
        c1 = _nb_gauss_cum(i + 1, nsym, lo, mu, sigma)
        if not _nb_encode(st, out, c0, c1 - c0, 65536):
            return -1
        if i == 0:
            if not _nb_eg_write(st, out, lo - 1 - s):
                return -1
        elif i == n + 1:
            if not _nb_eg_write(st, out, s - (lo + n)):
                return -1
    if not _nb_finish(st, out):
        return -1
    return st[4]


@njit
def _nb_dec_byte(ds, data):
    # ds = [range, code, r, pos]
    if ds[3] >= data.shape[0]:
        return -1
    b = data[ds[3]]
    ds[3] += 1
    return b


@njit
def _nb_dec_init(ds, data):
    ds[0] = 0xFFFFFFFF
    ds[1] = 0
    for _ in range(5):
        b = _nb_dec_byte(ds, data)
        if b < 0:
            return False
        ds[1] = ((ds[1] << 8) | b) & 0xFFFFFFFF
    return True


@njit
def _nb_target(ds, total):
    ds[2] = ds[0] // total
    return ds[1] // ds[2]


@njit
def _nb_consume(ds, data, start, size):
    ds[1] -= start * ds[2]
    ds[0] = size * ds[2]
    while ds[0] < 16777216:
        b = _nb_dec_byte(ds, data)
        if b < 0:
            return False
        ds[1] = ((ds[1] << 8) | b) & 0xFFFFFFFF
        ds[0] <<= 8
    return True


@njit
def _nb_decode_bit(ds, data):
    v = _nb_target(ds, 2)
    if v >= 2:
        return -1
    if not _nb_consume(ds, data, v, 1):
        return -1
    return v


@njit
def _nb_eg_read(ds, data):
    zeros = 0
    while True:
        b = _nb_decode_bit(ds, data)
        if b < 0:
            return -1
        if b == 1:
            break
        zeros += 1
        if zeros > 20:
            return -1
    v = 1
    for _ in range(zeros):
        b = _nb_decode_bit(ds, data)
        if b < 0:
            return -1
        v = (v << 1) | b
    return v - 1


@njit
def _nb_decode_gaussian(data, mu_codes, sigma_codes, step, out):
    ds = np.zeros(4, dtype=np.int64)
    if not _nb_dec_init(ds, data):
        return -1
    for j in range(mu_codes.shape[0]):
        mu, sigma, lo, n = _nb_gauss_params(mu_codes[j], sigma_codes[j], step)
        nsym = n + 2
        t = _nb_target(ds, 65536)
        if t >= 65536:
            return -1
        a = 0
        b = nsym
        while b - a > 1:
            mid = (a + b) // 2
            if _nb_gauss_cum(mid, nsym, lo, mu, sigma) <= t:
                a = mid
            else:
                b = mid
        c0 = _nb_gauss_cum(a, nsym, lo, mu, sigma)
        c1 = _nb_gauss_cum(a + 1, nsym, lo, mu, sigma)
        if not _nb_consume(ds, data, c0, c1 - c0):
            return -1
        if a == 0:
            e = _nb_eg_read(ds, data)
            if e < 0:
                return -1
            out[j] = lo - 1 - e
        elif a == n + 1:
            e = _nb_eg_read(ds, data)
            if e < 0:
                return -1
            out[j] = lo + n + e
        else:
            out[j] = lo + a - 1
    return ds[3]


@njit
def _nb_encode_binary(bits, p_codes, out):
    st = np.array([0, 0xFFFFFFFF, 0, 1, 0], dtype=np.int64)
    for j in range(bits.shape[0]):
        p = p_codes[j]
        if bits[j]:
            ok = _nb_encode(st, out, 65536 - p, p, 65536)
        else:
            ok = _nb_encode(st, out, 0, 65536 - p, 65536)
        if not ok:
            return -1
    if not _nb_finish(st, out):
        return -1
    return st[4]


@njit
def _nb_decode_binary(data, p_codes, out):
    ds = np.zeros(4, dtype=np.int64)
    if not _nb_dec_init(ds, data):
        return -1
    for j in range(p_codes.shape[0]):
        p = p_codes[j]
        t = _nb_target(ds, 65536)
        if t >= 65536:
            return -1
        if t >= 65536 - p:
            ok = _nb_consume(ds, data, 65536 - p, p)
            out[j] = 1
        else:
            ok = _nb_consume(ds, data, 0, 65536 - p)
            out[j] = 0
        if not ok:
            return -1
    return ds[3]


@njit
def _nb_encode_table(symbols, cum, out):
    st = np.array([0, 0xFFFFFFFF, 0, 1, 0], dtype=np.int64)
    shared = cum.shape[0] == 1
    for j in range(symbols.shape[0]):
        row = 0 if shared else j
        s = symbols[j]
        if not _nb_encode(st, out, cum[row, s], cum[row, s + 1] - cum[row, s], 65536):
            return -1
    if not _nb_finish(st, out):
        return -1
    return st[4]


@njit
def _nb_decode_table(data, cum, n, out):
    ds = np.zeros(4, dtype=np.int64)
    if not _nb_dec_init(ds, data):
        return -1
    shared = cum.shape[0] == 1
    for j in range(n):
        row = 0 if shared else j
        t = _nb_target(ds, 65536)
        if t >= 65536:
            return -1
        s = np.searchsorted(cum[row], t, side="right") - 1
        if not _nb_consume(ds, data, cum[row, s], cum[row, s + 1] - cum[row, s]):
            return -1
        out[j] = s
    return ds[3]


def _run_encoder(kernel, args, n):
    cap = 8 * n + 64
    while True:
        buf = np.empty(cap, dtype=np.uint8)
        size = kernel(*args, buf)
        if size >= 0:
            return buf[:size].tobytes()
        cap *= 4


# -- public API -------------------------------------------------------------------

_HEADER = struct.Struct("<I")


def _pack(n, payload):
    return _HEADER.pack(n) + payload


def _unpack(data, expected):
    if len(data) < _HEADER.size:
        raise CorruptStream("stream shorter than its header")
    (n,) = _HEADER.unpack_from(data)
    if expected is not None and n != expected:
        raise CorruptStream(f"stream holds {n} symbols, expected {expected}")
    return n, np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)


def _check_consumed(consumed, payload):
    if consumed < 0:
        raise CorruptStream("range-coded stream truncated or corrupt")
    if consumed != len(payload):
        raise CorruptStream(f"stream length mismatch: consumed {consumed} of {len(payload)} bytes")


def encode_gaussian(symbols, mu_codes, sigma_codes) -> bytes:
    """Code integer symbols under per-symbol grid-quantized Gaussians."""
    symbols = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
    mu_codes = np.ascontiguousarray(np.broadcast_to(mu_codes, symbols.shape), dtype=np.int64)
    sigma_codes = np.ascontiguousarray(np.broadcast_to(sigma_codes, symbols.shape), dtype=np.int64)
    if symbols.size and np.abs(symbols).max() > SYMBOL_LIMIT:
        raise ValueError("symbol outside the ±2^15 coding range")
    if use_numba():
        payload = _run_encoder(_nb_encode_gaussian, (symbols, mu_codes, sigma_codes, _SIGMA_STEP), len(symbols))
    else:
        payload = _py_encode_gaussian(symbols, mu_codes, sigma_codes)
    return _pack(len(symbols), payload)


def decode_gaussian(data, mu_codes, sigma_codes) -> np.ndarray:
    mu_codes = np.ascontiguousarray(mu_codes, dtype=np.int64).ravel()
    sigma_codes = np.ascontiguousarray(np.broadcast_to(sigma_codes, mu_codes.shape), dtype=np.int64)
    _, payload = _unpack(data, len(mu_codes))
    if use_numba():
        out = np.empty(len(mu_codes), dtype=np.int64)
        consumed = _nb_decode_gaussian(payload, mu_codes, sigma_codes, _SIGMA_STEP, out)
    else:
        out, consumed = _py_decode_gaussian(payload.tobytes(), mu_codes, sigma_codes)
    _check_consumed(consumed, payload)
    return out


def encode_binary(bits, p_codes) -> bytes:
    bits = np.ascontiguousarray(bits, dtype=np.int64).ravel()
    p_codes = np.ascontiguousarray(np.broadcast_to(p_codes, bits.shape), dtype=np.int64)
    if use_numba():
        payload = _run_encoder(_nb_encode_binary, (bits, p_codes), len(bits))
    else:
        payload = _py_encode_binary(bits, p_codes)
    return _pack(len(bits), payload)


def decode_binary(data, p_codes) -> np.ndarray:
    p_codes = np.ascontiguousarray(p_codes, dtype=np.int64).ravel()
    _, payload = _unpack(data, len(p_codes))
    if use_numba():
        out = np.empty(len(p_codes), dtype=np.int64)
        consumed = _nb_decode_binary(payload, p_codes, out)
    else:
        out, consumed = _py_decode_binary(payload.tobytes(), p_codes)
    _check_consumed(consumed, payload)
    return out


def pmf_to_cum(pmfs) -> np.ndarray:
    """Cumulative 16-bit frequency tables; every symbol keeps frequency ≥ 1."""
    p = np.atleast_2d(np.asarray(pmfs, dtype=np.float64))
    if (p < 0).any():
        raise ValueError("negative probability")
    n = p.shape[1]
    if n + 1 > TOTAL:
        raise ValueError("alphabet too large for 16-bit frequency tables")
    c = np.cumsum(p, axis=1)
    c = c / c[:, -1:]
    cum = np.zeros((p.shape[0], n + 1), dtype=np.int64)
    cum[:, 1:] = np.floor(c * (TOTAL - n)).astype(np.int64) + np.arange(1, n + 1)
    cum[:, -1] = TOTAL
    return cum


def range_encode(symbols, pmfs) -> bytes:
    """Code symbols in ``[0, A)`` with one pmf per symbol (or one shared pmf)."""
    symbols = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
    cum = pmf_to_cum(pmfs)
    if cum.shape[0] not in (1, len(symbols)):
        raise ValueError("need one pmf per symbol or a single shared pmf")
    if symbols.size and (symbols.min() < 0 or symbols.max() >= cum.shape[1] - 1):
        raise ValueError("symbol outside the pmf alphabet")
    if use_numba():
        payload = _run_encoder(_nb_encode_table, (symbols, cum), len(symbols))
    else:
        payload = _py_encode_table(symbols, cum)
    return _pack(len(symbols), payload)


def range_decode(data, pmfs, n=None) -> np.ndarray:
    cum = pmf_to_cum(pmfs)
    if n is None:
        n = cum.shape[0] if cum.shape[0] > 1 else _unpack(data, None)[0]
    _, payload = _unpack(data, n)
    if use_numba():
        out = np.empty(n, dtype=np.int64)
        consumed = _nb_decode_table(payload, cum, n, out)
    else:
        out, consumed = _py_decode_table(payload.tobytes(), cum, n)
    _check_consumed(consumed, payload)
    return out


def _byte_planes(nbits):
    return [(shift, min(8, nbits - shift)) for shift in range(0, nbits, 8)]


def encode_uniform(values, nbits) -> bytes:
    """Equiprobable ``nbits``-bit values, coded as byte-sized symbols."""
    values = np.ascontiguousarray(values, dtype=np.int64).ravel()
    if nbits < 1 or nbits > 32:
        raise ValueError("uniform coding supports 1..32 bits per symbol")
    if values.size and (values.min() < 0 or values.max() >= (1 << nbits)):
        raise ValueError(f"value outside [0, 2^{nbits})")
    planes = [(values >> shift) & ((1 << w) - 1) for shift, w in _byte_planes(nbits)]
    widths = [w for _, w in _byte_planes(nbits)]
    sym = np.stack(planes, axis=1).ravel() if planes else values
    pmfs = np.concatenate([np.ones((1, 256)) * (np.arange(256) < (1 << w)) for w in widths])
    pmfs = np.tile(pmfs, (len(values), 1)) if len(widths) > 1 else pmfs
    return range_encode(sym, pmfs)


def decode_uniform(data, n, nbits) -> np.ndarray:
    widths = [w for _, w in _byte_planes(nbits)]
    pmfs = np.concatenate([np.ones((1, 256)) * (np.arange(256) < (1 << w)) for w in widths])
    pmfs = np.tile(pmfs, (n, 1)) if len(widths) > 1 else pmfs
    sym = range_decode(data, pmfs, n * len(widths)).reshape(n, len(widths))
    out = np.zeros(n, dtype=np.int64)
    for j, (shift, _) in enumerate(_byte_planes(nbits)):
        out |= sym[:, j] << shift
    return out
