"""Time the hot kernels under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--points 20000] [--repeat 5]

The first numba call is excluded (JIT compile / cache load).  Both backends
must produce identical outputs; a mismatch aborts the run.
"""

import argparse
import time

import numpy as np

from umotion import _accel
from umotion import rangecoder as rc
from umotion.knn import knn
from umotion.sparse import morton_keys


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, rng):
    coords = rng.integers(0, 1024, size=(n, 3))
    query = coords[: n // 4] + rng.normal(scale=1.5, size=(n // 4, 3))
    sym = np.rint(rng.laplace(scale=3.0, size=n)).astype(np.int64)
    mu = rng.integers(32768 - 200, 32768 + 200, size=n)
    sg = rng.integers(0, 40, size=n)
    gstream = rc.encode_gaussian(sym, mu, sg)
    bits = (rng.random(n) < 0.2).astype(np.int64)
    pc = rng.integers(1, 65535, size=n)
    bstream = rc.encode_binary(bits, pc)
    return {
        "morton_keys": lambda: morton_keys(coords),
        "knn k=6": lambda: knn(query, coords, 6)[0],
        "encode_gaussian": lambda: rc.encode_gaussian(sym, mu, sg),
        "decode_gaussian": lambda: rc.decode_gaussian(gstream, mu, sg),
        "encode_binary": lambda: rc.encode_binary(bits, pc),
        "decode_binary": lambda: rc.decode_binary(bstream, pc),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    table = cases(args.points, np.random.default_rng(0))
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fn in table.items():
        with _accel.backend("numba"):
            a = fn()
            tn = _best(fn, args.repeat)
        with _accel.backend("numpy"):
            b = fn()
            tp = _best(fn, max(1, args.repeat // 2))
        same = a == b if isinstance(a, bytes) else np.array_equal(a, b)
        if not same:
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<18}{tn * 1e3:>10.2f}{tp * 1e3:>10.2f}{tp / tn:>8.1f}x")


if __name__ == "__main__":
    main()
