"""Backend switch for the hot kernels.

Numba is used when importable and not disabled with ``UMOTION_NUMBA=0``.
Every jitted kernel has a fallback written against numpy/scipy or plain
Python, selected at call time so both paths can be exercised in one process.
"""

import contextlib
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

_use_numba = HAVE_NUMBA and os.environ.get("UMOTION_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def use_numba() -> bool:
    return _use_numba


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` for subsequent kernel calls."""
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _use_numba = name == "numba"


@contextlib.contextmanager
def backend(name: str):
    prev = "numba" if _use_numba else "numpy"
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def njit(fn):
    """``numba.njit(cache=True)`` when numba exists, identity otherwise.

    The undecorated function stays reachable as ``fn.py_func``.
    """
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    fn.py_func = fn
    return fn
