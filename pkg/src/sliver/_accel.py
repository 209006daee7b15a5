"""Backend switch for the hot kernels.

Set ``SLIVER_DISABLE_NUMBA=1`` (or numba's own ``NUMBA_DISABLE_JIT=1``) before
import to run the pure-numpy kernels. :func:`set_backend` flips the choice at
runtime, which the tests use to check both paths against the same oracles.
"""

from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


_backend = (
    "numpy"
    if (not HAVE_NUMBA or _env_flag("SLIVER_DISABLE_NUMBA") or _env_flag("NUMBA_DISABLE_JIT"))
    else "numba"
)


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _backend = _backend, name
    return prev
