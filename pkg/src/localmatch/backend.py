"""Kernel backend selection: numba JIT kernels or the pure-numpy fallback.

The backend is resolved once at import time from the ``LOCALMATCH_BACKEND``
environment variable (``numba`` or ``numpy``; unset/``auto`` picks numba when
it is importable).  It can be switched at runtime with :func:`use` or
:func:`override`, which the benchmark harness relies on to time both paths on
identical inputs.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

ENV_VAR = "LOCALMATCH_BACKEND"
CHOICES = ("numba", "numpy")

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False


def _resolve(name: str | None) -> str:
    if name is None or name.strip().lower() in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    name = name.strip().lower()
    if name not in CHOICES:
        raise ValueError(f"backend must be one of {CHOICES}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return name


_active = _resolve(os.environ.get(ENV_VAR))


def active() -> str:
    """Name of the backend currently answering kernel calls."""
    return _active


def use(name: str) -> str:
    """Switch the kernel backend. Returns the previously active name."""
    global _active
    previous = _active
    _active = _resolve(name)
    return previous


@contextmanager
def override(name: str):
    """Temporarily run kernels on a specific backend."""
    previous = use(name)
    try:
        yield _active
    finally:
        use(previous)
