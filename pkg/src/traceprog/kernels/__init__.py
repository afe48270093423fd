"""Fit-loop backends.

The inner optimisation loop dominates runtime, so it ships in two equivalent
implementations: a numba-compiled kernel and a vectorised pure-numpy
fallback.  ``TRACEPROG_BACKEND`` selects one explicitly (``numba`` or
``numpy``); the default (``auto``) prefers numba when it imports.

Run ``python benchmarks/bench_backends.py`` to compare them.
"""

from __future__ import annotations

import os

from . import numpy_backend

__all__ = ["get_fit", "backend_name", "available_backends"]

_ENV_VAR = "TRACEPROG_BACKEND"


def available_backends() -> tuple[str, ...]:
    names = ["numpy"]
    try:
        from . import numba_backend  # noqa: F401
        names.insert(0, "numba")
    except ImportError:
        pass
    return tuple(names)


def backend_name(requested: str | None = None) -> str:
    name = (requested or os.environ.get(_ENV_VAR, "auto")).lower()
    if name not in ("auto", "numba", "numpy"):
        raise ValueError(f"unknown backend {name!r} (use auto, numba, or numpy)")
    if name == "auto":
        return "numba" if "numba" in available_backends() else "numpy"
    return name


def get_fit(requested: str | None = None):
    name = backend_name(requested)
    if name == "numba":
        from . import numba_backend
        return numba_backend.fit
    return numpy_backend.fit
