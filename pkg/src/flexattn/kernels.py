"""Backend selection for the per-tile kernels.

The compiled Cython module is used when importable; set
``FLEXATTN_PURE_PYTHON=1`` (or call :func:`set_backend`) to force the numpy
fallback.
"""

import os
from contextlib import contextmanager

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_active = _kernels_py if (_compiled is None or os.environ.get("FLEXATTN_PURE_PYTHON") == "1") else _compiled


def available() -> list:
    return sorted(_BACKENDS)


def current():
    return _active


def backend_name() -> str:
    return _active.BACKEND


def set_backend(name: str) -> None:
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available()}") from None


@contextmanager
def use_backend(name: str):
    prev = _active.BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)
