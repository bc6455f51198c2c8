"""Backend selection for the token-model kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``CURRIDPO_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import contextlib
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

_requested = os.environ.get("CURRIDPO_BACKEND", "").strip().lower()
if _requested and _requested not in BACKENDS:
    raise ImportError(f"CURRIDPO_BACKEND={_requested!r} is not available; have {sorted(BACKENDS)}")
_active = _requested or ("cython" if _ckernels is not None else "python")


def backend_name() -> str:
    return _active


def get() -> object:
    return BACKENDS[_active]


def set_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {sorted(BACKENDS)}")
    _active = name


@contextlib.contextmanager
def use_backend(name: str):
    previous = _active
    set_backend(name)
    try:
        yield BACKENDS[name]
    finally:
        set_backend(previous)
