"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; the numpy
reference is the fallback. `FLMAE_KERNELS=python|compiled` forces a choice,
which the benchmark and the parity tests use to pin each side.
"""

import os

from . import pyref

try:
    from . import _fastcore
except ImportError:
    _fastcore = None

_BACKENDS = {"python": pyref}
if _fastcore is not None:
    _BACKENDS["compiled"] = _fastcore


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}") from None


def _select() -> object:
    forced = os.environ.get("FLMAE_KERNELS", "").strip().lower()
    if forced:
        return get_backend(forced)
    return _fastcore if _fastcore is not None else pyref


active = _select()


def backend_name() -> str:
    return active.BACKEND
