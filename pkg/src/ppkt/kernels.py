"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Both backends expose the same functions and produce the
same bits, so switching never changes results.
"""
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active: ModuleType = _BACKENDS.get("cython", _pykernels)


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def backend_name() -> str:
    return "cython" if _active is _ckernels else "python"


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = _BACKENDS[name]


def get(name: str):
    """Return the active implementation of kernel ``name``."""
    return getattr(_active, name)
