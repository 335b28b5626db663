"""Kernel backend selection.

The hot forward/backward kernels exist twice: a compiled Cython extension
(``milrank._kernels``) and a pure-numpy fallback (``milrank._kernels_py``).
The compiled one is used when importable; set MILRANK_BACKEND=python or
MILRANK_BACKEND=cython to force a choice.
"""

from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _kernels  # type: ignore[attr-defined]
except ImportError:
    _kernels = None

_BACKENDS = {"python": _kernels_py}
if _kernels is not None:
    _BACKENDS["cython"] = _kernels


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def get_backend(name: str):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"backend {name!r} not available (have: {', '.join(available_backends())})"
        ) from None


def _select():
    forced = os.environ.get("MILRANK_BACKEND", "auto").lower()
    if forced in ("auto", ""):
        name = "cython" if _kernels is not None else "python"
    elif forced in _BACKENDS:
        name = forced
    else:
        raise RuntimeError(
            f"MILRANK_BACKEND={forced!r} not available (have: {', '.join(available_backends())})"
        )
    return name, _BACKENDS[name]


BACKEND_NAME, active = _select()

forward_batch = active.forward_batch
backward_batch = active.backward_batch
