"""Selects the cached-decode attention kernel at import time.

The compiled Cython kernel is preferred when it built; the numpy fallback
is always available. KVLAB_BACKEND=python|compiled forces one side
(forcing `compiled` fails loudly if the extension is missing). Both
backends compute the same math in float64; they may differ in the last
bits because summation order differs, so artifacts stamp the backend they
were produced with.
"""

from __future__ import annotations

import os

from kvlab import _decode_py

try:
    from kvlab import _decode_cy

    _HAVE_COMPILED = True
except ImportError:
    _decode_cy = None
    _HAVE_COMPILED = False


def _select():
    forced = os.environ.get("KVLAB_BACKEND", "auto").lower()
    if forced == "python":
        return _decode_py.attend_group_chunk, "python"
    if forced == "compiled":
        if not _HAVE_COMPILED:
            raise ImportError("KVLAB_BACKEND=compiled but the extension is not built")
        return _decode_cy.attend_group_chunk, "compiled"
    if forced != "auto":
        raise ValueError(f"KVLAB_BACKEND must be auto|python|compiled, got {forced!r}")
    if _HAVE_COMPILED:
        return _decode_cy.attend_group_chunk, "compiled"
    return _decode_py.attend_group_chunk, "python"


attend_group_chunk, BACKEND = _select()


def backend_name() -> str:
    return BACKEND


def compiled_available() -> bool:
    return _HAVE_COMPILED


def get_kernel(name: str):
    """Fetch a specific backend's kernel (for benchmarks / cross-checks)."""
    if name == "python":
        return _decode_py.attend_group_chunk
    if name == "compiled":
        if not _HAVE_COMPILED:
            raise ImportError("compiled kernel not built")
        return _decode_cy.attend_group_chunk
    raise ValueError(f"unknown backend {name!r}")
