"""Kernel backend selection.

Imports the compiled extension when available and falls back to the
pure-NumPy twin otherwise. Setting RINGFLOW_PURE_PYTHON=1 forces the
fallback (used by the parity tests and as an escape hatch on platforms
where the extension fails to build). Both backends are bit-identical.
"""
from __future__ import annotations

import os

_FORCE_PY = os.environ.get("RINGFLOW_PURE_PYTHON", "").strip().lower() in (
    "1", "true", "yes", "on")

if _FORCE_PY:
    from . import _ring_kernel_py as _impl
    BACKEND = "numpy"
else:
    try:
        from . import _ring_kernel as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        from . import _ring_kernel_py as _impl
        BACKEND = "numpy"

idm_accel_ring = _impl.idm_accel_ring
idm_accel_open = _impl.idm_accel_open
euler_ring = _impl.euler_ring
