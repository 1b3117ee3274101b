"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise, or when
``COGPLANT_PURE=1`` is set, the pure-Python ``_pykernels`` are used. Both
expose the same functions and return identical results.
"""

from __future__ import annotations

import os

from cogplant import _pykernels

if os.environ.get("COGPLANT_PURE", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from cogplant import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

EDGE = _pykernels.EDGE
CLOUD = _pykernels.CLOUD

splitmix64 = _impl.splitmix64
to_unit = _impl.to_unit
gaussian = _impl.gaussian
gaussian_fill = _impl.gaussian_fill
window_zscore = _impl.window_zscore
place_bnb = _impl.place_bnb


def compiled():
    """The compiled module, or None when it is not built."""
    try:
        from cogplant import _core
    except ImportError:
        return None
    return _core
