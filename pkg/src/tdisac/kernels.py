"""Kernel selection: the compiled extension when available, numpy otherwise.

Set ``TDISAC_PURE_PYTHON=1`` to force the numpy versions.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("TDISAC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        BACKEND = "cython"
else:
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py

music_denominator = _impl.music_denominator
mean_channel_error = _impl.mean_channel_error

__all__ = ["BACKEND", "music_denominator", "mean_channel_error"]
