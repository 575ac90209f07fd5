"""Kernel backend selection.

The compiled extension is used when it was built and ``FASSL_PURE_PYTHON``
is unset; otherwise the numpy implementations are used. ``BACKEND`` names
the active one.
"""

import os

from . import _kernels_py

if os.environ.get("FASSL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

lse_rows = _impl.lse_rows
l2n_rows = _impl.l2n_rows
l2n_rows_backward = _impl.l2n_rows_backward
cosine_rows = _impl.cosine_rows
cosine_rows_backward = _impl.cosine_rows_backward
nearest_cosine = _impl.nearest_cosine

__all__ = [
    "BACKEND",
    "lse_rows",
    "l2n_rows",
    "l2n_rows_backward",
    "cosine_rows",
    "cosine_rows_backward",
    "nearest_cosine",
]
