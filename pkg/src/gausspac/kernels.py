"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise, or when
``GAUSSPAC_BACKEND=python`` is set, the numpy fallback is used.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("GAUSSPAC_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

count_errors = _impl.count_errors
psi_max_stats = _impl.psi_max_stats


def compiled():
    """The compiled module, or None if the extension is not available."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
