"""Select the compiled meshing kernels when available.

``BACKEND`` is ``"cython"`` or ``"python"``.  Setting the environment
variable ``TRILATTICE_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py
from ._kernels_py import as_arrays, rosy_wrap

if os.environ.get("TRILATTICE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _kernels_py
        BACKEND = "python"

position_sweeps = _impl.position_sweeps
rosy_sweeps = _impl.rosy_sweeps
position_round = _impl.position_round
compat_position = _impl.compat_position

__all__ = [
    "BACKEND",
    "as_arrays",
    "compat_position",
    "position_round",
    "position_sweeps",
    "rosy_sweeps",
    "rosy_wrap",
]
