"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``ACTSEL_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ACTSEL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

sample_sequential = _impl.sample_sequential
softmax_xent_rows = _impl.softmax_xent_rows

__all__ = ["BACKEND", "sample_sequential", "softmax_xent_rows"]
