"""Backend selection for the geometric kernels.

The compiled extension is used when it imports cleanly; setting
``SHAPEDIFF_PURE_PYTHON=1`` forces the numpy implementation.
"""

import os

from . import _pykernels

if os.environ.get("SHAPEDIFF_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

knn_indices = _impl.knn_indices
sphere_sdf = _impl.sphere_sdf
buried_mask = _impl.buried_mask
gaussian_overlap = _impl.gaussian_overlap
nn_mean = _impl.nn_mean

__all__ = [
    "BACKEND",
    "knn_indices",
    "sphere_sdf",
    "buried_mask",
    "gaussian_overlap",
    "nn_mean",
]
