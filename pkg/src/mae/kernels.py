"""Backend selection for the row-wise kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``MAE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from mae import _kernels_py

if os.environ.get("MAE_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from mae import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

masked_softmax = _impl.masked_softmax
softmax_backward = _impl.softmax_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
sample_categorical = _impl.sample_categorical

__all__ = [
    "BACKEND",
    "masked_softmax",
    "softmax_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "sample_categorical",
]
