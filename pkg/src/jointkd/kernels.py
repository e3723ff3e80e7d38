"""Kernel backend selection.

The compiled extension is used when it imports; set ``JOINTKD_PURE=1`` to
force the numpy fallback. ``BACKEND`` names whichever one won.
"""

import os

from . import _kernels_py

if os.environ.get("JOINTKD_PURE", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
