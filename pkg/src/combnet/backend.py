"""Kernel backend selection.

The compiled extension is preferred; the numpy implementation is the
fallback.  Both expose the same four entry points with bit-identical forward
results, so everything above this module is backend-agnostic.  Set
COMBNET_BACKEND=numpy (or =compiled) to force a choice.
"""

from __future__ import annotations

import os

from . import _kernels_np

_FORCED = os.environ.get("COMBNET_BACKEND", "").strip().lower()

if _FORCED in ("numpy", "python"):
    _impl = _kernels_np
elif _FORCED == "compiled":
    from . import _ckernels as _impl
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _kernels_np


def backend_name():
    return _impl.BACKEND_NAME


def get_backend(name=None):
    """Return a kernel module by name ('compiled' / 'numpy'), default active."""
    if name is None:
        return _impl
    if name in ("numpy", "python"):
        return _kernels_np
    if name == "compiled":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
comb_forward = _impl.comb_forward
comb_backward = _impl.comb_backward
