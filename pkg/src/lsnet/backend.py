"""Kernel backend selection.

The compiled extension (:mod:`lsnet._kernels`) is preferred; the pure-numpy
implementation (:mod:`lsnet._kernels_np`) is used when the extension was not
built or when ``LSNET_PURE_PYTHON=1`` is set.  Both expose the same four
functions and are interchangeable up to float summation order.
"""

import os

from . import _kernels_np

if os.environ.get("LSNET_PURE_PYTHON", "") == "1":
    _impl = _kernels_np
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_np

BACKEND = _impl.BACKEND_NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
tconv2d_forward = _impl.tconv2d_forward
tconv2d_backward = _impl.tconv2d_backward


def available_backends():
    """Importable kernel modules, compiled one first when present."""
    mods = []
    try:
        from . import _kernels
        mods.append(_kernels)
    except ImportError:
        pass
    mods.append(_kernels_np)
    return mods
