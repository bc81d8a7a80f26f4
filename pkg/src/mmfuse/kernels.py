"""Kernel backend selection.

The compiled extension is used when it imports; set ``MMFUSE_PURE=1`` to force
the numpy fallback. ``BACKEND`` names whichever is active.
"""
import os

import numpy as np

from . import _pykernels

if os.environ.get("MMFUSE_PURE") == "1":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"


def _rows(x):
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1, x.shape[-1])


def softmax_lastdim(x):
    return _impl.softmax_rows(_rows(x)).reshape(x.shape)


def softmax_lastdim_backward(y, gy):
    return _impl.softmax_rows_backward(_rows(y), _rows(gy)).reshape(y.shape)


def layer_norm_lastdim(x, eps):
    xhat, rstd = _impl.layer_norm_rows(_rows(x), float(eps))
    return xhat.reshape(x.shape), rstd


def layer_norm_lastdim_backward(xhat, rstd, gxhat):
    return _impl.layer_norm_rows_backward(_rows(xhat), rstd, _rows(gxhat)).reshape(xhat.shape)


def lcs_length(a, b):
    return int(_impl.lcs_length(np.ascontiguousarray(a, dtype=np.int64),
                                np.ascontiguousarray(b, dtype=np.int64)))


def interp_matrix(src_len, dst_len):
    return _impl.interp_matrix(int(src_len), int(dst_len))
