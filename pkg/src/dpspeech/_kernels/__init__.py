"""Convolution kernels with a numba fast path.

The numba kernels are used when numba imports cleanly, unless the
environment variable ``DPSPEECH_NO_NUMBA`` is set to a non-empty value
other than ``0``.  Both paths agree to ~1e-12 on float64 inputs.
"""
import os

from . import numpy_impl


def _want_numba():
    flag = os.environ.get("DPSPEECH_NO_NUMBA", "")
    return flag in ("", "0")


BACKEND = "numpy"
_impl = numpy_impl
if _want_numba():
    try:
        from . import numba_impl as _impl  # noqa: F811
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _impl = numpy_impl

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
group_norm_forward = _impl.group_norm_forward
group_norm_backward = _impl.group_norm_backward
avg_pool2_forward = _impl.avg_pool2_forward
avg_pool2_backward = _impl.avg_pool2_backward

__all__ = [
    "BACKEND", "conv2d_forward", "conv2d_backward_input", "conv2d_backward_weight",
    "group_norm_forward", "group_norm_backward", "avg_pool2_forward", "avg_pool2_backward",
]
