"""Graph kernels with a compiled fast path.

The Cython extension is used when it was built; otherwise the numpy fallback
is selected. Set ``LINKO_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

_impl = _pykernels
if os.environ.get("LINKO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND


def available_backends():
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def cooccurrence(indptr, indices, n, impl=None):
    """Dense ``n x n`` count of ordered code pairs (including i == j) per visit."""
    return (impl or _impl).cooccurrence(_i64(indptr), _i64(indices), int(n))


def segment_softmax(scores, seg_ptr, impl=None):
    return (impl or _impl).segment_softmax(_f64(scores), _i64(seg_ptr))


def segment_softmax_backward(alpha, grad_alpha, seg_ptr, impl=None):
    return (impl or _impl).segment_softmax_backward(_f64(alpha), _f64(grad_alpha), _i64(seg_ptr))


def spmm_heads(alpha, src, seg_ptr, values, impl=None):
    """``out[s, h] = sum over edges e of segment s of alpha[e, h] * values[src[e], h]``."""
    return (impl or _impl).spmm_heads(_f64(alpha), _i64(src), _i64(seg_ptr), _f64(values))


def spmm_heads_backward(alpha, src, seg_ptr, values, grad_out, impl=None):
    return (impl or _impl).spmm_heads_backward(
        _f64(alpha), _i64(src), _i64(seg_ptr), _f64(values), _f64(grad_out)
    )
