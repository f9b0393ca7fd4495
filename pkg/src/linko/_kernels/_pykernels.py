"""Pure numpy implementations of the graph kernels.

Segments are CSR-style: edges are sorted by destination and ``seg_ptr[s]:seg_ptr[s+1]``
holds the edges of segment ``s``. Every segment must be nonempty.
"""

import numpy as np

BACKEND = "python"


def _segment_ids(seg_ptr):
    return np.repeat(np.arange(len(seg_ptr) - 1), np.diff(seg_ptr))


def cooccurrence(indptr, indices, n):
    counts = np.zeros((n, n), dtype=np.int64)
    for v in range(len(indptr) - 1):
        codes = indices[indptr[v]:indptr[v + 1]]
        if len(codes):
            counts[np.ix_(codes, codes)] += 1
    return counts


def segment_softmax(scores, seg_ptr):
    starts = seg_ptr[:-1]
    seg = _segment_ids(seg_ptr)
    mx = np.maximum.reduceat(scores, starts, axis=0)
    ex = np.exp(scores - mx[seg])
    den = np.add.reduceat(ex, starts, axis=0)
    return ex / den[seg]


def segment_softmax_backward(alpha, grad_alpha, seg_ptr):
    seg = _segment_ids(seg_ptr)
    dot = np.add.reduceat(alpha * grad_alpha, seg_ptr[:-1], axis=0)
    return alpha * (grad_alpha - dot[seg])


def spmm_heads(alpha, src, seg_ptr, values):
    contrib = alpha[:, :, None] * values[src]
    return np.add.reduceat(contrib, seg_ptr[:-1], axis=0)


def spmm_heads_backward(alpha, src, seg_ptr, values, grad_out):
    seg = _segment_ids(seg_ptr)
    g = grad_out[seg]
    grad_alpha = np.einsum("ehf,ehf->eh", g, values[src])
    grad_values = np.zeros_like(values)
    np.add.at(grad_values, src, alpha[:, :, None] * g)
    return grad_alpha, grad_values
