"""Pure-numpy implementations of the segment/scatter kernels.

Reference backend: every function here defines the semantics the compiled
backend must reproduce bit-for-bit (up to float addition order, which both
backends keep in ascending element order). Negative indices are rejected
rather than wrapped.
"""

import numpy as np

BACKEND = "numpy"


def _check(idx, n, who):
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{who}: index out of range [0, {n})")


def scatter_add(out, idx, src):
    """out[idx[e], :] += src[e, :] for e in range(len(idx)), in order."""
    _check(idx, out.shape[0], "scatter_add")
    np.add.at(out, idx, src)
    return out


def segment_sum(src, idx, n):
    """Row-sum of ``src`` grouped by destination id. Empty segments stay 0."""
    _check(idx, n, "segment_sum")
    out = np.zeros((n, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


def segment_max(src, idx, n):
    """Columnwise max per segment; empty segments are -inf."""
    _check(idx, n, "segment_max")
    out = np.full((n, src.shape[1]), -np.inf, dtype=src.dtype)
    np.maximum.at(out, idx, src)
    return out


def segment_counts(idx, n):
    _check(idx, n, "segment_counts")
    return np.bincount(idx, minlength=n).astype(np.int64)
