"""Segment/scatter kernels with backend selection at import time.

The compiled Cython extension is preferred when present; the numpy
implementation is the fallback and the semantic reference. Set
``HICQA_KERNELS=py`` or ``HICQA_KERNELS=c`` to force a backend
(forcing ``c`` raises if the extension is missing).
"""

import os

import numpy as np

from . import _np as _numpy_backend

_forced = os.environ.get("HICQA_KERNELS", "").lower()

if _forced in ("py", "numpy"):
    _impl = _numpy_backend
elif _forced in ("c", "cython"):
    from . import _ck as _impl  # noqa: F401
else:
    try:
        from . import _ck as _impl
    except ImportError:
        _impl = _numpy_backend

BACKEND = _impl.BACKEND


def _as_idx(idx):
    return np.ascontiguousarray(idx, dtype=np.int64)


def scatter_add(out, idx, src):
    """In-place out[idx[e]] += src[e]; ``out`` must be C-contiguous."""
    return _impl.scatter_add(out, _as_idx(idx), np.ascontiguousarray(src))


def segment_sum(src, idx, n):
    return _impl.segment_sum(np.ascontiguousarray(src), _as_idx(idx), int(n))


def segment_max(src, idx, n):
    return _impl.segment_max(np.ascontiguousarray(src), _as_idx(idx), int(n))


def segment_counts(idx, n):
    return _impl.segment_counts(_as_idx(idx), int(n))


def get_backends():
    """Both backends, for equivalence tests and benchmarks."""
    backends = {"numpy": _numpy_backend}
    try:
        from . import _ck

        backends["cython"] = _ck
    except ImportError:
        pass
    return backends
