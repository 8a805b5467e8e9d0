"""Dense 2-D tensors with exact reverse-mode gradients.

Each operation records a backward closure on its output; ``backward``
topologically sorts the closure graph and applies it in reverse, so
gradients accumulate additively when a tensor feeds several ops. No
global recorder exists: independent graphs never share state, which
makes concurrent forward passes on snapshots safe.

Ops skip all recording when gradients are disabled (``no_grad``) or no
input requires them, which keeps finite-difference sweeps cheap.

All tensors are 2-D (rows, cols). Dtype is whatever the data carries;
double for verification, single for training, per caller.
"""

import contextlib

import numpy as np

from . import kernels


class GradientsDisabled:
    """Module-wide switch: inside no_grad(), ops skip closure recording."""

    enabled = True


@contextlib.contextmanager
def no_grad():
    prev = GradientsDisabled.enabled
    GradientsDisabled.enabled = False
    try:
        yield
    finally:
        GradientsDisabled.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() requires a 1x1 tensor")
        return float(self.data[0, 0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"


def constant(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    return Tensor(arr)


def parameter(data, name=None):
    return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)


def _out(data, parents, backward):
    """Wrap op output, recording the closure only when it can matter."""
    out = Tensor(data)
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    return out


def _tracking(*parents):
    if not GradientsDisabled.enabled:
        return False
    for p in parents:
        if p.requires_grad:
            return True
    return False


def backward(loss):
    """Reverse sweep from a 1x1 loss tensor; grads land in .grad additively."""
    if loss.data.shape != (1, 1):
        raise ValueError("backward expects a scalar (1x1) loss")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    data = a.data + b.data
    if not _tracking(a, b):
        return Tensor(data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _out(data, (a, b), bwd)


def mul(a, b):
    """Elementwise product, same shapes."""
    data = a.data * b.data
    if not _tracking(a, b):
        return Tensor(data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _out(data, (a, b), bwd)


def scale(a, c):
    """Multiply by a python float."""
    c = float(c)
    data = a.data * c
    if not _tracking(a):
        return Tensor(data)

    def bwd(g):
        a.accumulate(g * c)

    return _out(data, (a,), bwd)


def matmul(a, b):
    data = a.data @ b.data
    if not _tracking(a, b):
        return Tensor(data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _out(data, (a, b), bwd)


def affine(x, w, b):
    """y = x @ w + b with a (1, d_out) bias broadcast over rows."""
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"affine: {x.data.shape} @ {w.data.shape}")
    if b.data.shape != (1, w.data.shape[1]):
        raise ValueError(f"affine: bias shape {b.data.shape} != (1, {w.data.shape[1]})")
    data = x.data @ w.data + b.data
    if not _tracking(x, w, b):
        return Tensor(data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g @ w.data.T)
        if w.requires_grad:
            w.accumulate(x.data.T @ g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0, keepdims=True))

    return _out(data, (x, w, b), bwd)


def scale_cols(x, s):
    """y[:, j] = x[:, j] * s[0, j]."""
    data = x.data * s.data
    if not _tracking(x, s):
        return Tensor(data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g * s.data)
        if s.requires_grad:
            s.accumulate((g * x.data).sum(axis=0, keepdims=True))

    return _out(data, (x, s), bwd)


def leaky_relu(x, slope=0.0):
    """max(x, slope*x) for slope in [0, 1); slope 0 is plain ReLU.
    Subgradient at 0 follows the slope branch."""
    data = np.maximum(x.data, 0.0) if slope == 0.0 else np.maximum(x.data, slope * x.data)
    if not _tracking(x):
        return Tensor(data)
    mask = x.data > 0

    def bwd(g):
        x.accumulate(np.where(mask, g, slope * g))

    return _out(data, (x,), bwd)


def relu(x):
    return leaky_relu(x, 0.0)


def concat_cols(parts):
    data = np.concatenate([p.data for p in parts], axis=1)
    if not _tracking(*parts):
        return Tensor(data)
    widths = [p.data.shape[1] for p in parts]

    def bwd(g):
        at = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate(g[:, at : at + w])
            at += w

    return _out(data, tuple(parts), bwd)


def sum_all(x):
    data = np.array([[x.data.sum()]], dtype=x.dtype)
    if not _tracking(x):
        return Tensor(data)

    def bwd(g):
        x.accumulate(np.full_like(x.data, g[0, 0]))

    return _out(data, (x,), bwd)


def mean_rows(x):
    """Column means as a (1, d) tensor."""
    n = x.data.shape[0]
    data = x.data.mean(axis=0, keepdims=True)
    if not _tracking(x):
        return Tensor(data)

    def bwd(g):
        x.accumulate(np.repeat(g, n, axis=0) / n)

    return _out(data, (x,), bwd)


# ---------------------------------------------------------------------------
# graph gather/scatter
#
# Index arrays must lie in [0, n); the compiled kernels bounds-check each
# element and numpy fancy indexing rejects overflow, so dangling edges
# raise IndexError from either backend.


def gather_rows(x, idx):
    data = x.data[idx]
    if not _tracking(x):
        return Tensor(data)

    def bwd(g):
        dx = np.zeros_like(x.data)
        kernels.scatter_add(dx, idx, g)
        x.accumulate(dx)

    return _out(data, (x,), bwd)


def scatter_add_rows(x, idx, n):
    """out[i] = sum of x rows with idx == i; rows with no source stay 0."""
    data = kernels.segment_sum(x.data, idx, n)
    if not _tracking(x):
        return Tensor(data)

    def bwd(g):
        x.accumulate(g[idx])

    return _out(data, (x,), bwd)


def segment_mean(x, idx, n):
    """Mean of x rows per destination id; empty destinations yield zero rows."""
    counts = kernels.segment_counts(idx, n).astype(x.dtype)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)[:, None]
    data = kernels.segment_sum(x.data, idx, n) * inv
    if not _tracking(x):
        return Tensor(data)

    def bwd(g):
        x.accumulate((g * inv)[idx])

    return _out(data, (x,), bwd)


def segment_softmax(logits, segments, n_segments):
    """Softmax independently over rows sharing a segment id, per column.

    Stabilized by per-segment max subtraction, so extreme logits are safe.
    """
    n_segments = int(n_segments)
    if n_segments <= 0:
        raise ValueError("segment_softmax: empty segment id space")
    z = logits.data
    if len(segments) != z.shape[0]:
        raise ValueError("segment_softmax: segments misaligned with logits")
    seg_max = kernels.segment_max(z, segments, n_segments)
    e = np.exp(z - seg_max[segments])
    denom = kernels.segment_sum(e, segments, n_segments)
    alpha = e / denom[segments]
    if not _tracking(logits):
        return Tensor(alpha)

    def bwd(g):
        weighted = kernels.segment_sum(alpha * g, segments, n_segments)
        logits.accumulate(alpha * (g - weighted[segments]))

    return _out(alpha, (logits,), bwd)


# ---------------------------------------------------------------------------
# head-packed ops: columns of shape (H*d) are H independent per-head blocks


def headwise_dot(x, w):
    """scores[e, h] = x[e, h*d:(h+1)*d] . w[:, h] for x (E, H*d), w (d, H)."""
    d, h = w.data.shape
    e = x.data.shape[0]
    if x.data.shape[1] != h * d:
        raise ValueError("headwise_dot: width mismatch")
    x3 = x.data.reshape(e, h, d)
    data = np.einsum("ehd,dh->eh", x3, w.data)
    if not _tracking(x, w):
        return Tensor(data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(np.einsum("eh,dh->ehd", g, w.data).reshape(e, h * d))
        if w.requires_grad:
            w.accumulate(np.einsum("ehd,eh->dh", x3, g))

    return _out(data, (x, w), bwd)


def headwise_scale(x, s):
    """y[e, h*d+j] = x[e, h*d+j] * s[e, h]: per-head row scaling."""
    e, hd = x.data.shape
    h = s.data.shape[1]
    d = hd // h
    if h * d != hd or s.data.shape[0] != e:
        raise ValueError("headwise_scale: shape mismatch")
    x3 = x.data.reshape(e, h, d)
    data = (x3 * s.data[:, :, None]).reshape(e, hd)
    if not _tracking(x, s):
        return Tensor(data)

    def bwd(g):
        g3 = g.reshape(e, h, d)
        if x.requires_grad:
            x.accumulate((g3 * s.data[:, :, None]).reshape(e, hd))
        if s.requires_grad:
            s.accumulate((g3 * x3).sum(axis=2))

    return _out(data, (x, s), bwd)


def head_mean(x, n_heads):
    """Average the H column blocks of x (n, H*d) down to (n, d)."""
    n, hd = x.data.shape
    d = hd // n_heads
    if d * n_heads != hd:
        raise ValueError("head_mean: width not divisible by head count")
    data = x.data.reshape(n, n_heads, d).mean(axis=1)
    if not _tracking(x):
        return Tensor(data)

    def bwd(g):
        x.accumulate(np.tile(g / n_heads, (1, n_heads)))

    return _out(data, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization / regularization / losses


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row standardization followed by a learnable affine."""
    inv_d = 1.0 / x.data.shape[1]
    mu = x.data.sum(axis=1, keepdims=True) * inv_d
    centered = x.data - mu
    var = (centered * centered).sum(axis=1, keepdims=True) * inv_d
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data
    if not _tracking(x, gamma, beta):
        return Tensor(data)

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=0, keepdims=True))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            gx = g * gamma.data
            term1 = gx.mean(axis=1, keepdims=True)
            term2 = (gx * xhat).mean(axis=1, keepdims=True)
            x.accumulate(inv_std * (gx - term1 - xhat * term2))

    return _out(data, (x, gamma, beta), bwd)


def dropout(x, p, mode, rng):
    """Inverted dropout: train zeroes with prob p and rescales; eval is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.dtype)
    factor = 1.0 / (1.0 - p)
    data = x.data * keep * factor
    if not _tracking(x):
        return Tensor(data)

    def bwd(g):
        x.accumulate(g * keep * factor)

    return _out(data, (x,), bwd)


def softmax_xent(z, targets, weights=None):
    """Per-row weighted cross-entropy against target distributions, as a 1x1 mean.

    loss = sum_i w_i * (logZ_i - t_i . z_i) / sum_i w_i, with rows of
    ``targets`` summing to 1. Covers soft binary targets and one-hot
    class-weighted targets alike.
    """
    n, k = z.data.shape
    t = targets if isinstance(targets, np.ndarray) else np.asarray(targets, dtype=z.dtype)
    if t.shape != (n, k):
        raise ValueError(f"targets shape {t.shape} != {z.data.shape}")
    w = None
    if weights is not None:
        w = weights if isinstance(weights, np.ndarray) else np.asarray(weights, dtype=z.dtype)
    if not np.isfinite(z.data.sum()):
        raise FloatingPointError("non-finite logits in cross-entropy")
    zmax = z.data.max(axis=1, keepdims=True)
    logz = zmax + np.log(np.exp(z.data - zmax).sum(axis=1, keepdims=True))
    per_row = logz[:, 0] - (t * z.data).sum(axis=1)
    if w is None:
        total_w = float(n)
        loss = per_row.sum() / total_w
    else:
        total_w = float(w.sum())
        if total_w <= 0:
            raise ValueError("softmax_xent: weights sum to zero")
        loss = float((w * per_row).sum() / total_w)
    data = np.array([[loss]], dtype=z.dtype)
    if not _tracking(z):
        return Tensor(data)

    def bwd(g):
        p = np.exp(z.data - logz)
        if w is None:
            z.accumulate((g[0, 0] / total_w) * (p - t))
        else:
            z.accumulate(g[0, 0] * (p - t) * (w / total_w)[:, None])

    return _out(data, (z,), bwd)


def softmax(z):
    """Plain numpy row softmax (no gradient); for eval-time scoring."""
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# verification


def tape_grads(fn, params):
    """Analytic gradients of fn() w.r.t. params via one backward sweep."""
    loss = fn()
    if not np.isfinite(loss.data.sum()):
        raise FloatingPointError("non-finite loss in tape_grads")
    for p in params:
        p.zero_grad()
    backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def finite_difference_grads(fn, params, step=1e-4):
    """Central differences of fn() for every element of every parameter."""
    grads = []
    with no_grad():
        for p in params:
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            g = np.zeros(flat.size, dtype=np.float64)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = fn().data[0, 0]
                flat[i] = orig - step
                f_minus = fn().data[0, 0]
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise FloatingPointError("non-finite value in finite differences")
                g[i] = (f_plus - f_minus) / (2.0 * step)
            grads.append(g.reshape(p.data.shape))
    return grads


def max_relative_error(analytic, numeric):
    """max |a - n| / max(|a|, |n|, 1): relative for large gradients,
    absolute near zero."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        err = float((np.abs(a - n) / denom).max()) if a.size else 0.0
        if err > worst:
            worst = err
    return worst


def grad_check(fn, params, step=1e-4):
    """Max relative error between tape gradients and central differences.

    ``fn`` must be a deterministic closure returning a 1x1 loss tensor
    (run dropout in eval mode). Every element of every parameter is
    perturbed.
    """
    analytic = tape_grads(fn, params)
    numeric = finite_difference_grads(fn, params, step=step)
    return max_relative_error(analytic, numeric)
