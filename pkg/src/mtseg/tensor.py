"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps a contiguous float array plus an optional gradient buffer.
Primitive operations record a backward closure and their parent nodes;
`backward()` on a scalar seeds the output gradient with 1 and replays the
recorded closures in exact reverse construction order (node ids are
assigned monotonically, so sorting the reachable subgraph by id gives a
valid reverse topological order).  Gradients accumulate across repeated
calls until cleared.

Training runs in float32 by default; gradient checks build float64 graphs.
"""

import itertools
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .resample import linear_coeffs

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_nid")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype, order="C")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self._nid = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """Constant view of this tensor's values, cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._nid, reverse=True)
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for t in nodes:
            if t._backward is not None and t.grad is not None:
                t._backward()

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _tracking(*tensors):
    return _grad_enabled and any(t.requires_grad for t in tensors)

def _attach(out, parents, backward_fn):
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward_fn

def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g

def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: operand shapes {a.data.shape} and {b.data.shape} differ")


# -- elementwise ----------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        out = Tensor(a.data + b)
        if _tracking(a):
            def bwd():
                _accum(a, out.grad)
            _attach(out, (a,), bwd)
        return out
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    if _tracking(a, b):
        def bwd():
            _accum(a, out.grad)
            _accum(b, out.grad)
        _attach(out, (a, b), bwd)
    return out


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _tracking(a, b):
        def bwd():
            _accum(a, out.grad)
            _accum(b, -out.grad)
        _attach(out, (a, b), bwd)
    return out


def mul(a, b):
    if not isinstance(b, Tensor):
        out = Tensor(a.data * b)
        if _tracking(a):
            def bwd():
                _accum(a, out.grad * b)
            _attach(out, (a,), bwd)
        return out
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    if _tracking(a, b):
        def bwd():
            _accum(a, out.grad * b.data)
            _accum(b, out.grad * a.data)
        _attach(out, (a, b), bwd)
    return out


def div(a, b):
    """Elementwise a / b.  Callers keep denominators away from zero."""
    if not isinstance(b, Tensor):
        out = Tensor(a.data / b)
        if _tracking(a):
            def bwd():
                _accum(a, out.grad / b)
            _attach(out, (a,), bwd)
        return out
    _check_same_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    if _tracking(a, b):
        def bwd():
            _accum(a, out.grad / b.data)
            _accum(b, -out.grad * a.data / (b.data * b.data))
        _attach(out, (a, b), bwd)
    return out


def neg(a):
    out = Tensor(-a.data)
    if _tracking(a):
        def bwd():
            _accum(a, -out.grad)
        _attach(out, (a,), bwd)
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0))
    if _tracking(a):
        def bwd():
            _accum(a, out.grad * (a.data > 0))
        _attach(out, (a,), bwd)
    return out


def sigmoid(a):
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    if _tracking(a):
        def bwd():
            _accum(a, out.grad * s * (1.0 - s))
        _attach(out, (a,), bwd)
    return out


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log: inputs must be strictly positive (clamp first)")
    out = Tensor(np.log(a.data))
    if _tracking(a):
        def bwd():
            _accum(a, out.grad / a.data)
        _attach(out, (a,), bwd)
    return out


# -- reductions -----------------------------------------------------------

def reduce_sum(a):
    out = Tensor(a.data.sum())
    if _tracking(a):
        def bwd():
            _accum(a, np.broadcast_to(out.grad, a.data.shape))
        _attach(out, (a,), bwd)
    return out


def reduce_mean(a):
    n = a.data.size
    out = Tensor(a.data.sum() / n)
    if _tracking(a):
        def bwd():
            _accum(a, np.broadcast_to(out.grad / n, a.data.shape))
        _attach(out, (a,), bwd)
    return out


# -- structural -----------------------------------------------------------

def concat_channels(a, b):
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: need rank-4 inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: non-channel dims differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    if _tracking(a, b):
        def bwd():
            _accum(a, out.grad[:, :ca])
            _accum(b, out.grad[:, ca:])
        _attach(out, (a, b), bwd)
    return out


def slice_rows(a, start, stop):
    """View rows [start, stop) along the leading axis as a new tensor."""
    n = a.shape[0]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_rows: bad range [{start}, {stop}) for {n} rows")
    out = Tensor(a.data[start:stop].copy())
    if _tracking(a):
        def bwd():
            g = np.zeros_like(a.data)
            g[start:stop] = out.grad
            _accum(a, g)
        _attach(out, (a,), bwd)
    return out


# -- convolution ----------------------------------------------------------

def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    x: [N,C,H,W], kernel: [K,C,kh,kw], bias: [K] or None.  The output size
    (H + 2*padding - kh) / stride + 1 must be exact, otherwise the call is
    rejected.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: need rank-4 input/kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: kernel expects {ck} input channels, input has {c}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    hp, wp = h + 2 * p, w + 2 * p
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % s or (wp - kw) % s:
        raise ShapeError(
            f"conv2d: output size not exact for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {s}, padding {p}")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1

    if p:
        xp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
        xp[:, :, p:p + h, p:p + w] = x.data
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # channel-outer layout: the gather reads contiguous rows and the GEMM
    # lands directly in NCHW, so neither direction needs a transpose copy
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    k2 = kernel.data.reshape(k, c * kh * kw)
    out3 = np.matmul(k2, cols)
    if bias is not None:
        out3 += bias.data[:, None]
    out = Tensor(out3.reshape(n, k, ho, wo))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if _tracking(*parents):
        def bwd():
            g = out.grad.reshape(n, k, ho * wo)
            if kernel.requires_grad:
                dk = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
                _accum(kernel, dk.reshape(kernel.shape))
            if bias is not None and bias.requires_grad:
                _accum(bias, out.grad.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dwin = np.matmul(k2.T, g).reshape(n, c, kh, kw, ho, wo)
                dxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
                for u in range(kh):
                    for v in range(kw):
                        dxp[:, :, u:u + s * ho:s, v:v + s * wo:s] += dwin[:, :, u, v]
                _accum(x, dxp[:, :, p:p + h, p:p + w] if p else dxp)
        _attach(out, parents, bwd)
    return out


# -- normalization --------------------------------------------------------

def group_norm(x, num_groups, gamma, beta, eps=1e-5):
    """Normalize NCHW activations per (sample, channel group), then apply a
    per-channel affine.  Channel count must be divisible by num_groups."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm: need rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    g_ = int(num_groups)
    if g_ < 1 or c % g_:
        raise ShapeError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} need ({c},)")
    cg = c // g_
    xg = x.data.reshape(n, g_, cg, h, w)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    d = xg - mu
    var = np.mean(d * d, axis=(2, 3, 4), keepdims=True)
    r = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat_g = d * r
    xhat = xhat_g.reshape(n, c, h, w)
    out = Tensor(xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1))

    if _tracking(x, gamma, beta):
        def bwd():
            gy = out.grad
            if gamma.requires_grad:
                _accum(gamma, (gy * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                _accum(beta, gy.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                m = cg * h * w
                dxhat = (gy * gamma.data.reshape(1, c, 1, 1)).reshape(n, g_, cg, h, w)
                s1 = dxhat.sum(axis=(2, 3, 4), keepdims=True)
                s2 = (dxhat * xhat_g).sum(axis=(2, 3, 4), keepdims=True)
                dx = (r / m) * (m * dxhat - s1 - xhat_g * s2)
                _accum(x, dx.reshape(n, c, h, w))
        _attach(out, (x, gamma, beta), bwd)
    return out


# -- resampling -----------------------------------------------------------

def max_pool2x2(x):
    """2x2 max pooling with stride 2; ties go to the first element scanned."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2x2: need rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2: spatial dims must be even, got {h}x{w}")
    ho, wo = h // 2, w // 2
    xr = np.ascontiguousarray(
        x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)).reshape(n, c, ho, wo, 4)
    idx = xr.argmax(axis=-1)
    out = Tensor(np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0])
    if _tracking(x):
        def bwd():
            gz = np.zeros_like(xr)
            np.put_along_axis(gz, idx[..., None], out.grad[..., None], axis=-1)
            dx = gz.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            _accum(x, dx)
        _attach(out, (x,), bwd)
    return out


def upsample_nearest2x(x):
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: need rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))
    if _tracking(x):
        def bwd():
            _accum(x, out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
        _attach(out, (x,), bwd)
    return out


def _linear_matrix(in_size, dtype):
    lo, hi, w = linear_coeffs(in_size, 2 * in_size)
    m = np.zeros((2 * in_size, in_size), dtype=dtype)
    rows = np.arange(2 * in_size)
    np.add.at(m, (rows, lo), (1.0 - w).astype(dtype))
    np.add.at(m, (rows, hi), w.astype(dtype))
    return m


def upsample_bilinear2x(x):
    """Doubles the spatial size with half-pixel-center bilinear weights."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear2x: need rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    wr = _linear_matrix(h, x.data.dtype)
    wc = _linear_matrix(w, x.data.dtype)
    out = Tensor(np.matmul(wr, np.matmul(x.data, wc.T)))
    if _tracking(x):
        def bwd():
            _accum(x, np.matmul(wr.T, np.matmul(out.grad, wc)))
        _attach(out, (x,), bwd)
    return out


# -- regularization -------------------------------------------------------

def dropout(x, rate, rng, training):
    """Inverted dropout: active only in training, scales kept units by
    1/(1-rate) so the expected activation is unchanged.  rate=0 or eval
    mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    keep *= np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    out = Tensor(x.data * keep)
    if _tracking(x):
        def bwd():
            _accum(x, out.grad * keep)
        _attach(out, (x,), bwd)
    return out


# -- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    rel_err: list
    analytic: list
    numeric: list


def grad_check(f, inputs, h=1e-5):
    """Compare backward() gradients of scalar-valued f against central
    finite differences.

    Per element the probe step is h * (1 + |x|) and the reported error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1), so an identically
    zero gradient scores 0.  Inputs must be float64 Tensors and f must be
    deterministic across calls.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check: inputs must be float64")
        t.grad = None
        t.requires_grad = True
    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    numeric = []
    with no_grad():
        for t in inputs:
            num = np.zeros_like(t.data)
            flat, nflat = t.data.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                step = h * (1.0 + abs(orig))
                flat[i] = orig + step
                fp = float(f(*inputs).data)
                flat[i] = orig - step
                fm = float(f(*inputs).data)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2.0 * step)
            numeric.append(num)

    rel = [np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
           for a, n in zip(analytic, numeric)]
    max_err = max((float(e.max()) for e in rel if e.size), default=0.0)
    return GradCheckReport(max_rel_err=max_err, rel_err=rel, analytic=analytic, numeric=numeric)
