"""Dense float tensors with taped reverse-mode differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, every
primitive records a backward closure on a dynamic tape, and ``backward``
walks the tape in reverse topological order. Model compute runs in
float32 by default; float64 is supported end to end so finite-difference
oracles can check gradients at full precision.

Reductions use numpy's fixed pairwise order, so forward results are
bitwise reproducible for identical inputs on the same build. A graph is
consumed by ``backward`` and cannot be replayed; rerun the forward pass
to differentiate again.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonScalarLossError(ValueError):
    """backward() was called on a tensor with more than one element."""


class Tensor:
    """A dense float32/float64 array plus optional gradient bookkeeping.

    ``requires_grad`` marks the tensor as differentiable; leaves (tensors
    created directly rather than by an op) receive ``grad`` after
    ``backward``. Interior nodes carry their parents and a backward
    closure until the tape is consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, parents=(), grad_fn=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._grad_fn = grad_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # operator sugar; scalars become constants of the tensor's dtype
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self.dtype))

    def __getitem__(self, key):
        return getitem(self, key)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng, shape, std=1.0, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(
        (rng.standard_normal(shape) * std).astype(dtype), requires_grad=requires_grad
    )


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _from_op(data, inputs, grad_fn) -> Tensor:
    parents = tuple(p for p in inputs if isinstance(p, Tensor) and p.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, grad_fn=grad_fn)


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate gradients of ``loss`` into every requires_grad leaf.

    The tape is freed as it is consumed; a second backward on the same
    graph raises because the closures are gone.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in node._grad_fn(g):
            if not (isinstance(parent, Tensor) and parent.requires_grad):
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
        node._grad_fn = None
        node._parents = ()


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} + {b.shape}") from e

    def grad_fn(g):
        return ((a, _sum_to(g, a.shape)), (b, _sum_to(g, b.shape)))

    return _from_op(data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} - {b.shape}") from e

    def grad_fn(g):
        return ((a, _sum_to(g, a.shape)), (b, _sum_to(-g, b.shape)))

    return _from_op(data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} * {b.shape}") from e

    def grad_fn(g):
        return ((a, _sum_to(g * b.data, a.shape)), (b, _sum_to(g * a.data, b.shape)))

    return _from_op(data, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: {a.shape} / {b.shape}") from e

    def grad_fn(g):
        ga = _sum_to(g / b.data, a.shape)
        gb = _sum_to(-g * a.data / (b.data * b.data), b.shape)
        return ((a, ga), (b, gb))

    return _from_op(data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    def grad_fn(g):
        return ((a, -g),)

    return _from_op(-a.data, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = _sum_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _sum_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ((a, ga), (b, gb))

    return _from_op(data, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return ((x, g * out * (1.0 - out)),)

    return _from_op(out, (x,), grad_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return ((x, g * (x.data > 0)),)

    return _from_op(out, (x,), grad_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with the erf form."""
    d = x.data
    inv_sqrt2 = d.dtype.type(1.0 / math.sqrt(2.0))
    cdf = 0.5 * (1.0 + _erf(d * inv_sqrt2))
    out = d * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * d * d) * d.dtype.type(1.0 / math.sqrt(2.0 * math.pi))
        return ((x, g * (cdf + d * pdf)),)

    return _from_op(out, (x,), grad_fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def grad_fn(g):
        return ((x, g * out),)

    return _from_op(out, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def grad_fn(g):
        return ((x, g / x.data),)

    return _from_op(out, (x,), grad_fn)


def sin(x: Tensor) -> Tensor:
    def grad_fn(g):
        return ((x, g * np.cos(x.data)),)

    return _from_op(np.sin(x.data), (x,), grad_fn)


def cos(x: Tensor) -> Tensor:
    def grad_fn(g):
        return ((x, -g * np.sin(x.data)),)

    return _from_op(np.cos(x.data), (x,), grad_fn)


def absval(x: Tensor) -> Tensor:
    def grad_fn(g):
        return ((x, g * np.sign(x.data)),)

    return _from_op(np.abs(x.data), (x,), grad_fn)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def grad_fn(g):
        return ((x, g * 0.5 / out),)

    return _from_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            gx = np.broadcast_to(g, x.shape)
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            gx = np.broadcast_to(gk, x.shape)
        return ((x, gx.astype(x.dtype, copy=False)),)

    return _from_op(data, (x,), grad_fn)


def mean_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax]
    s = sum_(x, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / count, dtype=x.dtype)))


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def grad_fn(g):
        return ((x, g.reshape(x.shape)),)

    return _from_op(data, (x,), grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inv = np.argsort(axes)

    def grad_fn(g):
        return ((x, g.transpose(inv)),)

    return _from_op(data, (x,), grad_fn)


def astype(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    data = x.data.astype(dtype)

    def grad_fn(g):
        return ((x, g.astype(x.dtype)),)

    return _from_op(data, (x,), grad_fn)


def concat(parts, axis=0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[p.shape for p in parts]} on axis {axis}") from e
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(parts, pieces))

    return _from_op(data, tuple(parts), grad_fn)


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int/ellipsis) indexing. Fancy indexing goes through gather_rows."""
    data = x.data[key]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return ((x, gx),)

    return _from_op(data, (x,), grad_fn)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of ``x`` along axis 0 with an integer array of any shape.

    Output shape is ``idx.shape + x.shape[1:]``; backward scatter-adds, so
    duplicate indices accumulate.
    """
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    data = x.data[idx]

    def grad_fn(g):
        cols = int(np.prod(x.shape[1:])) if x.ndim > 1 else 1
        flat_idx = idx.reshape(-1)
        gf = g.reshape(flat_idx.size, cols)
        # bincount on flattened (row, col) pairs is much faster than np.add.at
        comb = flat_idx[:, None] * cols + np.arange(cols)[None, :]
        acc = np.bincount(
            comb.ravel(), weights=gf.ravel().astype(np.float64), minlength=x.shape[0] * cols
        )
        return ((x, acc.reshape(x.shape).astype(x.dtype)),)

    return _from_op(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# normalization and attention kernels


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis=-1, eps=1e-5) -> Tensor:
    """Normalize over ``axis`` (an int or tuple), then scale and shift.

    gamma/beta must broadcast against x. With axis=1 on NCHW maps this is
    the per-position channel normalization used inside the encoder.
    """
    axes = axis if isinstance(axis, tuple) else (axis,)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def grad_fn(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=axes, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        ggamma = _sum_to(g * xhat, gamma.shape)
        gbeta = _sum_to(g, beta.shape)
        return ((x, gx.astype(x.dtype, copy=False)), (gamma, ggamma), (beta, gbeta))

    return _from_op(data, (x, gamma, beta), grad_fn)


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((x, out * (g - dot)),)

    return _from_op(out, (x,), grad_fn)


def masked_softmax(x: Tensor, mask, axis=-1) -> Tensor:
    """Softmax over entries where ``mask`` is True; fully masked rows give zeros."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    neg = np.where(m, x.data, -np.inf)
    mx = neg.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(m, np.exp(x.data - mx), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = (e / np.where(denom == 0.0, 1.0, denom)).astype(x.dtype, copy=False)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((x, (out * (g - dot)).astype(x.dtype, copy=False)),)

    return _from_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# conv / pooling


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2D convolution on NCHW input with an OIHW kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {w.shape}")
    b_, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d: {c} input channels vs kernel expecting {c2}")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    acc = np.zeros((b_, ho, wo, o), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
            acc += np.tensordot(patch, w.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gt = g.transpose(0, 2, 3, 1)
        grads = []
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(gt, w.data[:, :, i, j], axes=([3], [0]))
                    dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += contrib.transpose(
                        0, 3, 1, 2
                    )
            dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
            grads.append((x, dx))
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
                    dw[:, :, i, j] = np.tensordot(gt, patch, axes=([0, 1, 2], [0, 2, 3]))
            grads.append((w, dw))
        if bias is not None and bias.requires_grad:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _from_op(out, inputs, grad_fn)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected NCHW, got {x.shape}")
    b_, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d: odd spatial dims {h}x{w}")
    r = x.data.reshape(b_, c, h // 2, 2, w // 2, 2)
    out = r.mean(axis=(3, 5))

    def grad_fn(g):
        q = x.dtype.type(0.25)
        gx = np.broadcast_to((g * q)[:, :, :, None, :, None], (b_, c, h // 2, 2, w // 2, 2))
        return ((x, gx.reshape(x.shape).astype(x.dtype, copy=False)),)

    return _from_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# losses


def sigmoid_bce(logits: Tensor, targets, weights=None) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable.

    ``targets`` (and optional ``weights``) are plain arrays, not tensors;
    reduction is left to the caller.
    """
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    w = None
    if weights is not None:
        w = np.asarray(weights, dtype=z.dtype)
        loss = loss * w

    def grad_fn(g):
        sig = np.empty_like(z)
        posm = z >= 0
        sig[posm] = 1.0 / (1.0 + np.exp(-z[posm]))
        ex = np.exp(z[~posm])
        sig[~posm] = ex / (1.0 + ex)
        dz = (sig - y) * g
        if w is not None:
            dz = dz * w
        return ((logits, dz),)

    return _from_op(loss, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# sinusoidal position encoding


def sinusoidal_encode(v, num_freqs=10) -> np.ndarray:
    """Encode 3-vectors as interleaved (sin, cos) pairs per coordinate.

    For each coordinate c and frequency 2^j (j = 0..num_freqs-1) the output
    holds sin(2^j pi c) then cos(2^j pi c), coordinate-major. Input shape
    (..., 3) gives output shape (..., 6 * num_freqs).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ShapeError(f"sinusoidal_encode expects (..., 3), got {v.shape}")
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    ang = v[..., :, None] * freqs
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(v.shape[:-1] + (6 * num_freqs,))


def encode_positions(x: Tensor, num_freqs=10) -> Tensor:
    """Differentiable counterpart of sinusoidal_encode, same layout."""
    if x.shape[-1] != 3:
        raise ShapeError(f"encode_positions expects (..., 3), got {x.shape}")
    freqs = Tensor(((2.0 ** np.arange(num_freqs)) * np.pi).astype(x.dtype))
    ang = mul(reshape(x, x.shape + (1,)), freqs)
    s = reshape(sin(ang), ang.shape + (1,))
    c = reshape(cos(ang), ang.shape + (1,))
    sc = concat([s, c], axis=-1)
    return reshape(sc, x.shape[:-1] + (6 * num_freqs,))
