"""Tape-based reverse-mode differentiation over numpy arrays.

Operations on :class:`Tensor` objects are recorded on the innermost active
:class:`Tape` whenever at least one input requires a gradient.  Outside a
tape nothing is recorded, so the same code path doubles as an inference
path with no graph overhead.
"""

from __future__ import annotations

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of the differentiable operations executed under it."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: "Tensor"):
        self.nodes.append(node)


def no_tape_active() -> bool:
    return not _ACTIVE


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents = ()
        self.backward_fn = None
        self.name = name

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

    @property
    def is_leaf(self):
        return self.backward_fn is None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def param(data, name=None) -> Tensor:
    """Leaf tensor that accumulates gradients (callers zero it explicitly)."""
    return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _node(data, parents, backward) -> Tensor:
    if _ACTIVE and any(p.requires_grad for p in parents):
        out = Tensor(data)
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward
        _ACTIVE[-1].record(out)
        return out
    return Tensor(data)


custom_op = _node


def backprop(tape: Tape, seed=1.0, output: Tensor | None = None) -> dict:
    """Propagate ``seed`` backwards from ``output`` (default: last node on tape).

    Leaf gradients accumulate into ``Tensor.grad``.  Returns a mapping from
    each reached leaf to its accumulated gradient.
    """
    if output is None:
        if not tape.nodes:
            raise ValueError("backprop: tape is empty, no terminal node to differentiate")
        output = tape.nodes[-1]
    if output.size != 1:
        raise ValueError(
            f"backprop: terminal node must be scalar, got shape {output.shape}"
        )
    if not output.requires_grad:
        return {}
    grads = {id(output): np.full(output.shape, seed, dtype=output.dtype)}
    reached = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.is_leaf:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += pg
                reached[p] = p.grad
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    return reached


# ---------------------------------------------------------------- helpers


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ----------------------------------------------------------- elementwise


def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw)


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    out = a.data**p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a):
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sin(a):
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def bw(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _node(out, (a,), bw)


def clamp_min(a, lo):
    """max(a, lo); the gradient is zero on the clamped side and at the boundary."""
    keep = a.data > lo
    return _node(np.where(keep, a.data, np.asarray(lo, a.dtype)), (a,), lambda g: (g * keep,))


def clamp_max(a, hi):
    keep = a.data < hi
    return _node(np.where(keep, a.data, np.asarray(hi, a.dtype)), (a,), lambda g: (g * keep,))


def where(cond, a, b):
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return (
            _unbroadcast(np.where(cond, g, 0), a.shape),
            _unbroadcast(np.where(cond, 0, g), b.shape),
        )

    return _node(np.where(cond, a.data, b.data), (a, b), bw)


# ------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _node(np.asarray(out, dtype=a.dtype), (a,), bw)


# ----------------------------------------------------------------- shape


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(
        isinstance(i, (np.ndarray, list)) and np.asarray(i).dtype != bool for i in parts
    )

    def bw(g):
        out = np.zeros_like(a.data)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return _node(a.data[idx], (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------- image layers


@njit(cache=True)
def _col2im(gcols, hp, wp, s):
    """Scatter-add (n, ho, wo, kh, kw, c) column gradients back onto the padded input."""
    n, ho, wo, kh, kw, c = gcols.shape
    out = np.zeros((n, hp, wp, c), gcols.dtype)
    for b in range(n):
        for y in range(ho):
            for x in range(wo):
                for i in range(kh):
                    yy = y * s + i
                    for j in range(kw):
                        xx = x * s + j
                        for ch in range(c):
                            out[b, yy, xx, ch] += gcols[b, y, x, i, j, ch]
    return out


def conv2d_raw(x, w, b=None, stride=1, padding=0):
    """2-D convolution, channels-last, on (H, W, C) or (N, H, W, C) input.

    ``w`` has shape (kh, kw, cin, cout).
    """
    xd = x.data
    single = xd.ndim == 3
    if single:
        xd = xd[None]
    if xd.ndim != 4:
        raise ValueError(f"conv2d: expected (H,W,C) or (N,H,W,C) input, got shape {x.shape}")
    n, h, wd, c = xd.shape
    kh, kw, ci, co = w.shape
    if c != ci:
        raise ValueError(
            f"conv2d: input shape {x.shape} has {c} channels but weight shape "
            f"{w.shape} expects {ci} in-channels"
        )
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    p, s = padding, stride
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input shape {x.shape} too small for kernel {w.shape}")
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s, :]).reshape(-1, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, co)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, co)
    if single:
        out = out[0]

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, co)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = _col2im(gcols, h + 2 * p, wd + 2 * p, s)
            gx = gxp[:, p : p + h, p : p + wd, :] if p else gxp
            gx = gx[0] if single else gx
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, parents, bw)


def upsample_nearest(x, factor=2):
    """Nearest-neighbour upsampling of the two spatial axes preceding channels."""
    d = x.data
    out = np.repeat(np.repeat(d, factor, axis=-3), factor, axis=-2)

    def bw(g):
        *lead, hh, ww, c = g.shape
        g = g.reshape(*lead, hh // factor, factor, ww // factor, factor, c)
        return (g.sum(axis=(-4, -2)),)

    return _node(out, (x,), bw)


def _interp_matrix(n_out, n_in, dtype):
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - f)
    np.add.at(m, (rows, i1), f)
    return m


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize of (..., H, W, C) with half-pixel centres and edge clamping."""
    *_, h, w, _ = x.shape
    ay = _interp_matrix(out_h, h, x.dtype)
    ax = _interp_matrix(out_w, w, x.dtype)
    out = np.einsum("ph,...hwc->...pwc", ay, x.data)
    out = np.einsum("qw,...pwc->...pqc", ax, out)

    def bw(g):
        gi = np.einsum("qw,...pqc->...pwc", ax, g)
        return (np.einsum("ph,...pwc->...hwc", ay, gi),)

    return _node(np.ascontiguousarray(out), (x,), bw)


def sample_bilinear(feat, x, y):
    """Bilinearly sample ``feat`` (H, W, C) at float pixel positions.

    ``x`` and ``y`` share a shape S; the result has shape S + (C,).  Corners
    outside the image contribute zero.  Differentiable with respect to the
    features and both coordinates.
    """
    feat, x = _pair(feat, x)
    y = as_tensor(y)
    f = feat.data
    h, w, c = f.shape
    xd, yd = x.data, y.data
    x0 = np.floor(xd).astype(np.int64)
    y0 = np.floor(yd).astype(np.int64)
    fx = (xd - x0).astype(f.dtype)
    fy = (yd - y0).astype(f.dtype)
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            flat = np.where(ok, yi * w + xi, 0)
            corners.append((flat, ok))
    ff = f.reshape(h * w, c)
    vals = [np.where(ok[..., None], ff[flat], 0) for flat, ok in corners]
    wx = (1 - fx, fx)
    wy = (1 - fy, fy)
    weights = [wy[0] * wx[0], wy[0] * wx[1], wy[1] * wx[0], wy[1] * wx[1]]
    out = sum(v * wgt[..., None] for v, wgt in zip(vals, weights))

    def bw(g):
        gf = gx = gy = None
        if feat.requires_grad:
            acc = np.zeros((h * w, c), dtype=g.dtype)
            for (flat, ok), wgt in zip(corners, weights):
                contrib = g * (wgt * ok)[..., None]
                np.add.at(acc, flat.reshape(-1), contrib.reshape(-1, c))
            gf = acc.reshape(h, w, c)
        if x.requires_grad:
            v00, v01, v10, v11 = vals
            dx_ = (1 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10)
            gx = (g * dx_).sum(axis=-1)
        if y.requires_grad:
            v00, v01, v10, v11 = vals
            dy_ = (1 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01)
            gy = (g * dy_).sum(axis=-1)
        return gf, gx, gy

    return _node(out.astype(f.dtype, copy=False), (feat, x, y), bw)


def sample_linear_last(volume, pos):
    """Linearly interpolate ``volume`` (..., K) along its last axis.

    ``pos`` has shape (..., R): R query positions per leading index.  Samples
    outside [0, K-1] read zero padding.  Returns (..., R).
    """
    volume, pos = _pair(volume, pos)
    v = volume.data
    k = v.shape[-1]
    p = pos.data
    i0 = np.floor(p).astype(np.int64)
    f = (p - i0).astype(v.dtype)
    i1 = i0 + 1
    ok0 = (i0 >= 0) & (i0 < k)
    ok1 = (i1 >= 0) & (i1 < k)
    v0 = np.where(ok0, np.take_along_axis(v, np.clip(i0, 0, k - 1), axis=-1), 0)
    v1 = np.where(ok1, np.take_along_axis(v, np.clip(i1, 0, k - 1), axis=-1), 0)
    out = (1 - f) * v0 + f * v1

    def bw(g):
        gv = gp = None
        if volume.requires_grad:
            lead = v.shape[:-1]
            acc = np.zeros((int(np.prod(lead)), k), dtype=g.dtype)
            rows = np.broadcast_to(np.arange(acc.shape[0]).reshape(lead + (1,)), p.shape)
            for idx, ok, wgt in ((i0, ok0, 1 - f), (i1, ok1, f)):
                sel = ok.reshape(-1)
                np.add.at(
                    acc,
                    (rows.reshape(-1)[sel], idx.reshape(-1)[sel]),
                    (g * wgt).reshape(-1)[sel],
                )
            gv = acc.reshape(v.shape)
        if pos.requires_grad:
            gp = g * (v1 - v0)
        return gv, gp

    return _node(out.astype(v.dtype, copy=False), (volume, pos), bw)
