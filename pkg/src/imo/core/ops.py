"""Differentiable primitives.

Every array operand carries a leading batch axis: images are ``[N, C, H, W]``,
volumes ``[N, C, D, H, W]``, vectors ``[N, K]``.  Broadcasting is limited to
two explicit forms, per-channel vectors over spatial maps (``mul_channel``,
``add_channel``) and single-channel maps over channels (``mul_spatial``); any
other shape mismatch raises ``ShapeError``.
"""

import numpy as np

from ..errors import ShapeError
from . import kernels
from .tensor import Tensor, make


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _sum_to_channel(g):
    return g.sum(axis=tuple(range(2, g.ndim)))


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        return make(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    a = _t(a)
    _same_shape("add", a, b)
    return make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -b)
    _same_shape("sub", a, b)
    return make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a):
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    if not isinstance(b, Tensor):
        s = a.dtype.type(b)
        return make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def relu(x):
    mask = x.data > 0
    return make(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                lambda g: (g * mask,), "relu")


def sigmoid(x):
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def clamp(x, lo, hi):
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return make(np.clip(d, lo, hi).astype(x.dtype), (x,),
                lambda g: (g * inside,), "clamp")


def softmax(x, axis=-1):
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    d = x.data
    z = d - d.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), bw, "log_softmax")


def mul_batch(x, coeffs):
    """Scale sample ``n`` of ``x`` by the constant ``coeffs[n]``."""
    c = np.asarray(coeffs, dtype=x.dtype)
    if c.shape != (x.shape[0],):
        raise ShapeError(f"mul_batch: coeffs {c.shape} vs batch {x.shape[0]}")
    c = c.reshape((-1,) + (1,) * (x.ndim - 1))
    return make(x.data * c, (x,), lambda g: (g * c,), "mul_batch")


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def sum(x, axis=None):
    d = x.data
    out = np.asarray(d.sum(axis=axis), dtype=x.dtype)
    shape = d.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(out, (x,), bw, "sum")


def mean(x, axis=None):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / float(n))


def gap(x):
    """Global average pool: ``[N, C, *spatial] -> [N, C]``."""
    if x.ndim < 3:
        raise ShapeError(f"gap needs [N, C, *spatial], got {x.shape}")
    axes = tuple(range(2, x.ndim))
    n = int(np.prod(x.shape[2:]))
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)) / x.dtype.type(n), shape).copy(),)

    return make(x.data.mean(axis=axes, dtype=x.dtype), (x,), bw, "gap")


def channel_mean(x):
    """Per-position mean over the channel axis: ``[N, C, ...] -> [N, 1, ...]``."""
    C = x.shape[1]
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g / x.dtype.type(C), shape).copy(),)

    return make(x.data.mean(axis=1, keepdims=True, dtype=x.dtype), (x,), bw, "channel_mean")


def channel_max(x):
    """Per-position max over channels; ties route the gradient to the lowest index."""
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return make(out, (x,), bw, "channel_max")


# --------------------------------------------------------------------------
# shape plumbing
# --------------------------------------------------------------------------

def concat(tensors, axis=1):
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def upsample_nearest(x, factor):
    """Repeat each spatial position ``factor`` times along H and W."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest needs [N, C, H, W], got {x.shape}")
    f = int(factor)
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def bw(g):
        return (g.reshape(N, C, H, f, W, f).sum(axis=(3, 5)),)

    return make(out, (x,), bw, "upsample")


def downsample(x, factor):
    """Strided subsampling ``x[..., ::f, ::f]``."""
    if x.ndim != 4:
        raise ShapeError(f"downsample needs [N, C, H, W], got {x.shape}")
    f = int(factor)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, ::f, ::f] = g
        return (gx,)

    return make(np.ascontiguousarray(x.data[:, :, ::f, ::f]), (x,), bw, "downsample")


# --------------------------------------------------------------------------
# broadcasts
# --------------------------------------------------------------------------

def _check_channel_vec(op, x, v):
    if x.ndim < 3 or v.shape != x.shape[:2]:
        raise ShapeError(f"{op}: vector {v.shape} does not match channels of {x.shape}")


def mul_channel(x, v):
    """``x[N, C, ...] * v[N, C]`` with ``v`` broadcast over positions."""
    _check_channel_vec("mul_channel", x, v)
    vb = v.data.reshape(v.shape + (1,) * (x.ndim - 2))
    xd = x.data

    def bw(g):
        return g * vb, _sum_to_channel(g * xd)

    return make(xd * vb, (x, v), bw, "mul_channel")


def add_channel(x, v):
    """``x[N, C, ...] + v[N, C]`` with ``v`` broadcast over positions."""
    _check_channel_vec("add_channel", x, v)
    vb = v.data.reshape(v.shape + (1,) * (x.ndim - 2))
    return make(x.data + vb, (x, v), lambda g: (g, _sum_to_channel(g)), "add_channel")


def mul_spatial(x, s):
    """``x[N, C, ...] * s[N, 1, ...]`` with ``s`` broadcast over channels."""
    if s.ndim != x.ndim or s.shape[1] != 1 or s.shape[0] != x.shape[0] or s.shape[2:] != x.shape[2:]:
        raise ShapeError(f"mul_spatial: map {s.shape} does not match {x.shape}")
    xd, sd = x.data, s.data

    def bw(g):
        return g * sd, (g * xd).sum(axis=1, keepdims=True)

    return make(xd * sd, (x, s), bw, "mul_spatial")


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def linear(x, w, b=None):
    """Affine map ``x[N, in] @ w[out, in].T + b[out]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} vs {w.shape[0]} outputs")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        grads = (g @ wd, g.T @ xd)
        return grads + ((g.sum(axis=0),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, bw, "linear")


def _tuple(v, n):
    return (int(v),) * n if np.isscalar(v) else tuple(int(e) for e in v)


def _conv(x, w, b, stride, padding, groups, nsp, op):
    if x.ndim != nsp + 2 or w.ndim != nsp + 2:
        raise ShapeError(f"{op}: expected {nsp + 2}-d input and weight, got {x.shape} and {w.shape}")
    N, Ci = x.shape[:2]
    Co, cig = w.shape[:2]
    if groups < 1 or Ci % groups or Co % groups or cig != Ci // groups:
        raise ShapeError(f"{op}: {Ci} input channels, weight {w.shape}, groups={groups}")
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"{op}: bias {b.shape} vs {Co} outputs")
    stride, padding = _tuple(stride, nsp), _tuple(padding, nsp)
    for n, k, p in zip(x.shape[2:], w.shape[2:], padding):
        if n + 2 * p < k:
            raise ShapeError(f"{op}: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    # 2-d convs run through the 3-d kernels with a unit depth axis
    lift = nsp == 2
    xd = x.data[:, :, None] if lift else x.data
    wd = w.data[:, :, None] if lift else w.data
    s3 = (1,) + stride if lift else stride
    p3 = (0,) + padding if lift else padding
    out, saved = kernels.conv_forward(xd, wd, s3, p3, groups)
    if lift:
        out = out[:, :, 0]
    if b is not None:
        out += b.data.reshape((1, Co) + (1,) * nsp)

    def bw(g):
        g3 = g[:, :, None] if lift else g
        gx = kernels.conv_backward_input(g3, wd, saved) if x.requires_grad else None
        gw = kernels.conv_backward_weight(g3, saved) if w.requires_grad else None
        if lift:
            gx = None if gx is None else gx[:, :, 0]
            gw = None if gw is None else gw[:, :, 0]
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0,) + tuple(range(2, g.ndim))),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, bw, op)


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Cross-correlation of ``x[N, Cin, H, W]`` with ``w[Cout, Cin/groups, kh, kw]``."""
    return _conv(x, w, b, stride, padding, groups, 2, "conv2d")


def conv3d(x, w, b=None, stride=1, padding=0, groups=1):
    """3-d analogue of ``conv2d`` on ``[N, Cin, D, H, W]``."""
    return _conv(x, w, b, stride, padding, groups, 3, "conv3d")


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel normalization over batch and spatial axes.

    In training mode batch statistics are used and the running buffers
    (plain arrays, updated in place) move by ``momentum`` towards them; the
    running variance uses the unbiased estimate.  Eval mode uses the buffers.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: affine params for {C} channels, got {gamma.shape}/{beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        m = int(np.prod([x.shape[a] for a in axes]))
        mu = xd.mean(axis=axes, dtype=x.dtype)
        var = xd.var(axis=axes, dtype=x.dtype)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gg = g * gamma.data.reshape(bshape)
        if training:
            gx = inv.reshape(bshape) * (
                gg - gg.mean(axis=axes, keepdims=True)
                - xhat * (gg * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gg * inv.reshape(bshape)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make(out.astype(x.dtype), (x, gamma, beta), bw, "batch_norm")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels[N]`` under ``softmax(logits[N, K])``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    N = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(N), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(N), labels] -= 1
        return (p * (g / N),)

    return make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def mse(a, b):
    d = sub(a, b)
    return mean(mul(d, d))
