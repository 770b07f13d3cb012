"""Convolution kernels: numba JIT path and a pure-numpy fallback.

Both paths compute the same thing on the same memory layout and are selected
at import time by the ``IMO_KERNELS`` environment variable (``numba`` or
``numpy``; default ``numba`` when importable).  ``set_backend`` switches at
runtime, which is what the tests and the benchmark use.

Layout
------
A strided N-d convolution is reduced to unit-stride work by a polyphase split
of the zero-padded input.  For strides ``(sd, sh, sw)`` the padded volume is
cut into ``sd*sh*sw`` phase volumes of shape ``(Dq, Hq, Wq)`` and each one is
flattened, giving ``P[phase, n, ci, Dq*Hq*Wq]``.  Kernel tap ``(a, b, c)``
then reads phase ``(a % sd, b % sh, c % sw)`` at the flat offset
``((a//sd)*Hq + b//sh)*Wq + c//sw``.  Outputs are produced on the same
``(Do, Hq, Wq)`` pitch and cropped to ``(Do, Ho, Wo)`` afterwards; the
columns past ``Wo`` hold junk and are discarded (forward) or zero (backward).

Every forward output element accumulates its taps in ascending
``(ci, a, b, c)`` order starting from zero, in both backends, with no fused
multiply-add.  In 64-bit mode this makes the result bit-identical to a naive
nested-loop convolution.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    NUMBA_AVAILABLE = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the bundled TBB is often too old and numba warns on every import
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

_BACKENDS = ("numba", "numpy")
_backend = os.environ.get("IMO_KERNELS", "numba" if NUMBA_AVAILABLE else "numpy").lower()
if _backend not in _BACKENDS:
    raise ValueError(f"IMO_KERNELS must be one of {_BACKENDS}, got {_backend!r}")
if _backend == "numba" and not NUMBA_AVAILABLE:  # pragma: no cover
    _backend = "numpy"


def available_backends():
    return _BACKENDS if NUMBA_AVAILABLE else ("numpy",)


def get_backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    prev, _backend = _backend, name
    return prev


def set_threads(n):
    """Cap kernel parallelism (``IMO_THREADS``); a no-op without numba."""
    if NUMBA_AVAILABLE:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


if NUMBA_AVAILABLE and "IMO_THREADS" in os.environ:
    set_threads(os.environ["IMO_THREADS"])


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True, parallel=True)
    def _fwd_numba(P, w, sd, sh, sw, groups, Hq, Wq, L, Mo):
        N = P.shape[1]
        Co, cig, kd, kh, kw = w.shape
        cog = Co // groups
        out = np.zeros((N, Co, Mo), dtype=P.dtype)
        for job in prange(N * Co):
            n = job // Co
            co = job % Co
            ci0 = (co // cog) * cig
            for cl in range(cig):
                for a in range(kd):
                    for b in range(kh):
                        for c in range(kw):
                            wv = w[co, cl, a, b, c]
                            ph = ((a % sd) * sh + (b % sh)) * sw + (c % sw)
                            off = ((a // sd) * Hq + (b // sh)) * Wq + (c // sw)
                            # proves off >= 0 to LLVM, which drops the
                            # wraparound branch and vectorizes the loop
                            if off < 0:
                                off = 0
                            for j in range(L):
                                out[n, co, j] += wv * P[ph, n, ci0 + cl, j + off]
        return out

    @njit(cache=True, parallel=True)
    def _bwd_input_numba(g, w, S, Ci, Mq, sd, sh, sw, groups, Hq, Wq, L):
        N, Co, _ = g.shape
        _, cig, kd, kh, kw = w.shape
        cog = Co // groups
        dP = np.zeros((S, N, Ci, Mq), dtype=g.dtype)
        for n in prange(N):
            for co in range(Co):
                ci0 = (co // cog) * cig
                for cl in range(cig):
                    for a in range(kd):
                        for b in range(kh):
                            for c in range(kw):
                                wv = w[co, cl, a, b, c]
                                ph = ((a % sd) * sh + (b % sh)) * sw + (c % sw)
                                off = ((a // sd) * Hq + (b // sh)) * Wq + (c // sw)
                                if off < 0:
                                    off = 0
                                for j in range(L):
                                    dP[ph, n, ci0 + cl, j + off] += wv * g[n, co, j]
        return dP

    @njit(cache=True, parallel=True, fastmath=True)
    def _bwd_weight_numba(g, P, sd, sh, sw, groups, Hq, Wq, L, kd, kh, kw, cig):
        N, Co, _ = g.shape
        cog = Co // groups
        dw = np.zeros((Co, cig, kd, kh, kw), dtype=g.dtype)
        for co in prange(Co):
            ci0 = (co // cog) * cig
            for cl in range(cig):
                for a in range(kd):
                    for b in range(kh):
                        for c in range(kw):
                            ph = ((a % sd) * sh + (b % sh)) * sw + (c % sw)
                            off = ((a // sd) * Hq + (b // sh)) * Wq + (c // sw)
                            if off < 0:
                                off = 0
                            acc = g.dtype.type(0.0)
                            for n in range(N):
                                for j in range(L):
                                    acc += g[n, co, j] * P[ph, n, ci0 + cl, j + off]
                            dw[co, cl, a, b, c] = acc
        return dw


# ---------------------------------------------------------------------------
# numpy fallback, same accumulation order as the numba forward/input kernels
# ---------------------------------------------------------------------------

def _taps(w_shape, stride, Hq, Wq):
    _, _, kd, kh, kw = w_shape
    sd, sh, sw = stride
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                ph = ((a % sd) * sh + (b % sh)) * sw + (c % sw)
                off = ((a // sd) * Hq + (b // sh)) * Wq + (c // sw)
                yield a, b, c, ph, off


def _fwd_numpy(P, w, stride, groups, Hq, Wq, L, Mo):
    N = P.shape[1]
    Co, cig = w.shape[:2]
    cog = Co // groups
    out = np.zeros((N, Co, Mo), dtype=P.dtype)
    taps = list(_taps(w.shape, stride, Hq, Wq))
    for grp in range(groups):
        cos = slice(grp * cog, (grp + 1) * cog)
        acc = out[:, cos, :L]
        for cl in range(cig):
            ci = grp * cig + cl
            for a, b, c, ph, off in taps:
                acc += w[cos, cl, a, b, c][None, :, None] * P[ph, :, ci, None, off:off + L]
    return out


def _bwd_input_numpy(g, w, S, Ci, Mq, stride, groups, Hq, Wq, L):
    N, Co, _ = g.shape
    cig = w.shape[1]
    cog = Co // groups
    dP = np.zeros((S, N, Ci, Mq), dtype=g.dtype)
    taps = list(_taps(w.shape, stride, Hq, Wq))
    for co in range(Co):
        ci0 = (co // cog) * cig
        gco = g[:, co, :L]
        for cl in range(cig):
            for a, b, c, ph, off in taps:
                dP[ph, :, ci0 + cl, off:off + L] += w[co, cl, a, b, c] * gco
    return dP


def _bwd_weight_numpy(g, P, stride, groups, Hq, Wq, L, w_shape):
    Co, cig = w_shape[:2]
    cog = Co // groups
    dw = np.zeros(w_shape, dtype=g.dtype)
    for grp in range(groups):
        cos = slice(grp * cog, (grp + 1) * cog)
        gg = g[:, cos, :L]
        for cl in range(cig):
            ci = grp * cig + cl
            for a, b, c, ph, off in _taps(w_shape, stride, Hq, Wq):
                dw[cos, cl, a, b, c] = np.einsum("nkj,nj->k", gg, P[ph, :, ci, off:off + L])
    return dw


# ---------------------------------------------------------------------------
# public entry points (5-d arrays: [N, C, D, H, W])
# ---------------------------------------------------------------------------

class ConvGeometry:
    """Shapes shared between the forward call and its backward."""

    __slots__ = ("x_shape", "w_shape", "stride", "padding", "groups",
                 "out_spatial", "q", "L", "Mo")

    def __init__(self, x_shape, w_shape, stride, padding, groups):
        N, Ci, D, H, W = x_shape
        Co, cig, kd, kh, kw = w_shape
        padded = [n + 2 * p for n, p in zip((D, H, W), padding)]
        out = [(n - k) // s + 1 for n, k, s in zip(padded, (kd, kh, kw), stride)]
        q = [-(-n // s) for n, s in zip(padded, stride)]
        self.x_shape, self.w_shape = tuple(x_shape), tuple(w_shape)
        self.stride, self.padding, self.groups = tuple(stride), tuple(padding), groups
        self.out_spatial = tuple(out)
        self.q = tuple(q)
        Do, Ho, Wo = out
        Dq, Hq, Wq = q
        self.L = (Do - 1) * Hq * Wq + (Ho - 1) * Wq + Wo
        self.Mo = Do * Hq * Wq


def _phases(x, geo):
    N, Ci, D, H, W = x.shape
    sd, sh, sw = geo.stride
    pd, ph, pw = geo.padding
    Dq, Hq, Wq = geo.q
    full = np.zeros((N, Ci, Dq * sd, Hq * sh, Wq * sw), dtype=x.dtype)
    full[:, :, pd:pd + D, ph:ph + H, pw:pw + W] = x
    if sd == sh == sw == 1:
        return full.reshape(1, N, Ci, Dq * Hq * Wq)
    P = np.empty((sd * sh * sw, N, Ci, Dq, Hq, Wq), dtype=x.dtype)
    k = 0
    for a in range(sd):
        for b in range(sh):
            for c in range(sw):
                P[k] = full[:, :, a::sd, b::sh, c::sw]
                k += 1
    return P.reshape(sd * sh * sw, N, Ci, Dq * Hq * Wq)


def _unphase(dP, geo):
    N, Ci, D, H, W = geo.x_shape
    sd, sh, sw = geo.stride
    pd, ph, pw = geo.padding
    Dq, Hq, Wq = geo.q
    dP = dP.reshape(sd * sh * sw, N, Ci, Dq, Hq, Wq)
    full = np.empty((N, Ci, Dq * sd, Hq * sh, Wq * sw), dtype=dP.dtype)
    k = 0
    for a in range(sd):
        for b in range(sh):
            for c in range(sw):
                full[:, :, a::sd, b::sh, c::sw] = dP[k]
                k += 1
    return full[:, :, pd:pd + D, ph:ph + H, pw:pw + W]


def conv_forward(x, w, stride, padding, groups):
    """Cross-correlation of ``x[N,Ci,D,H,W]`` with ``w[Co,Ci/groups,kd,kh,kw]``.

    Returns ``(out, saved)`` where ``saved`` must be handed back to the
    backward functions.
    """
    geo = ConvGeometry(x.shape, w.shape, stride, padding, groups)
    P = _phases(np.ascontiguousarray(x), geo)
    w = np.ascontiguousarray(w)
    Dq, Hq, Wq = geo.q
    if _backend == "numba":
        flat = _fwd_numba(P, w, *geo.stride, groups, Hq, Wq, geo.L, geo.Mo)
    else:
        flat = _fwd_numpy(P, w, geo.stride, groups, Hq, Wq, geo.L, geo.Mo)
    Do, Ho, Wo = geo.out_spatial
    out = flat.reshape(x.shape[0], w.shape[0], Do, Hq, Wq)[:, :, :, :Ho, :Wo]
    return np.ascontiguousarray(out), (P, geo)


def _flat_grad(gout, geo):
    N, Co = gout.shape[:2]
    Do, Ho, Wo = geo.out_spatial
    _, Hq, Wq = geo.q
    g = np.zeros((N, Co, Do, Hq, Wq), dtype=gout.dtype)
    g[:, :, :, :Ho, :Wo] = gout
    return g.reshape(N, Co, Do * Hq * Wq)


def conv_backward_input(gout, w, saved):
    P, geo = saved
    g = _flat_grad(gout, geo)
    S, _, Ci, Mq = P.shape
    _, Hq, Wq = geo.q
    w = np.ascontiguousarray(w)
    if _backend == "numba":
        dP = _bwd_input_numba(g, w, S, Ci, Mq, *geo.stride, geo.groups, Hq, Wq, geo.L)
    else:
        dP = _bwd_input_numpy(g, w, S, Ci, Mq, geo.stride, geo.groups, Hq, Wq, geo.L)
    return np.ascontiguousarray(_unphase(dP, geo))


def conv_backward_weight(gout, saved):
    P, geo = saved
    g = _flat_grad(gout, geo)
    _, Hq, Wq = geo.q
    Co, cig, kd, kh, kw = geo.w_shape
    if _backend == "numba":
        return _bwd_weight_numba(g, P, *geo.stride, geo.groups, Hq, Wq, geo.L, kd, kh, kw, cig)
    return _bwd_weight_numpy(g, P, geo.stride, geo.groups, Hq, Wq, geo.L, geo.w_shape)
