"""Cross-modal feature alignment.

Pipeline for fundus features ``xf`` and OCT features ``xo`` on one grid:

1. channel attention per modality, ``x * sigmoid(W2 relu(W1 gap(x)))`` with
   bias-free ``W1: C -> C/r`` and ``W2: C/r -> C``;
2. sum the two refined maps, build a spatial map
   ``S = sigmoid(conv7x7([mean_c; max_c]))`` and rescale the sum by it;
3. pointwise conv + ReLU.
"""

from .core import ops
from .errors import ShapeError
from .nn import Conv, fan_in_uniform


def channel_gate(x, w1, w2):
    """``sigmoid(W2 relu(W1 gap(x)))``, shape ``[N, C]``."""
    C = x.shape[1]
    if w1.ndim != 2 or w2.ndim != 2 or w1.shape[1] != C or w2.shape != (C, w1.shape[0]):
        raise ShapeError(f"channel gate weights {w1.shape}/{w2.shape} do not fit {C} channels")
    return ops.sigmoid(ops.linear(ops.relu(ops.linear(ops.gap(x), w1)), w2))


def channel_attention(x, w1, w2):
    return ops.mul_channel(x, channel_gate(x, w1, w2))


def spatial_map(f, w, b):
    """``sigmoid(conv([mean_c(f); max_c(f)]))`` as ``[N, 1, h, w]``."""
    pooled = ops.concat([ops.channel_mean(f), ops.channel_max(f)], axis=1)
    k = w.shape[-1]
    return ops.sigmoid(ops.conv2d(pooled, w, b, padding=k // 2))


def spatial_fuse(xf_att, xo_att, w, b):
    if xf_att.shape != xo_att.shape:
        raise ShapeError(f"spatial_fuse: {xf_att.shape} vs {xo_att.shape}")
    fused = ops.add(xf_att, xo_att)
    return ops.mul_spatial(fused, spatial_map(fused, w, b))


def fuse_out(f, w, b):
    if w.shape[1] != f.shape[1]:
        raise ShapeError(f"fuse_out: kernel {w.shape} for {f.shape[1]} channels")
    return ops.relu(ops.conv2d(f, w, b))


class CMFA:
    def __init__(self, params, rng, channels=64, reduction=4, spatial_kernel=7, name="cmfa"):
        if channels % reduction:
            raise ShapeError(f"reduction {reduction} must divide channels {channels}")
        hidden = channels // reduction
        self.gates = {}
        for mod in ("fundus", "oct"):
            w1 = params.add(f"{name}.{mod}.w1", fan_in_uniform(rng, (hidden, channels), channels))
            w2 = params.add(f"{name}.{mod}.w2", fan_in_uniform(rng, (channels, hidden), hidden))
            self.gates[mod] = (w1, w2)
        self.spatial = Conv(params, f"{name}.spatial", 2, 1, spatial_kernel, rng,
                            padding=spatial_kernel // 2)
        self.out = Conv(params, f"{name}.out", channels, channels, 1, rng)

    def __call__(self, xf, xo):
        return cmfa_forward(xf, xo, self)


def cmfa_forward(xf, xo, block):
    if xf.shape != xo.shape:
        raise ShapeError(f"CMFA inputs differ: {xf.shape} vs {xo.shape}")
    xf_att = channel_attention(xf, *block.gates["fundus"])
    xo_att = channel_attention(xo, *block.gates["oct"])
    f = spatial_fuse(xf_att, xo_att, block.spatial.w, block.spatial.b)
    return fuse_out(f, block.out.w, block.out.b)


class ConcatFusion:
    """Fallback fusion: channel concat then pointwise conv + ReLU."""

    def __init__(self, params, rng, channels=64, name="concat"):
        self.proj = Conv(params, f"{name}.proj", 2 * channels, channels, 1, rng)

    def __call__(self, xf, xo):
        return concat_fallback(xf, xo, self.proj.w, self.proj.b)


def concat_fallback(xf, xo, w, b):
    if xf.shape != xo.shape:
        raise ShapeError(f"concat fusion inputs differ: {xf.shape} vs {xo.shape}")
    return ops.relu(ops.conv2d(ops.concat([xf, xo], axis=1), w, b))
