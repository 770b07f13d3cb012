"""Finite-difference gradient suite over every differentiable block.

Each case builds a tiny float64 problem from a seed and reduces the block's
output to a scalar through a fixed random projection.  Primitives are checked
coordinate-wise; composite blocks on random directions spanning their inputs
and all of their weights.
"""

import time

import numpy as np

from .cmfa import CMFA, channel_gate, spatial_map
from .core import ops
from .core.gradcheck import grad_check
from .core.tensor import Tensor
from .diffusion import EpsNet
from .encoders import FundusEncoder, OctEncoder
from .grading import GradingHead
from .model import IMOModel, ModelConfig
from .nn import ModelParams

TOLERANCE = 1e-5
DEFAULT_SEEDS = 20


def _t(rng, *shape, lo=None, scale=1.0):
    a = scale * rng.standard_normal(shape)
    if lo is not None:
        a = np.abs(a) + lo
    return Tensor(a, dtype=np.float64)


def _off_kink(rng, *shape, at=(0.0,)):
    """Random values at least 0.1 away from every breakpoint in ``at``."""
    a = rng.standard_normal(shape)
    for k in at:
        a = np.where(np.abs(a - k) < 0.1, a + 0.2 * np.sign(a - k + 1e-300), a)
    return Tensor(a, dtype=np.float64)


def _distinct_channels(rng, n, c, h, w):
    """Per-pixel channel values with a unique maximum (gaps >= 0.3)."""
    levels = 0.5 * np.arange(c)[:, None, None] + 0.1 * rng.uniform(-1, 1, (c, h, w))
    a = np.stack([rng.permuted(levels, axis=0) for _ in range(n)])
    return Tensor(a, dtype=np.float64)


def _prim(rng, fn, *inputs):
    R = rng.standard_normal(fn(*inputs).shape)
    return (lambda *xs: ops.sum(ops.mul(fn(*xs), Tensor(R)))), list(inputs)


def _bn(training):
    def build(rng):
        C = 3
        rm, rv = rng.standard_normal(C), np.abs(rng.standard_normal(C)) + 0.5
        return _prim(rng, lambda x, g, b: ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training),
                     _t(rng, 4, C, 3, 3), _t(rng, C), _t(rng, C))
    return build


PRIMITIVES = {
    "add": lambda r: _prim(r, ops.add, _t(r, 2, 3, 4), _t(r, 2, 3, 4)),
    "sub": lambda r: _prim(r, ops.sub, _t(r, 2, 3, 4), _t(r, 2, 3, 4)),
    "neg": lambda r: _prim(r, ops.neg, _t(r, 2, 5)),
    "mul": lambda r: _prim(r, ops.mul, _t(r, 2, 3, 4), _t(r, 2, 3, 4)),
    "mul_scalar": lambda r: _prim(r, lambda x: ops.mul(x, 1.7), _t(r, 3, 4)),
    "div": lambda r: _prim(r, ops.div, _t(r, 2, 3), _t(r, 2, 3, lo=0.5)),
    "relu": lambda r: _prim(r, ops.relu, _off_kink(r, 2, 3, 4, 4)),
    "sigmoid": lambda r: _prim(r, ops.sigmoid, _t(r, 2, 3, 4)),
    "clamp": lambda r: _prim(r, lambda x: ops.clamp(x, -0.5, 0.5), _off_kink(r, 2, 3, 4, at=(-0.5, 0.5))),
    "softmax": lambda r: _prim(r, lambda x: ops.softmax(x, axis=1), _t(r, 2, 3, 4, 4)),
    "log_softmax": lambda r: _prim(r, lambda x: ops.log_softmax(x, axis=-1), _t(r, 3, 5)),
    "mul_batch": lambda r: _prim(r, lambda x: ops.mul_batch(x, np.array([0.3, -1.2])), _t(r, 2, 3, 4)),
    "sum_axis": lambda r: _prim(r, lambda x: ops.sum(x, axis=(2, 3)), _t(r, 2, 3, 4, 4)),
    "mean": lambda r: _prim(r, lambda x: ops.mean(x, axis=1), _t(r, 2, 3, 4)),
    "gap": lambda r: _prim(r, ops.gap, _t(r, 2, 3, 4, 4)),
    "channel_mean": lambda r: _prim(r, ops.channel_mean, _t(r, 2, 3, 4, 4)),
    "channel_max": lambda r: _prim(r, ops.channel_max, _distinct_channels(r, 2, 3, 4, 4)),
    "concat": lambda r: _prim(r, lambda a, b: ops.concat([a, b], axis=1), _t(r, 2, 3, 4), _t(r, 2, 2, 4)),
    "upsample_nearest": lambda r: _prim(r, lambda x: ops.upsample_nearest(x, 2), _t(r, 2, 3, 3, 3)),
    "downsample": lambda r: _prim(r, lambda x: ops.downsample(x, 2), _t(r, 2, 3, 4, 4)),
    "mul_channel": lambda r: _prim(r, ops.mul_channel, _t(r, 2, 3, 4, 4), _t(r, 2, 3)),
    "add_channel": lambda r: _prim(r, ops.add_channel, _t(r, 2, 3, 4, 4), _t(r, 2, 3)),
    "mul_spatial": lambda r: _prim(r, ops.mul_spatial, _t(r, 2, 3, 4, 4), _t(r, 2, 1, 4, 4)),
    "linear": lambda r: _prim(r, ops.linear, _t(r, 3, 5), _t(r, 4, 5), _t(r, 4)),
    "conv2d": lambda r: _prim(r, lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
                              _t(r, 2, 3, 5, 5), _t(r, 4, 3, 3, 3), _t(r, 4)),
    "conv2d_strided_grouped": lambda r: _prim(
        r, lambda x, w: ops.conv2d(x, w, stride=2, padding=1, groups=2),
        _t(r, 2, 4, 6, 5), _t(r, 6, 2, 3, 3)),
    "conv2d_depthwise": lambda r: _prim(r, lambda x, w: ops.conv2d(x, w, padding=1, groups=3),
                                        _t(r, 1, 3, 4, 4), _t(r, 3, 1, 3, 3)),
    "conv3d": lambda r: _prim(r, lambda x, w, b: ops.conv3d(x, w, b, stride=(1, 2, 2), padding=1),
                              _t(r, 2, 2, 3, 5, 5), _t(r, 3, 2, 3, 3, 3), _t(r, 3)),
    "batch_norm_train": _bn(True),
    "batch_norm_eval": _bn(False),
    "cross_entropy": lambda r: (lambda x: ops.cross_entropy(x, np.array([0, 2, 1, 2])), [_t(r, 4, 3)]),
    "mse": lambda r: (lambda a, b: ops.mse(a, b), [_t(r, 2, 3, 4), _t(r, 2, 3, 4)]),
    "channel_gate": lambda r: _prim(r, channel_gate, _t(r, 2, 4, 3, 3), _t(r, 2, 4), _t(r, 4, 2)),
    "spatial_map": lambda r: _prim(r, spatial_map, _distinct_channels(r, 2, 4, 5, 5), _t(r, 1, 2, 7, 7, scale=0.1), _t(r, 1)),
}


def _jitter(params, rng):
    # zero-initialised biases put ReLU inputs exactly on the kink wherever an
    # upstream region is dead; check at a generic point instead
    ws = [t for _, t in params.trainable()]
    for t in ws:
        t.data += 0.1 * rng.standard_normal(t.shape)
    return ws


def _block_params(rng, build):
    params = ModelParams(np.float64)
    block = build(params, np.random.default_rng(rng.integers(1 << 31)))
    return block, _jitter(params, rng)


def _cmfa_case(rng):
    block, ws = _block_params(rng, lambda p, r: CMFA(p, r, channels=8, reduction=4))
    xf, xo = _t(rng, 2, 8, 4, 4), _t(rng, 2, 8, 4, 4)
    R = rng.standard_normal((2, 8, 4, 4))
    return (lambda a, b: ops.sum(ops.mul(block(a, b), Tensor(R)))), [xf, xo], ws


def _epsnet_case(rng):
    net, ws = _block_params(rng, lambda p, r: EpsNet(p, r, fused_channels=6, skip_channels=(3, 4, 5),
                                                     width=4, temb_dim=8))
    xt, fused = _t(rng, 2, 3, 8, 8), _t(rng, 2, 6, 2, 2)
    img, l1, l2 = _t(rng, 2, 3, 8, 8), _t(rng, 2, 4, 4, 4), _t(rng, 2, 5, 2, 2)
    t = rng.integers(1, 101, size=2)
    R = rng.standard_normal((2, 3, 8, 8))
    f = lambda x, fu, a, b, c: ops.sum(ops.mul(net(x, t, fu, (a, b, c)), Tensor(R)))
    return f, [xt, fused, img, l1, l2], ws


def _grading_case(rng):
    head, ws = _block_params(rng, lambda p, r: GradingHead(p, r, channels=8, reduction=4))
    R = rng.standard_normal((3, 3))
    return (lambda x: ops.sum(ops.mul(head.logits(x, training=True), Tensor(R)))), [_t(rng, 3, 8, 3, 3)], ws


def _fundus_case(rng):
    enc, ws = _block_params(rng, lambda p, r: FundusEncoder(p, r, widths=(4, 6, 8)))
    R = rng.standard_normal((2, 8, 2, 2))
    return (lambda x: ops.sum(ops.mul(enc(x, training=True).top, Tensor(R)))), [_t(rng, 2, 3, 16, 16)], ws


def _oct_case(rng):
    enc, ws = _block_params(rng, lambda p, r: OctEncoder(p, r, widths=(3, 4), out_channels=8))
    R = rng.standard_normal((2, 8, 2, 2))
    return (lambda v: ops.sum(ops.mul(enc(v, training=True, grid=(2, 2)), Tensor(R)))), [_t(rng, 2, 1, 4, 8, 8)], ws


TINY_MODEL = ModelConfig(image_size=(16, 16), volume_size=(4, 8, 8), channels=8, reduction=4,
                         fundus_widths=(4, 6), oct_widths=(3, 4), eps_width=4, temb_dim=8)


def _joint_case(rng):
    from .train import TrainConfig, joint_loss  # train imports model; keep the suite importable alone
    model = IMOModel(TINY_MODEL, rng=np.random.default_rng(rng.integers(1 << 31)), dtype=np.float64)
    n, (H, W) = 2, TINY_MODEL.image_size
    fundus = Tensor(rng.random((n, 3, H, W)), dtype=np.float64)
    oct_vol = Tensor(rng.random((n, 1) + TINY_MODEL.volume_size), dtype=np.float64)
    batch = {"fundus": fundus, "oct": oct_vol, "mask": rng.integers(0, 3, size=(n, H, W)),
             "grade": rng.integers(0, 3, size=n)}
    t = rng.integers(1, 101, size=n)
    eps = rng.standard_normal((n, 3, H, W))
    cfg = TrainConfig()

    def f(fu, oc):
        return joint_loss(dict(batch, fundus=fu, oct=oc), model, cfg, t, eps)[0]
    return f, [fundus, oct_vol], _jitter(model.params, rng)


BLOCKS = {
    "cmfa": _cmfa_case,
    "fundus_encoder": _fundus_case,
    "oct_encoder": _oct_case,
    "eps_net": _epsnet_case,
    "grading_head": _grading_case,
    "joint_loss": _joint_case,
}

# a perturbation of h moves thousands of ReLU/clamp pre-activations in the deep
# blocks; a smaller step keeps the odds of straddling a kink negligible
BLOCK_STEP = 1e-6
BLOCK_DIRECTIONS = 3


# truncation (h^2) and roundoff (1/h) balance near 1e-4, which keeps
# near-zero gradient coordinates accurate; inputs of the piecewise primitives
# are drawn at least 0.1 away from their kinks, so the step never straddles one
PRIMITIVE_STEP = 1e-4


def check_primitive(name, seed):
    f, xs = PRIMITIVES[name](np.random.default_rng([seed, 1]))
    return grad_check(f, xs, h=PRIMITIVE_STEP, seed=seed)


def check_block(name, seed, stats=None):
    f, xs, ws = BLOCKS[name](np.random.default_rng([seed, 2]))
    return grad_check(f, xs, h=BLOCK_STEP, seed=seed, directions=BLOCK_DIRECTIONS, extra=ws, stats=stats)


def run_suite(seeds=DEFAULT_SEEDS, names=None):
    """``[(block, worst relative error over seeds, seconds)]``."""
    out = []
    for kind, table, check in (("prim", PRIMITIVES, check_primitive), ("block", BLOCKS, check_block)):
        for name in table:
            if names is not None and name not in names:
                continue
            t0 = time.perf_counter()
            worst = max(check(name, s) for s in range(seeds))
            out.append((f"{kind}:{name}", worst, time.perf_counter() - t0))
    return out
