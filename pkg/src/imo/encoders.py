"""Modality-specific encoders that meet on a shared ``[C, H/8, W/8]`` grid."""

from dataclasses import dataclass

from .core import ops
from .core.tensor import Tensor
from .errors import ShapeError
from .nn import BatchNorm, Conv


@dataclass
class FundusFeatures:
    pyramid: list  # strides 2, 4, 8
    top: Tensor


class FundusEncoder:
    """Three stages of stride-2 3x3 conv -> batch-norm -> ReLU -> pointwise conv."""

    def __init__(self, params, rng, widths=(16, 32, 64), in_channels=3, use_bn=True,
                 name="fundus"):
        self.stages = []
        cin = in_channels
        for i, cout in enumerate(widths):
            p = f"{name}.stage{i}"
            conv = Conv(params, f"{p}.conv", cin, cout, 3, rng, stride=2, padding=1)
            bn = BatchNorm(params, f"{p}.bn", cout) if use_bn else None
            pw = Conv(params, f"{p}.pw", cout, cout, 1, rng)
            self.stages.append((conv, bn, pw))
            cin = cout
        self.widths = tuple(widths)

    def __call__(self, img, training=False):
        if img.ndim != 4 or img.shape[2] % 8 or img.shape[3] % 8:
            raise ShapeError(f"fundus input must be [N, C, H, W] with H, W divisible by 8, got {img.shape}")
        x, levels = img, []
        for conv, bn, pw in self.stages:
            x = conv(x)
            if bn is not None:
                x = bn(x, training)
            x = pw(ops.relu(x))
            levels.append(x)
        return FundusFeatures(pyramid=levels, top=levels[-1])


class OctEncoder:
    """Two stride-2 3-d conv stages, a mean over depth, then a pointwise 2-d conv.

    The en-face grid shrinks by 4, so an OCT volume ``[1, D, H', W']`` lands on
    the fundus top grid when ``H' = H/2`` and ``W' = W/2``.
    """

    def __init__(self, params, rng, widths=(8, 16), out_channels=64, in_channels=1,
                 use_bn=True, name="oct"):
        self.stages = []
        cin = in_channels
        for i, cout in enumerate(widths):
            p = f"{name}.stage{i}"
            conv = Conv(params, f"{p}.conv", cin, cout, 3, rng, stride=2, padding=1, dims=3)
            bn = BatchNorm(params, f"{p}.bn", cout) if use_bn else None
            self.stages.append((conv, bn))
            cin = cout
        self.proj = Conv(params, f"{name}.proj", cin, out_channels, 1, rng)

    def __call__(self, vol, training=False, grid=None):
        if vol.ndim != 5:
            raise ShapeError(f"OCT input must be [N, 1, D, H, W], got {vol.shape}")
        x = vol
        for conv, bn in self.stages:
            x = conv(x)
            if bn is not None:
                x = bn(x, training)
            x = ops.relu(x)
        if grid is not None and tuple(x.shape[3:]) != tuple(grid):
            raise ShapeError(f"OCT grid {tuple(x.shape[3:])} does not match fundus grid {tuple(grid)}")
        x = ops.mean(x, axis=2)
        return self.proj(x)


def encode_fundus(img, encoder, training=False):
    return encoder(img, training)


def encode_oct(vol, encoder, grid=None, training=False):
    return encoder(vol, training, grid=grid)
