"""Grading branch: DSC -> BN -> ReLU -> SE -> GAP -> FC -> ReLU -> FC -> softmax."""

from .cmfa import channel_attention
from .core import ops
from .errors import ShapeError
from .nn import BatchNorm, Conv, Linear, fan_in_uniform

NUM_GRADES = 3


def se_block(x, w1, w2):
    """Squeeze-and-excitation; same functional form as the CMFA channel gate."""
    return channel_attention(x, w1, w2)


class GradingHead:
    def __init__(self, params, rng, channels=64, reduction=4, n_classes=NUM_GRADES, name="grading"):
        if channels % reduction or channels % 2:
            raise ShapeError(f"channels {channels} must be divisible by {reduction} and 2")
        self.dw = Conv(params, f"{name}.dw", channels, channels, 3, rng, padding=1, groups=channels)
        self.pw = Conv(params, f"{name}.pw", channels, channels, 1, rng)
        self.bn = BatchNorm(params, f"{name}.bn", channels)
        hidden = channels // reduction
        self.se_w1 = params.add(f"{name}.se.w1", fan_in_uniform(rng, (hidden, channels), channels))
        self.se_w2 = params.add(f"{name}.se.w2", fan_in_uniform(rng, (channels, hidden), hidden))
        self.fc1 = Linear(params, f"{name}.fc1", channels, channels // 2, rng)
        self.fc2 = Linear(params, f"{name}.fc2", channels // 2, n_classes, rng)
        self.channels = channels

    def logits(self, fused, training=False):
        if fused.ndim != 4 or fused.shape[1] != self.channels:
            raise ShapeError(f"grading head expects [N, {self.channels}, h, w], got {fused.shape}")
        x = ops.relu(self.bn(self.pw(self.dw(fused)), training))
        x = se_block(x, self.se_w1, self.se_w2)
        x = ops.relu(self.fc1(ops.gap(x)))
        return self.fc2(x)

    def __call__(self, fused, training=False):
        return grading_forward(fused, self, training)


def grading_forward(fused, head, training=False):
    """Grade probabilities ``[N, 3]``."""
    return ops.softmax(head.logits(fused, training), axis=-1)
