"""Iterative refinement decoder.

Masks become diffusion states through a scaled one-hot code (+1 for the
pixel's class, -1 elsewhere).  Training noises them with the DDPM forward
process and a conditional network ``EpsNet`` learns the injected noise; at
inference a deterministic DDIM ladder ``T -> ... -> 0`` refines a Gaussian
start into a latent whose per-pixel argmax is the label map.
"""

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.tensor import Tensor, no_grad
from .errors import ShapeError, ValidationError
from .nn import Conv, Linear
from .phantom import NUM_CLASSES

X0_CLAMP = 1.5


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # beta[i - 1] is beta_i, i = 1..T
    alpha: np.ndarray
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] = 1

    def coeffs(self, t):
        """``(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`` for scalar or array ``t``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValidationError(f"timestep out of range [0, {self.T}]: {t}")
        ab = self.alpha_bar[t]
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def build_schedule(T=100, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule with cumulative products in float64."""
    if int(T) != T or T < 1:
        raise ValidationError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _per_sample(t, n):
    t = np.asarray(t, dtype=np.int64)
    return np.full(n, t) if t.ndim == 0 else t


def forward_noise(x0, t, eps, sched):
    """``x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps`` on arrays ``[N, ...]``; ``t`` scalar or ``[N]``."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"forward_noise: x0 {x0.shape} vs eps {eps.shape}")
    t = _per_sample(t, x0.shape[0])
    c0, c1 = sched.coeffs(t)
    bshape = (-1,) + (1,) * (x0.ndim - 1)
    return (c0.reshape(bshape) * x0 + c1.reshape(bshape) * eps).astype(x0.dtype)


def predict_x0(xt, t, eps_hat, sched, clamp=True):
    """Invert the forward process for ``x_0`` given a noise estimate.

    Differentiable in ``eps_hat``; the result is clamped to
    ``[-X0_CLAMP, X0_CLAMP]`` unless ``clamp`` is False.
    """
    xt = xt if isinstance(xt, Tensor) else Tensor(xt)
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat, dtype=xt.dtype)
    t = _per_sample(t, xt.shape[0])
    c0, c1 = sched.coeffs(t)
    if np.any(c0 == 0):
        raise ValidationError("alpha_bar_t = 0: x_0 is not recoverable")
    x0 = ops.mul_batch(ops.sub(xt, ops.mul_batch(eps_hat, c1)), 1.0 / c0)
    return ops.clamp(x0, -X0_CLAMP, X0_CLAMP) if clamp else x0


def ddim_step(xt, t, t_prev, eps_hat, sched):
    """Deterministic (eta = 0) update ``x_t -> x_{t_prev}``."""
    if not 0 <= t_prev < t <= sched.T:
        raise ValidationError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
    x0 = predict_x0(xt, t, eps_hat, sched)
    n = x0.shape[0]
    c0, c1 = sched.coeffs(_per_sample(t_prev, n))
    return ops.add(ops.mul_batch(x0, c0), ops.mul_batch(eps_hat, c1))


def timestep_ladder(T, K):
    """Uniform ladder ``[T, T - T/K, ..., 0]``."""
    if K < 1:
        raise ValidationError(f"need at least one sampling step, got {K}")
    if K > T:
        raise ValidationError(f"{K} sampling steps exceed the {T}-step schedule")
    if T % K:
        raise ValidationError(f"{K} steps do not divide T={T} into a uniform ladder")
    return list(range(T, -1, -(T // K)))


def encode_mask_latent(mask):
    """Labels ``[..., H, W]`` -> latent ``[..., 3, H, W]`` in {-1, +1}."""
    mask = np.asarray(mask)
    onehot = np.moveaxis(np.arange(NUM_CLASSES) == mask[..., None], -1, -3)
    return (2.0 * onehot - 1.0).astype(np.float32)


def decode_mask_latent(latent):
    """Per-pixel argmax over the class axis (-3); ties go to the lowest class."""
    latent = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    return latent.argmax(axis=-3)


def timestep_embedding(t, dim=64):
    """Sinusoidal embedding ``[N, dim]`` of integer timesteps."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class EpsNet:
    """Small U-shaped noise predictor conditioned on fused features.

    Input at full mask resolution is ``[x_t; up(fused); fundus]``.  Fundus
    pyramid levels (strides 2 and 4) join the down path at matching sizes.
    Each stage adds an affine projection of the timestep embedding.
    """

    def __init__(self, params, rng, fused_channels=64, skip_channels=(3, 16, 32),
                 width=16, temb_dim=64, name="eps"):
        c, c2 = width, 2 * width
        s0, s1, s2 = skip_channels
        p = name
        self.temb_dim = temb_dim
        self.inp = Conv(params, f"{p}.in", NUM_CLASSES + fused_channels + s0, c, 1, rng)
        self.conv0 = Conv(params, f"{p}.conv0", c, c, 3, rng, padding=1)
        self.down1 = Conv(params, f"{p}.down1", c, c2, 3, rng, stride=2, padding=1)
        self.mix1 = Conv(params, f"{p}.mix1", c2 + s1, c2, 3, rng, padding=1)
        self.down2 = Conv(params, f"{p}.down2", c2, c2, 3, rng, stride=2, padding=1)
        self.mix2 = Conv(params, f"{p}.mix2", c2 + s2, c2, 3, rng, padding=1)
        self.up1 = Conv(params, f"{p}.up1", 2 * c2, c, 3, rng, padding=1)
        self.up0 = Conv(params, f"{p}.up0", 2 * c, c, 3, rng, padding=1)
        self.out = Conv(params, f"{p}.out", c, NUM_CLASSES, 1, rng)
        self.temb = [Linear(params, f"{p}.temb{i}", temb_dim, ch, rng)
                     for i, ch in enumerate((c, c2, c2, c))]

    def __call__(self, xt, t, fused, skips):
        """``skips`` = (fundus image, stride-2 level, stride-4 level)."""
        N, _, H, W = xt.shape
        if fused.shape[0] != N or H % fused.shape[2] or W % fused.shape[3]:
            raise ShapeError(f"fused features {fused.shape} do not tile latent {xt.shape}")
        img, l1, l2 = skips
        emb = Tensor(timestep_embedding(_per_sample(t, N), self.temb_dim), dtype=xt.dtype)
        te = [lin(emb) for lin in self.temb]
        up = ops.upsample_nearest(fused, H // fused.shape[2])
        h0 = ops.relu(ops.add_channel(self.inp(ops.concat([xt, up, img], axis=1)), te[0]))
        h0 = ops.relu(self.conv0(h0))
        h1 = ops.relu(self.down1(h0))
        h1 = ops.relu(ops.add_channel(self.mix1(ops.concat([h1, l1], axis=1)), te[1]))
        h2 = ops.relu(self.down2(h1))
        h2 = ops.relu(ops.add_channel(self.mix2(ops.concat([h2, l2], axis=1)), te[2]))
        u1 = ops.concat([ops.upsample_nearest(h2, 2), h1], axis=1)
        u1 = ops.relu(ops.add_channel(self.up1(u1), te[3]))
        u0 = ops.relu(self.up0(ops.concat([ops.upsample_nearest(u1, 2), h0], axis=1)))
        return self.out(u0)


def ddim_sample(eps_fn, shape, sched, K, seed, dtype=np.float32):
    """Run the DDIM ladder from a seeded Gaussian ``x_T``; returns the final latent array.

    ``eps_fn(x_t: Tensor, t: int) -> Tensor`` supplies the noise estimate.
    """
    ladder = timestep_ladder(sched.T, K)
    x = Tensor(np.random.default_rng(seed).standard_normal(shape).astype(dtype))
    with no_grad():
        for t, t_prev in zip(ladder[:-1], ladder[1:]):
            x = ddim_step(x, t, t_prev, eps_fn(x, t), sched)
    return x.data


def sample_mask(fused, skips, net, sched, K, seed):
    """Iteratively decode labels ``[N, H, W]`` from fused features.

    Returns ``(latent, labels)``; a pure function of its arguments.
    """
    img = skips[0]
    N, _, H, W = img.shape
    latent = ddim_sample(lambda x, t: net(x, t, fused, skips), (N, NUM_CLASSES, H, W),
                         sched, K, seed, dtype=img.dtype)
    return latent, decode_mask_latent(latent)


def single_pass_decode(fused, skips, net, sched):
    """Non-iterative counterpart: one network call at ``t = T`` from ``x = 0``, read as ``x_0``."""
    img = skips[0]
    N, _, H, W = img.shape
    x = Tensor(np.zeros((N, NUM_CLASSES, H, W), dtype=img.dtype))
    return net(x, sched.T, fused, skips)
