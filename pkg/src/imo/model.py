"""Full network: dual encoders, fusion, diffusion decoder and grading head."""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .cmfa import CMFA, ConcatFusion
from .core.tensor import Tensor, no_grad
from .diffusion import EpsNet, build_schedule, decode_mask_latent, sample_mask, single_pass_decode
from .encoders import FundusEncoder, OctEncoder
from .errors import ShapeError, ValidationError
from .grading import GradingHead
from .nn import ModelParams

ABLATION_FLAGS = ("no_oct", "no_grading", "no_segmentation", "no_cmfa", "no_ird")


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple = (64, 64)
    volume_size: tuple = (16, 32, 32)
    channels: int = 64
    reduction: int = 4
    fundus_widths: tuple = (16, 32)
    oct_widths: tuple = (8, 16)
    eps_width: int = 16
    temb_dim: int = 64
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self):
        H, W = self.image_size
        _, Hv, Wv = self.volume_size
        if H % 8 or W % 8:
            raise ValidationError(f"image size {self.image_size} must be divisible by 8")
        if (Hv // 4, Wv // 4) != (H // 8, W // 8) or Hv % 4 or Wv % 4:
            raise ValidationError(
                f"OCT grid {(Hv // 4, Wv // 4)} does not match fundus grid {(H // 8, W // 8)}")
        if self.channels % self.reduction or self.channels % 2:
            raise ValidationError("channels must be divisible by the reduction ratio and by 2")
        return self


@dataclass(frozen=True)
class Ablation:
    no_oct: bool = False
    no_grading: bool = False
    no_segmentation: bool = False
    no_cmfa: bool = False
    no_ird: bool = False

    def validate(self):
        if self.no_grading and self.no_segmentation:
            raise ValidationError("disabling both grading and segmentation leaves nothing to train")
        return self


class IMOModel:
    """Every sub-network is always built (so arms share one init stream); the
    ablation switches only pick which ones the forward pass uses."""

    def __init__(self, cfg=None, ablation=None, rng=None, dtype=np.float32):
        self.cfg = (cfg or ModelConfig()).validate()
        self.ablation = (ablation or Ablation()).validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.cfg
        self.params = ModelParams(dtype)
        p = self.params
        self.fundus = FundusEncoder(p, rng, widths=tuple(c.fundus_widths) + (c.channels,))
        self.oct = OctEncoder(p, rng, widths=c.oct_widths, out_channels=c.channels)
        self.cmfa = CMFA(p, rng, channels=c.channels, reduction=c.reduction)
        self.concat = ConcatFusion(p, rng, channels=c.channels)
        self.eps_net = EpsNet(p, rng, fused_channels=c.channels,
                              skip_channels=(3,) + tuple(c.fundus_widths),
                              width=c.eps_width, temb_dim=c.temb_dim)
        self.grading = GradingHead(p, rng, channels=c.channels, reduction=c.reduction)
        self.sched = build_schedule(c.T, c.beta_start, c.beta_end)

    @property
    def dtype(self):
        return self.params.dtype

    def _check_inputs(self, fundus, oct_vol):
        H, W = self.cfg.image_size
        if fundus.shape[1:] != (3, H, W):
            raise ShapeError(f"fundus batch {fundus.shape} does not match image size {(H, W)}")
        if oct_vol.shape[1:] != (1,) + tuple(self.cfg.volume_size):
            raise ShapeError(f"OCT batch {oct_vol.shape} does not match volume size {self.cfg.volume_size}")

    def features(self, fundus, oct_vol, training=False):
        """Fused features ``[N, C, H/8, W/8]`` plus decoder skips."""
        fundus = fundus if isinstance(fundus, Tensor) else Tensor(fundus, dtype=self.dtype)
        oct_vol = oct_vol if isinstance(oct_vol, Tensor) else Tensor(oct_vol, dtype=self.dtype)
        self._check_inputs(fundus, oct_vol)
        ff = self.fundus(fundus, training)
        if self.ablation.no_oct:
            # fundus-only arm: the OCT slot carries zeros
            xo = Tensor(np.zeros(ff.top.shape, dtype=self.dtype))
        else:
            xo = self.oct(oct_vol, training, grid=ff.top.shape[2:])
        fuse = self.concat if self.ablation.no_cmfa else self.cmfa
        fused = fuse(ff.top, xo)
        skips = (fundus, ff.pyramid[0], ff.pyramid[1])
        return fused, skips

    def eps(self, xt, t, fused, skips):
        return self.eps_net(xt, t, fused, skips)

    def grade_logits(self, fused, training=False):
        return self.grading.logits(fused, training)

    def predict(self, fundus, oct_vol, steps=5, seed=0):
        """Eval-mode labels ``[N, H, W]`` (or None) and grade probabilities ``[N, 3]`` (or None)."""
        with no_grad():
            fused, skips = self.features(fundus, oct_vol, training=False)
            labels = probs = None
            if not self.ablation.no_segmentation:
                if self.ablation.no_ird:
                    labels = decode_mask_latent(single_pass_decode(fused, skips, self.eps_net, self.sched))
                else:
                    _, labels = sample_mask(fused, skips, self.eps_net, self.sched, steps, seed)
            if not self.ablation.no_grading:
                logits = self.grade_logits(fused, training=False).data
                z = np.exp(logits - logits.max(axis=1, keepdims=True))
                probs = z / z.sum(axis=1, keepdims=True)
        return labels, probs

    def config_dict(self):
        d = {f"model.{k}": v for k, v in dataclasses.asdict(self.cfg).items()}
        d.update({f"ablation.{k}": v for k, v in dataclasses.asdict(self.ablation).items()})
        d["dtype"] = self.dtype.name
        return d
