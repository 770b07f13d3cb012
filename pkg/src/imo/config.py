"""Run configuration: one flat ``key = value`` file covering data, model,
training, ablation switches and paths."""

import dataclasses
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ValidationError
from .model import Ablation, ModelConfig
from .phantom import PhantomConfig
from .train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # data
    image_size: tuple = (64, 64)
    volume_size: tuple = (16, 32, 32)
    disc_radius: tuple = (0.15, 0.30)
    cdr_range: tuple = (0.2, 0.95)
    noise: float = 0.05
    t1: float = 0.5
    t2: float = 0.7
    data_seed: int = 0
    n: int = 8
    train_fraction: float = 0.75
    # model
    channels: int = 64
    reduction: int = 4
    fundus_widths: tuple = (16, 32)
    oct_widths: tuple = (8, 16)
    eps_width: int = 16
    temb_dim: int = 64
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    dtype: str = "float32"
    # training
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 4
    max_steps: int = 2000
    lambda_diff: float = 1.0
    lambda_x0: float = 0.5
    lambda_cls: float = 1.0
    sample_steps: int = 5
    terminal_fraction: float = 0.5
    seed: int = 0
    # ablation
    no_oct: bool = False
    no_grading: bool = False
    no_segmentation: bool = False
    no_cmfa: bool = False
    no_ird: bool = False
    # paths
    data: str = "data"
    out: str = "out"
    ckpt: str = "out/model.imoc"

    def phantom(self):
        return PhantomConfig(image_size=self.image_size, volume_size=self.volume_size,
                             disc_radius=self.disc_radius, cdr_range=self.cdr_range,
                             noise=self.noise, t1=self.t1, t2=self.t2, seed=self.data_seed).validate()

    def model(self):
        return ModelConfig(image_size=self.image_size, volume_size=self.volume_size,
                           channels=self.channels, reduction=self.reduction,
                           fundus_widths=self.fundus_widths, oct_widths=self.oct_widths,
                           eps_width=self.eps_width, temb_dim=self.temb_dim, T=self.T,
                           beta_start=self.beta_start, beta_end=self.beta_end).validate()

    def train(self):
        return TrainConfig(lr=self.lr, momentum=self.momentum, batch_size=self.batch_size,
                           max_steps=self.max_steps, lambda_diff=self.lambda_diff,
                           lambda_x0=self.lambda_x0, lambda_cls=self.lambda_cls,
                           sample_steps=self.sample_steps,
                           terminal_fraction=self.terminal_fraction, seed=self.seed).validate()

    def ablation(self):
        return Ablation(**{f.name: getattr(self, f.name) for f in fields(Ablation)}).validate()

    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self):
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.n < 1:
            raise ValidationError(f"n must be >= 1, got {self.n}")
        if not 0 < self.train_fraction <= 1:
            raise ValidationError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        self.phantom(), self.model(), self.train(), self.ablation()
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(key, raw):
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, tuple):
            conv = type(default[0])
            vals = tuple(conv(v) for v in raw.split(","))
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated values")
            return vals
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from None


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(e) for e in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text, base=None):
    """Parse ``key = value`` lines (``#`` starts a comment) over ``base`` defaults."""
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in updates:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        updates[key] = _parse_value(key, raw)
    return apply_overrides(base or RunConfig(), updates)


def apply_overrides(cfg, updates):
    unknown = [k for k in updates if k not in _FIELDS]
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}")
    cfg = dataclasses.replace(cfg, **{k: v for k, v in updates.items() if v is not None})
    try:
        return cfg.validate()
    except ValidationError as e:
        raise ConfigError(str(e)) from None


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg):
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def defaults_help():
    return "config keys (defaults):\n" + "".join(
        f"  {f.name} = {_format_value(f.default)}\n" for f in fields(RunConfig))
