"""Synthetic fundus/OCT phantoms with nested disc/cup masks and grade labels.

Each case is a pure function of ``(config.seed, index)``.  The fundus shows a
bright elliptical optic disc with a brighter concentric cup on a textured
background; the OCT volume shows a retinal surface whose excavation over the
cup deepens with the cup-to-disc ratio (CDR).  Grades come from CDR
thresholds, so segmentation and grading share one latent cause.
"""

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .core.arrayio import load_array, save_array
from .errors import ValidationError

NUM_CLASSES = 3  # 0 background ("unlabel"), 1 optic disc rim, 2 optic cup
NUM_GRADES = 3


@dataclass(frozen=True)
class PhantomConfig:
    image_size: tuple = (64, 64)
    volume_size: tuple = (16, 32, 32)
    disc_radius: tuple = (0.15, 0.30)  # fraction of the shorter image side
    cdr_range: tuple = (0.2, 0.95)
    noise: float = 0.05
    t1: float = 0.5
    t2: float = 0.7
    seed: int = 0

    def validate(self):
        H, W = self.image_size
        D, Hv, Wv = self.volume_size
        if min(H, W, D, Hv, Wv) < 1:
            raise ValidationError("image and volume extents must be positive")
        lo, hi = self.disc_radius
        if not 0 < lo <= hi < 0.4:
            raise ValidationError(f"disc_radius must satisfy 0 < lo <= hi < 0.4, got {self.disc_radius}")
        lo, hi = self.cdr_range
        if not 0 < lo <= hi < 1:
            raise ValidationError(f"cdr_range must lie in (0, 1), got {self.cdr_range}")
        if not 0 <= self.noise <= 0.2:
            raise ValidationError(f"noise must lie in [0, 0.2], got {self.noise}")
        if not 0 < self.t1 < self.t2 < 1:
            raise ValidationError(f"thresholds need 0 < t1 < t2 < 1, got {self.t1}, {self.t2}")
        return self


@dataclass
class PhantomSample:
    fundus: np.ndarray  # [3, H, W] in [0, 1]
    oct: np.ndarray  # [1, D, H', W'] in [0, 1]
    mask: np.ndarray  # [H, W] int labels
    grade: int
    cdr: float


def derive_grade(cdr, cfg):
    if not 0 < cdr < 1:
        raise ValidationError(f"cdr must lie in (0, 1), got {cdr}")
    if cdr < cfg.t1:
        return 0
    if cdr < cfg.t2:
        return 1
    return 2


def _ellipse_radius(yy, xx, cy, cx, ry, rx):
    """Normalized elliptical radius; <= 1 inside."""
    return np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)


def _texture(rng, shape, n_waves=3):
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    field = np.zeros(shape)
    for _ in range(n_waves):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return field / n_waves


def generate_sample(cfg, index, force_cdr=None):
    """Render case ``index``; ``force_cdr`` pins the cup-to-disc ratio."""
    cfg.validate()
    if index < 0:
        raise ValidationError(f"index must be >= 0, got {index}")
    rng = np.random.default_rng([cfg.seed, index])
    H, W = cfg.image_size
    D, Hv, Wv = cfg.volume_size
    side = min(H, W)

    # geometry; every draw happens even when forced so the stream stays aligned
    r = rng.uniform(*cfg.disc_radius) * side
    aspect = rng.uniform(0.9, 1.1)
    cy = H / 2 + rng.uniform(-0.08, 0.08) * H
    cx = W / 2 + rng.uniform(-0.08, 0.08) * W
    cdr = rng.uniform(*cfg.cdr_range)
    if force_cdr is not None:
        if not 0 < force_cdr < 1:
            raise ValidationError(f"force_cdr must lie in (0, 1), got {force_cdr}")
        cdr = float(force_cdr)
    ry, rx = r * aspect, r

    # pixel centers decide membership
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    rho = _ellipse_radius(yy, xx, cy, cx, ry, rx)
    mask = np.zeros((H, W), dtype=np.int64)
    mask[rho <= 1.0] = 1
    mask[rho <= cdr] = 2

    tex = _texture(rng, (H, W))
    vignette = 1.0 - 0.35 * (((yy - H / 2) / H) ** 2 + ((xx - W / 2) / W) ** 2) * 4
    brightness = rng.uniform(0.9, 1.1)
    background = np.array([0.55, 0.28, 0.15])[:, None, None] * (1 + 0.15 * tex) * vignette
    disc = np.array([0.85, 0.62, 0.42])[:, None, None] * np.ones((1, H, W))
    cup = np.array([0.97, 0.88, 0.72])[:, None, None] * np.ones((1, H, W))
    fundus = np.where(mask == 0, background, np.where(mask == 1, disc, cup)) * brightness
    fundus = fundus + cfg.noise * rng.standard_normal((3, H, W))
    fundus = np.clip(fundus, 0.0, 1.0).astype(np.float32)

    # OCT en-face grid covers the same field of view as the fundus
    vy, vx = np.mgrid[0:Hv, 0:Wv] + 0.5
    sy, sx = Hv / H, Wv / W
    rho_v = _ellipse_radius(vy, vx, cy * sy, cx * sx, ry * sy, rx * sx)
    surface = 0.25 * D + 0.6 * D * cdr * np.clip(1 - (rho_v / cdr) ** 2, 0, None)
    surface = surface - 0.06 * D * np.clip(1 - rho_v ** 2, 0, None)  # raised rim
    z = np.arange(D)[:, None, None] + 0.5
    depth = z - surface[None]
    oct_vol = np.where(depth >= 0, 0.85 * np.exp(-depth / (0.35 * D)), 0.05)
    oct_vol = oct_vol + cfg.noise * rng.standard_normal((D, Hv, Wv))
    oct_vol = np.clip(oct_vol, 0.0, 1.0).astype(np.float32)[None]

    return PhantomSample(fundus=fundus, oct=oct_vol, mask=mask,
                         grade=derive_grade(cdr, cfg), cdr=float(cdr))


def generate_dataset(cfg, n, start=0):
    return [generate_sample(cfg, i) for i in range(start, start + n)]


def encode_mask_onehot(mask):
    """``[H, W]`` labels -> ``[3, H, W]`` one-hot (float32)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-d, got shape {mask.shape}")
    if not np.all(np.isin(mask, np.arange(NUM_CLASSES))):
        raise ValidationError(f"mask labels must be in 0..{NUM_CLASSES - 1}")
    mask = mask.astype(np.int64)
    return (np.arange(NUM_CLASSES)[:, None, None] == mask[None]).astype(np.float32)


def decode_onehot(onehot):
    """Per-pixel argmax over the class axis; ties go to the lowest class."""
    return np.asarray(onehot).argmax(axis=0)


def split_dataset(n, fraction, seed):
    """Shuffle ``range(n)`` and split into (train, test) index lists."""
    if n < 2:
        raise ValidationError(f"need at least 2 cases to split, got {n}")
    if not 0 < fraction < 1:
        raise ValidationError(f"fraction must lie in (0, 1), got {fraction}")
    n_test = int(np.floor(n * (1 - fraction) + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    return sorted(perm[n_test:].tolist()), sorted(perm[:n_test].tolist())


def collate(samples):
    """Stack samples into batch arrays."""
    return {
        "fundus": np.stack([s.fundus for s in samples]),
        "oct": np.stack([s.oct for s in samples]),
        "mask": np.stack([s.mask for s in samples]),
        "grade": np.array([s.grade for s in samples], dtype=np.int64),
    }


# --------------------------------------------------------------------------
# on-disk layout: one directory per case
# --------------------------------------------------------------------------

def write_meta(path, meta):
    with open(path, "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")


def read_meta(path):
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                meta[k.strip()] = v.strip()
    return meta


def save_sample(directory, sample, index=None):
    os.makedirs(directory, exist_ok=True)
    save_array(os.path.join(directory, "fundus.imoa"), sample.fundus)
    save_array(os.path.join(directory, "oct.imoa"), sample.oct)
    save_array(os.path.join(directory, "mask.imoa"), sample.mask.astype(np.float32))
    meta = {"cdr": repr(sample.cdr), "grade": sample.grade}
    if index is not None:
        meta["index"] = index
    write_meta(os.path.join(directory, "meta.txt"), meta)


def load_sample(directory):
    """Read one case; ``mask``/``grade``/``cdr`` are None when absent."""
    fundus = load_array(os.path.join(directory, "fundus.imoa")).astype(np.float32)
    oct_vol = load_array(os.path.join(directory, "oct.imoa")).astype(np.float32)
    mpath = os.path.join(directory, "mask.imoa")
    mask = load_array(mpath).astype(np.int64) if os.path.exists(mpath) else None
    meta_path = os.path.join(directory, "meta.txt")
    meta = read_meta(meta_path) if os.path.exists(meta_path) else {}
    grade = int(meta["grade"]) if "grade" in meta else None
    cdr = float(meta["cdr"]) if "cdr" in meta else None
    return PhantomSample(fundus=fundus, oct=oct_vol, mask=mask, grade=grade, cdr=cdr)


def write_dataset(out_dir, cfg, n):
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(n):
        name = f"case_{i:04d}"
        save_sample(os.path.join(out_dir, name), generate_sample(cfg, i), index=i)
        names.append(name)
    write_meta(os.path.join(out_dir, "dataset.txt"),
               {"n": n, **{f.name: _fmt(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}})
    return names


def _fmt(v):
    return ",".join(str(e) for e in v) if isinstance(v, tuple) else v


def list_cases(data_dir):
    return sorted(d for d in os.listdir(data_dir)
                  if os.path.isfile(os.path.join(data_dir, d, "fundus.imoa")))


def load_dataset(data_dir):
    return [load_sample(os.path.join(data_dir, d)) for d in list_cases(data_dir)]
