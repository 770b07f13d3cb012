"""Loop oracles shared by several test modules."""

import numpy as np


def naive_conv3d(x, w, b, stride, pad, groups):
    """Direct loop over every output and tap, accumulating ci, then kd, kh, kw."""
    N, Ci, D, H, W = x.shape
    Co, cig, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = pad
    xp = np.zeros((N, Ci, D + 2 * pd, H + 2 * ph, W + 2 * pw))
    xp[:, :, pd:pd + D, ph:ph + H, pw:pw + W] = x
    Do, Ho, Wo = (D + 2 * pd - kd) // sd + 1, (H + 2 * ph - kh) // sh + 1, (W + 2 * pw - kw) // sw + 1
    cog = Co // groups
    out = np.zeros((N, Co, Do, Ho, Wo))
    for n in range(N):
        for co in range(Co):
            g = co // cog
            for z in range(Do):
                for i in range(Ho):
                    for j in range(Wo):
                        acc = 0.0
                        for c in range(cig):
                            for a in range(kd):
                                for p in range(kh):
                                    for q in range(kw):
                                        acc += xp[n, g * cig + c, z * sd + a, i * sh + p, j * sw + q] * w[co, c, a, p, q]
                        out[n, co, z, i, j] = acc
    if b is not None:
        out += b.reshape(1, Co, 1, 1, 1)
    return out


def naive_conv2d(x, w, b, stride, pad, groups):
    return naive_conv3d(x[:, :, None], w[:, :, None], b, (1,) + stride, (0,) + pad, groups)[:, :, 0]


def random_conv_case(rng, nsp):
    groups = int(rng.choice([1, 1, 2, 3]))
    cig, cog = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    Ci, Co = cig * groups, cog * groups
    k = tuple(int(v) for v in rng.integers(1, 4, size=nsp))
    stride = tuple(int(v) for v in rng.integers(1, 3, size=nsp))
    pad = tuple(int(rng.integers(0, kk)) for kk in k)
    size = tuple(int(max(kk, rng.integers(2, 7))) for kk in k)
    N = int(rng.integers(1, 3))
    x = rng.standard_normal((N, Ci) + size)
    w = rng.standard_normal((Co, cig) + k)
    b = rng.standard_normal(Co) if rng.random() < 0.5 else None
    return x, w, b, stride, pad, groups
