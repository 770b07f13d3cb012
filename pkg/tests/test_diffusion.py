import math

import numpy as np
import pytest

from imo.core.tensor import Tensor
from imo.diffusion import (EpsNet, build_schedule, ddim_sample, ddim_step, decode_mask_latent,
                           encode_mask_latent, forward_noise, predict_x0, sample_mask, timestep_ladder)
from imo.errors import ValidationError
from imo.nn import ModelParams


def test_schedule_small_cases():
    s = build_schedule(T=1)
    assert s.alpha_bar[1] == 1 - 1e-4
    s = build_schedule()
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0) and np.all(s.alpha_bar > 0)
    for bad in (dict(T=0), dict(beta_start=0.0), dict(beta_start=0.1, beta_end=0.01), dict(beta_end=1.0)):
        with pytest.raises(ValidationError):
            build_schedule(**bad)


def test_alpha_bar_matches_running_product():
    s = build_schedule()
    acc = 1.0
    for i in range(1, 101):
        beta_i = 1e-4 + (0.02 - 1e-4) * (i - 1) / 99
        acc *= 1.0 - beta_i
        assert abs(s.alpha_bar[i] - acc) < 1e-12


def test_forward_noise_examples():
    s = build_schedule()
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    assert np.array_equal(forward_noise(x0, 0, eps, s), x0)
    # a schedule hitting alpha_bar = 0.25 exactly at t=1
    q = build_schedule(T=1, beta_start=0.75, beta_end=0.75)
    c0, c1 = q.coeffs(1)
    assert c0 == 0.5 and abs(c1 - math.sqrt(0.75)) < 1e-12
    np.testing.assert_allclose(forward_noise(x0, 1, eps, q), 0.5 * x0 + math.sqrt(0.75) * eps, rtol=0, atol=1e-12)
    with pytest.raises(ValidationError):
        forward_noise(x0, 101, eps, s)


def test_forward_noise_monte_carlo():
    s = build_schedule()
    rng = np.random.default_rng(1)
    n = 100_000
    x0 = rng.uniform(-1, 1)
    t = 37
    eps = rng.standard_normal((n, 1))
    xt = forward_noise(np.full((n, 1), x0), t, eps, s)[:, 0]
    ab = s.alpha_bar[t]
    var = 1 - ab
    assert abs(xt.mean() - math.sqrt(ab) * x0) < 3 * math.sqrt(var / n)
    # standard error of the sample variance of a Gaussian is var * sqrt(2 / (n - 1))
    assert abs(xt.var(ddof=1) - var) < 3 * var * math.sqrt(2 / (n - 1))


def test_predict_x0_inverts_forward_32bit():
    s = build_schedule()
    rng = np.random.default_rng(2)
    for t in (1, 10, 50, 100):
        x0 = encode_mask_latent(rng.integers(0, 3, (2, 8, 8)))
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        xt = forward_noise(x0, t, eps, s)
        assert xt.dtype == np.float32
        np.testing.assert_allclose(predict_x0(Tensor(xt), t, Tensor(eps), s).data, x0, rtol=0, atol=1e-5)


def test_predict_x0_examples_64bit():
    s = build_schedule()
    rng = np.random.default_rng(3)
    xt = rng.uniform(-1, 1, (2, 3, 4, 4))
    assert np.array_equal(predict_x0(Tensor(xt), 0, Tensor(np.zeros_like(xt)), s).data, xt)
    eps = rng.standard_normal(xt.shape)
    t = np.array([20, 80])
    x0 = predict_x0(Tensor(xt), t, Tensor(eps), s, clamp=False).data
    np.testing.assert_allclose(forward_noise(x0, t, eps, s), xt, rtol=0, atol=1e-12)


def test_ddim_step_true_eps_reproduces_forward_64bit():
    s = build_schedule()
    rng = np.random.default_rng(4)
    for t, tp in ((100, 80), (60, 59), (20, 0), (100, 0)):
        x0 = rng.uniform(-1, 1, (2, 3, 4, 4))
        eps = rng.standard_normal(x0.shape)
        xt = forward_noise(x0, t, eps, s)
        out = ddim_step(Tensor(xt), t, tp, Tensor(eps), s).data
        np.testing.assert_allclose(out, forward_noise(x0, tp, eps, s), rtol=0, atol=1e-12)


def test_ddim_step_to_zero_is_x0_hat():
    s = build_schedule()
    rng = np.random.default_rng(5)
    xt, eps = rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 3, 4, 4))
    assert np.array_equal(ddim_step(Tensor(xt), 30, 0, Tensor(eps), s).data,
                          predict_x0(Tensor(xt), 30, Tensor(eps), s).data)
    with pytest.raises(ValidationError):
        ddim_step(Tensor(xt), 30, 30, Tensor(eps), s)


def test_stride_consistency_with_affine_oracle():
    s = build_schedule()
    rng = np.random.default_rng(6)
    x0 = rng.uniform(-1, 1, (1, 3, 4, 4))

    def eps_fn(x, t):
        c0, c1 = s.coeffs(t)
        return Tensor((x.data - c0 * x0) / c1)

    xT = Tensor(rng.standard_normal(x0.shape))
    one = ddim_step(xT, 100, 0, eps_fn(xT, 100), s).data
    mid = ddim_step(xT, 100, 50, eps_fn(xT, 100), s)
    two = ddim_step(mid, 50, 0, eps_fn(mid, 50), s).data
    np.testing.assert_allclose(one, x0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(two, x0, rtol=0, atol=1e-12)


def test_ladder():
    assert timestep_ladder(100, 5) == [100, 80, 60, 40, 20, 0]
    assert timestep_ladder(100, 100)[-2:] == [1, 0]
    for K in (0, 101, 3):
        with pytest.raises(ValidationError):
            timestep_ladder(100, K)


def test_oracle_eps_sampling_recovers_mask():
    s = build_schedule()
    rng = np.random.default_rng(7)
    mask = rng.integers(0, 3, (2, 8, 8))
    x0 = encode_mask_latent(mask).astype(np.float64)

    def eps_fn(x, t):
        c0, c1 = s.coeffs(t)
        return Tensor((x.data - c0 * x0) / c1)

    for K in (1, 5, 100):
        latent = ddim_sample(eps_fn, x0.shape, s, K, seed=3, dtype=np.float64)
        assert np.array_equal(decode_mask_latent(latent), mask)


def test_latent_codec():
    z = encode_mask_latent(np.zeros((4, 4), dtype=int))
    assert np.all(z[0] == 1) and np.all(z[1:] == -1)
    rng = np.random.default_rng(8)
    for _ in range(100):
        m = rng.integers(0, 3, (5, 6))
        assert np.array_equal(decode_mask_latent(encode_mask_latent(m)), m)
    ties = np.zeros((3, 2, 2))
    ties[1, 0, 0] = ties[2, 0, 0] = 1.0
    ties[2, 1, 1] = 0.5
    assert decode_mask_latent(ties).tolist() == [[1, 0], [0, 2]]
    noise = rng.uniform(-1, 1, (3, 16, 16))
    d = decode_mask_latent(noise)
    assert np.array_equal(d, decode_mask_latent(noise)) and set(np.unique(d)) <= {0, 1, 2}


def _tiny_net():
    p = ModelParams(np.float32)
    net = EpsNet(p, np.random.default_rng(0), fused_channels=8, skip_channels=(3, 4, 6), width=4, temb_dim=8)
    rng = np.random.default_rng(1)
    fused = Tensor(rng.standard_normal((2, 8, 4, 4)).astype(np.float32))
    skips = tuple(Tensor(rng.standard_normal(sh).astype(np.float32))
                  for sh in ((2, 3, 16, 16), (2, 4, 8, 8), (2, 6, 4, 4)))
    return net, fused, skips


def test_eps_net_shape_and_sampling():
    net, fused, skips = _tiny_net()
    s = build_schedule()
    xt = Tensor(np.zeros((2, 3, 16, 16), dtype=np.float32))
    assert net(xt, 50, fused, skips).shape == xt.shape
    a = sample_mask(fused, skips, net, s, 5, seed=9)
    b = sample_mask(fused, skips, net, s, 5, seed=9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    for K in (100, 50):
        _, labels = sample_mask(fused, skips, net, s, K, seed=1)
        assert labels.shape == (2, 16, 16) and set(np.unique(labels)) <= {0, 1, 2}
    with pytest.raises(ValidationError):
        sample_mask(fused, skips, net, s, 101, seed=1)
