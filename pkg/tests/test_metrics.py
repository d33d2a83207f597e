import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crowdsim.metrics import (SsimParams, count_errors, density_quality, mae, mse, psnr, squared_error,
                              ssim, ssim_loss, ssim_torch)

from .oracles import brute_ssim, central_difference


def test_mae_mse_values():
    assert mae([4, 7], [3, 5]) == 1.5
    assert mse([4, 7], [3, 5]) == pytest.approx(math.sqrt(2.5))
    assert squared_error([4, 7], [3, 5]) == 2.5
    assert mae([1, 2], [1, 2]) == 0 and mse([1, 2], [1, 2]) == 0
    with pytest.raises(ValueError):
        mae([1], [1, 2])
    with pytest.raises(ValueError):
        mse([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=30), st.randoms())
def test_count_error_properties(pairs, rnd):
    p, g = zip(*pairs)
    r = count_errors(p, g)
    assert r.mae <= r.mse + 1e-9
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    p2, g2 = zip(*shuffled)
    assert mae(p2, g2) == pytest.approx(r.mae)
    assert mse(p2, g2) == pytest.approx(r.mse)


def test_psnr():
    a = np.zeros((8, 8))
    assert psnr(a, a, 1.0) == math.inf
    assert psnr(a, a + 0.1, 1.0) == pytest.approx(20.0)
    rng = np.random.default_rng(0)
    b = rng.random((8, 8))
    assert psnr(a, b, 2.0) - psnr(a, b, 1.0) == pytest.approx(20 * math.log10(2))
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 4)), 1.0)


def test_ssim_identity_and_constant():
    rng = np.random.default_rng(0)
    x = rng.random((32, 32))
    assert abs(ssim(x, x) - 1.0) <= 1e-9
    p = SsimParams(data_range=1.0)
    closed = p.c1 / (1.0 + p.c1)  # mean 0 vs mean L, zero variance
    assert ssim(np.zeros((16, 16)), np.ones((16, 16)), p) == pytest.approx(closed, abs=1e-12)


def test_ssim_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(3):
        a, b = rng.random((24, 20)), rng.random((24, 20))
        assert abs(ssim(a, b) - brute_ssim(a, b)) <= 1e-6


def test_ssim_symmetric_and_small_input():
    rng = np.random.default_rng(2)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_params_validation():
    with pytest.raises(ValueError):
        SsimParams(window_size=10)
    with pytest.raises(ValueError):
        SsimParams(data_range=0)


def test_torch_matches_numpy():
    rng = np.random.default_rng(3)
    a, b = rng.random((20, 22)), rng.random((20, 22))
    t = ssim_torch(torch.tensor(a), torch.tensor(b)).item()
    assert abs(t - ssim(a, b)) <= 1e-12


def test_ssim_loss_range_and_identity():
    rng = np.random.default_rng(4)
    x = rng.random((16, 16))
    assert ssim_loss(x, x) == pytest.approx(0.0, abs=1e-9)
    for _ in range(10):
        v = ssim_loss(rng.random((16, 16)), -rng.random((16, 16)))
        assert 0.0 <= v <= 2.0


def test_ssim_loss_gradient_fd_8x8():
    p = SsimParams(window_size=7, data_range=1.0)
    rng = np.random.default_rng(5)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    tb = torch.tensor(b, requires_grad=True)
    ssim_loss(torch.tensor(a), tb, p).backward()
    fd = central_difference(lambda v: ssim_loss(a, v, p), b.copy())
    np.testing.assert_allclose(tb.grad.numpy(), fd, rtol=1e-2, atol=1e-6)


def test_density_quality_scale_free():
    rng = np.random.default_rng(6)
    gt = rng.random((16, 16))
    pred = gt + 0.01 * rng.random((16, 16))
    p1, s1 = density_quality(pred, gt)
    p2, s2 = density_quality(pred * 10, gt * 10)
    assert p1 == pytest.approx(p2) and s1 == pytest.approx(s2)
