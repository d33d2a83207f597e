"""Count errors, PSNR and SSIM (numpy for evaluation, torch for the loss)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DENSITY_RANGE_EPS = 1e-6


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window_size must be odd and positive")
        if self.k1 <= 0 or self.k2 <= 0 or self.data_range <= 0:
            raise ValueError("k1, k2 and data_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


@dataclass(frozen=True)
class CountErrorReport:
    mae: float
    mse: float  # root mean squared error, per crowd-counting tables
    n: int


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {g.size} targets")
    if p.size == 0:
        raise ValueError("need at least one count")
    return p, g


def mae(pred_counts, gt_counts) -> float:
    p, g = _pair(pred_counts, gt_counts)
    return float(np.mean(np.abs(p - g)))


def mse(pred_counts, gt_counts) -> float:
    """Root of the mean squared count error (the name follows the field)."""
    return math.sqrt(squared_error(pred_counts, gt_counts))


def squared_error(pred_counts, gt_counts) -> float:
    """Plain mean squared count error, without the root."""
    p, g = _pair(pred_counts, gt_counts)
    return float(np.mean((p - g) ** 2))


def count_errors(pred_counts, gt_counts) -> CountErrorReport:
    p, _ = _pair(pred_counts, gt_counts)
    return CountErrorReport(mae(pred_counts, gt_counts), mse(pred_counts, gt_counts), int(p.size))


def psnr(a, b, data_range: float) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / err)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = w.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(x, n, axis=0) @ w
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ w


def ssim_map(a, b, params: SsimParams = SsimParams()) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"need two equal 2D grids, got {a.shape} and {b.shape}")
    ws = params.window_size
    if a.shape[0] < ws or a.shape[1] < ws:
        raise ValueError(f"image {a.shape} smaller than the {ws}x{ws} window")
    w = gaussian_window(ws, params.window_sigma)
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    """Mean Gaussian-weighted SSIM over valid (unpadded) windows."""
    return float(ssim_map(a, b, params).mean())


def density_data_range(pred, gt) -> float:
    return max(float(np.max(gt)), float(np.max(pred)), DENSITY_RANGE_EPS)


def density_quality(pred, gt, params: SsimParams = SsimParams()) -> tuple:
    """(psnr, ssim) between two density maps on a shared, scale-free range."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    rng = density_data_range(pred, gt)
    p = SsimParams(params.window_size, params.window_sigma, params.k1, params.k2, rng)
    return psnr(pred, gt, rng), ssim(pred, gt, p)


# ---- differentiable version ----

def ssim_torch(a, b, params: SsimParams = SsimParams()):
    """SSIM for tensors shaped (H, W), (C, H, W) or (N, C, H, W).

    Returns the per-image mean over channels and valid windows, shaped (N,)
    (a 0-d tensor when the input had no batch axis).
    """
    import torch
    import torch.nn.functional as F

    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    squeeze = a.dim() < 4
    while a.dim() < 4:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    n, c, h, w = a.shape
    ws = params.window_size
    if h < ws or w < ws:
        raise ValueError(f"image {h}x{w} smaller than the {ws}x{ws} window")
    g = torch.as_tensor(gaussian_window(ws, params.window_sigma), dtype=a.dtype, device=a.device)
    kern = torch.outer(g, g).expand(c, 1, ws, ws).contiguous()

    def filt(x):
        return F.conv2d(x, kern, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    out = smap.mean(dim=(1, 2, 3))
    return out[0] if squeeze else out


def ssim_loss(a, b, params: SsimParams = SsimParams()):
    """1 - SSIM; accepts numpy arrays or tensors (differentiable for tensors)."""
    if type(a).__module__.startswith("torch"):
        return 1.0 - ssim_torch(a, b, params)
    return 1.0 - ssim(a, b, params)
