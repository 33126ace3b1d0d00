"""Pixel-space distances: MSE, SSIM and MS-SSIM (as ``1 - similarity``).

SSIM uses an 11-tap Gaussian window (sigma 1.5) with valid convolution, so its
error map is ``(H - 10) x (W - 10)``. Computed in float64.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from ..data_io import ImageTensor
from .base import DistanceResult, MetricSpec, check_pair, default_device, to_batch

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_MIN_SIDE = (WIN_SIZE - 1) * 2 ** (len(MS_WEIGHTS) - 1) + 1  # 161


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA, dtype=torch.float64, device=None) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - size // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = win.numel()
    x = F.conv2d(x, win.view(1, 1, k, 1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, win.view(1, 1, 1, k).repeat(c, 1, 1, 1), groups=c)


def ssim_maps(x: torch.Tensor, y: torch.Tensor, win: torch.Tensor, data_range: float = 1.0):
    """Per-channel SSIM and contrast-structure maps over the valid region."""
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu1, mu2 = _filter(x, win), _filter(y, win)
    mu1_sq, mu2_sq, mu1_mu2 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = _filter(x * x, win) - mu1_sq
    s2 = _filter(y * y, win) - mu2_sq
    s12 = _filter(x * y, win) - mu1_mu2
    cs_map = (2 * s12 + c2) / (s1 + s2 + c2)
    ssim_map = ((2 * mu1_mu2 + c1) / (mu1_sq + mu2_sq + c1)) * cs_map
    return ssim_map, cs_map


def mse(a: ImageTensor, b: ImageTensor, want_map: bool = False, metric_id: str = "mse") -> DistanceResult:
    check_pair(a, b)
    diff = a.pixels.astype("float64") - b.pixels.astype("float64")
    per_pixel = (diff * diff).mean(axis=2)
    return DistanceResult(float(per_pixel.mean()), metric_id, per_pixel if want_map else None)


def ssim(a: ImageTensor, b: ImageTensor, want_map: bool = False, metric_id: str = "ssim", device=None) -> DistanceResult:
    check_pair(a, b)
    if min(a.shape) < WIN_SIZE:
        raise ValueError(f"ssim needs at least {WIN_SIZE}x{WIN_SIZE} input, got {a.shape}")
    device = device or default_device()
    x, y = to_batch(a, device, torch.float64), to_batch(b, device, torch.float64)
    win = gaussian_window(device=device)
    ssim_map, _ = ssim_maps(x, y, win)
    err = 1.0 - ssim_map[0].mean(dim=0)
    value = float(err.mean())
    return DistanceResult(max(value, 0.0), metric_id, err.cpu().numpy() if want_map else None)


def ms_ssim(a: ImageTensor, b: ImageTensor, metric_id: str = "ms-ssim", device=None) -> DistanceResult:
    check_pair(a, b)
    if min(a.shape) < MS_MIN_SIDE:
        raise ValueError(f"ms-ssim needs both sides >= {MS_MIN_SIDE} (five dyadic scales), got {a.shape}")
    device = device or default_device()
    x, y = to_batch(a, device, torch.float64), to_batch(b, device, torch.float64)
    win = gaussian_window(device=device)
    weights = torch.tensor(MS_WEIGHTS, dtype=torch.float64, device=device)
    levels = []
    for i in range(len(MS_WEIGHTS)):
        ssim_map, cs_map = ssim_maps(x, y, win)
        if i < len(MS_WEIGHTS) - 1:
            levels.append(torch.relu(cs_map.flatten(2).mean(-1)))
            pad = [s % 2 for s in x.shape[2:]]
            x = F.avg_pool2d(x, kernel_size=2, padding=pad)
            y = F.avg_pool2d(y, kernel_size=2, padding=pad)
    levels.append(torch.relu(ssim_map.flatten(2).mean(-1)))
    stacked = torch.stack(levels, dim=0)  # (level, 1, channel)
    sim = torch.prod(stacked ** weights.view(-1, 1, 1), dim=0).mean()
    return DistanceResult(max(1.0 - float(sim), 0.0), metric_id)


def pixel_metric(spec: MetricSpec, a: ImageTensor, b: ImageTensor, want_map: bool = False, device=None) -> DistanceResult:
    if spec.family == "mse":
        return mse(a, b, want_map, spec.metric_id)
    if spec.family == "ssim":
        return ssim(a, b, want_map, spec.metric_id, device)
    if spec.family == "ms-ssim":
        return ms_ssim(a, b, spec.metric_id, device)
    if spec.family == "dists":
        from .dists import dists

        return dists(a, b, spec.metric_id, device)
    raise ValueError(f"{spec.metric_id} is not a pixel-space metric")
