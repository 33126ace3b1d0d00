"""DISTS: structure and texture similarity over VGG16 stages with L2 pooling."""

from __future__ import annotations

import threading
from importlib import resources

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..data_io import ImageTensor
from . import backbones
from .base import DistanceResult, check_pair, default_device, to_batch

MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)
CHANNELS = [3, 64, 128, 256, 512, 512]
C1 = C2 = 1e-6

_lock = threading.Lock()
_cache: dict[str, tuple[list[nn.Module], list[torch.Tensor], list[torch.Tensor]]] = {}


class L2Pool(nn.Module):
    """Hanning-weighted L2 pooling (stride 2) in place of VGG's max pooling."""

    def __init__(self, channels: int):
        super().__init__()
        a = np.hanning(5)[1:-1]
        g = torch.tensor(a[:, None] * a[None, :], dtype=torch.float32)
        g = g / g.sum()
        self.register_buffer("filter", g[None, None].repeat(channels, 1, 1, 1))

    def forward(self, x):
        out = F.conv2d(x**2, self.filter, stride=2, padding=1, groups=x.shape[1])
        return (out + 1e-12).sqrt()


def _model(device):
    key = str(device)
    with _lock:
        if key in _cache:
            return _cache[key]
    features, _ = backbones.load_features("vgg16", device)
    stages = [
        features[0:4],
        nn.Sequential(L2Pool(64), *features[5:9]),
        nn.Sequential(L2Pool(128), *features[10:16]),
        nn.Sequential(L2Pool(256), *features[17:23]),
        nn.Sequential(L2Pool(512), *features[24:30]),
    ]
    stages = [s.to(device).eval() for s in stages]
    ref = resources.files("aerodetect") / "weights" / "dists_alpha_beta.npz"
    with resources.as_file(ref) as p, np.load(p) as npz:
        alpha = torch.from_numpy(npz["alpha"].astype(np.float64))
        beta = torch.from_numpy(npz["beta"].astype(np.float64))
    w_sum = alpha.sum() + beta.sum()
    alphas = [t.to(device) for t in torch.split(alpha / w_sum, CHANNELS)]
    betas = [t.to(device) for t in torch.split(beta / w_sum, CHANNELS)]
    with _lock:
        _cache[key] = (stages, alphas, betas)
    return _cache[key]


def _feats(stages, x: torch.Tensor) -> list[torch.Tensor]:
    mean = torch.tensor(MEAN, device=x.device).view(1, 3, 1, 1)
    std = torch.tensor(STD, device=x.device).view(1, 3, 1, 1)
    h = (x - mean) / std
    out = [x]
    for s in stages:
        h = s(h)
        out.append(h)
    return out


def dists(a: ImageTensor, b: ImageTensor, metric_id: str = "dists", device=None) -> DistanceResult:
    check_pair(a, b)
    if min(a.shape) < backbones.MIN_SIDE:
        raise ValueError(f"dists needs at least {backbones.MIN_SIDE}x{backbones.MIN_SIDE} input, got {a.shape}")
    device = device or default_device()
    stages, alphas, betas = _model(device)
    with torch.no_grad():
        fa = _feats(stages, to_batch(a, device))
        fb = _feats(stages, to_batch(b, device))
        score = torch.zeros((), dtype=torch.float64, device=device)
        for k in range(len(CHANNELS)):
            x, y = fa[k].double(), fb[k].double()
            xm = x.mean([2, 3])
            ym = y.mean([2, 3])
            s1 = (2 * xm * ym + C1) / (xm**2 + ym**2 + C1)
            xv = ((x - xm[..., None, None]) ** 2).mean([2, 3])
            yv = ((y - ym[..., None, None]) ** 2).mean([2, 3])
            cov = (x * y).mean([2, 3]) - xm * ym
            s2 = (2 * cov + C2) / (xv + yv + C2)
            score = score + (alphas[k] * s1[0]).sum() + (betas[k] * s2[0]).sum()
    return DistanceResult(max(1.0 - float(score), 0.0), metric_id)
