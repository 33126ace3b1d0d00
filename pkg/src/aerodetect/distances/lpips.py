"""LPIPS with per-stage selection and spatial error maps.

Both inputs go through the backbone; each stage's activations are unit-normalised
along channels, squared-differenced, weighted per channel by the published linear
calibration, and summed over channels. A stage's term is the spatial mean of that
map; the full metric is the sum of the stage terms.
"""

from __future__ import annotations

import threading
from importlib import resources

import numpy as np
import torch
import torch.nn.functional as F

from ..data_io import ImageTensor
from . import backbones
from .base import DistanceResult, MetricSpec, check_pair, default_device, to_batch

# input normalisation of the reference implementation, applied after mapping to [-1, 1]
SHIFT = (-0.030, -0.088, -0.188)
SCALE = (0.458, 0.448, 0.450)
EPS = 1e-10

_lin_lock = threading.Lock()
_lin_cache: dict[tuple[str, str], list[torch.Tensor]] = {}


def linear_weights(backbone: str, device) -> list[torch.Tensor]:
    key = (backbone, str(device))
    with _lin_lock:
        if key not in _lin_cache:
            ref = resources.files("aerodetect") / "weights" / f"lpips_v0.1_{backbone}.npz"
            with resources.as_file(ref) as p, np.load(p) as npz:
                ws = [npz[f"lin{i}"] for i in range(len(npz.files))]
            _lin_cache[key] = [torch.from_numpy(w).to(device).view(1, -1, 1, 1) for w in ws]
        return _lin_cache[key]


def normalize_channels(feat: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt(torch.sum(feat**2, dim=1, keepdim=True))
    return feat / (norm + EPS)


def stage_features(backbone: str, x: torch.Tensor, upto: int, device) -> list[torch.Tensor]:
    features, _ = backbones.load_features(backbone, device)
    shift = torch.tensor(SHIFT, device=device).view(1, 3, 1, 1)
    scale = torch.tensor(SCALE, device=device).view(1, 3, 1, 1)
    h = (x * 2.0 - 1.0 - shift) / scale
    outs = []
    for start, stop in backbones.SLICES[backbone][:upto]:
        h = features[start:stop](h)
        if h.shape[-1] == 0 or h.shape[-2] == 0:
            raise ValueError(f"input too small for {backbone} stage {len(outs) + 1}")
        outs.append(h)
    return outs


def stage_maps(spec: MetricSpec, a: torch.Tensor, b: torch.Tensor, device) -> dict[int, torch.Tensor]:
    """Per-stage (1, 1, h_i, w_i) weighted squared-difference maps for the selected stages."""
    upto = max(spec.stages)
    lins = linear_weights(spec.backbone, device)
    fa = stage_features(spec.backbone, a, upto, device)
    fb = stage_features(spec.backbone, b, upto, device)
    maps = {}
    for i in spec.stages:
        diff = (normalize_channels(fa[i - 1]) - normalize_channels(fb[i - 1])) ** 2
        maps[i] = torch.sum(diff * lins[i - 1], dim=1, keepdim=True)
    return maps


def lpips(spec: MetricSpec, a: ImageTensor, b: ImageTensor, want_map: bool = False, device=None) -> DistanceResult:
    if spec.family != "lpips":
        raise ValueError(f"{spec.metric_id} is not an LPIPS metric")
    check_pair(a, b)
    if min(a.shape) < backbones.MIN_SIDE:
        raise ValueError(f"{spec.backbone} needs at least {backbones.MIN_SIDE}x{backbones.MIN_SIDE} input, got {a.shape}")
    device = device or default_device()
    with torch.no_grad():
        maps = stage_maps(spec, to_batch(a, device), to_batch(b, device), device)
        terms = {i: float(m.double().mean()) for i, m in maps.items()}
        value = float(sum(terms[i] for i in spec.stages))
        full = None
        if want_map:
            full = torch.zeros((a.height, a.width), dtype=torch.float64, device=device)
            for i in spec.stages:
                up = F.interpolate(maps[i], size=a.shape, mode="bilinear", align_corners=False)[0, 0].double()
                # bilinear upsampling preserves the mean only for integer factors; restore it
                m = float(up.mean())
                if m > 0:
                    up = up * (terms[i] / m)
                full += up
            full = full.cpu().numpy()
    return DistanceResult(value=max(value, 0.0), metric_id=spec.metric_id, map=full)
