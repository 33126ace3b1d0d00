"""Feature backbones for LPIPS and DISTS.

ImageNet weights are read from disk only (``$AERODETECT_BACKBONE_DIR`` or the torch
hub checkpoint folder); nothing is downloaded. Without them a deterministic,
seeded He-normal initialisation is used and the provenance says so. Every metric
invariant holds either way, but detection quality needs the real weights.
"""

from __future__ import annotations

import logging
import os
import threading
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torchvision import models

logger = logging.getLogger(__name__)

CHECKPOINTS = {
    "vgg16": "vgg16-397923af.pth",
    "alexnet": "alexnet-owt-7be5be79.pth",
    "squeezenet": "squeezenet1_1-b8a52dc0.pth",
}

# (start, stop) ranges into ``model.features`` producing each LPIPS stage
SLICES = {
    "vgg16": [(0, 4), (4, 9), (9, 16), (16, 23), (23, 30)],
    "alexnet": [(0, 2), (2, 5), (5, 8), (8, 10), (10, 12)],
    "squeezenet": [(0, 2), (2, 5), (5, 8), (8, 10), (10, 11), (11, 12), (12, 13)],
}

CHANNELS = {
    "vgg16": [64, 128, 256, 512, 512],
    "alexnet": [64, 192, 384, 256, 256],
    "squeezenet": [64, 128, 256, 384, 384, 512, 512],
}

MIN_SIDE = 32
SEED = 20231218

_lock = threading.Lock()
_cache: dict[tuple[str, str], tuple[nn.Sequential, str]] = {}


class WeightsUnavailableError(RuntimeError):
    pass


def _architecture(name: str) -> nn.Module:
    if name == "vgg16":
        return models.vgg16(weights=None)
    if name == "alexnet":
        return models.alexnet(weights=None)
    if name == "squeezenet":
        return models.squeezenet1_1(weights=None)
    raise KeyError(f"unknown backbone {name!r}")


def checkpoint_path(name: str) -> Path | None:
    fname = CHECKPOINTS[name]
    candidates = []
    if os.environ.get("AERODETECT_BACKBONE_DIR"):
        candidates.append(Path(os.environ["AERODETECT_BACKBONE_DIR"]) / fname)
    candidates.append(Path(torch.hub.get_dir()) / "checkpoints" / fname)
    for c in candidates:
        if c.is_file():
            return c
    return None


def seeded_init(features: nn.Sequential, seed: int = SEED) -> None:
    """He-normal conv weights from a numpy stream, zero biases. Stable across torch versions."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for m in features.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
                w = rng.standard_normal(tuple(m.weight.shape)) * np.sqrt(2.0 / fan_in)
                m.weight.copy_(torch.from_numpy(w.astype(np.float32)))
                if m.bias is not None:
                    m.bias.zero_()


def load_features(name: str, device: str | torch.device = "cpu") -> tuple[nn.Sequential, str]:
    """Return ``(model.features, provenance)`` with provenance ``imagenet`` or ``seeded-random``."""
    key = (name, str(device))
    with _lock:
        if key in _cache:
            return _cache[key]
        model = _architecture(name)
        ckpt = checkpoint_path(name)
        if ckpt is not None:
            model.load_state_dict(torch.load(ckpt, map_location="cpu"))
            provenance = "imagenet"
        else:
            if os.environ.get("AERODETECT_REQUIRE_PRETRAINED") == "1":
                raise WeightsUnavailableError(
                    f"ImageNet weights for {name} not found; place {CHECKPOINTS[name]} in "
                    f"$AERODETECT_BACKBONE_DIR or {Path(torch.hub.get_dir()) / 'checkpoints'}"
                )
            logger.warning(
                "backbone=%s weights=seeded-random (no ImageNet checkpoint on disk); "
                "perceptual scores are not comparable to published values",
                name,
            )
            seeded_init(model.features)
            provenance = "seeded-random"
        features = model.features.eval().to(device)
        for p in features.parameters():
            p.requires_grad_(False)
        _cache[key] = (features, provenance)
        return features, provenance


def provenance(name: str) -> str:
    return "imagenet" if checkpoint_path(name) is not None else "seeded-random"
