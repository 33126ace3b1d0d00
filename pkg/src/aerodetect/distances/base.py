from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ..data_io import ImageTensor

FAMILIES = ("lpips", "dists", "mse", "ssim", "ms-ssim")
BACKBONES = ("vgg16", "alexnet", "squeezenet")
N_STAGES = {"vgg16": 5, "alexnet": 5, "squeezenet": 7}


@dataclass(frozen=True)
class MetricSpec:
    metric_id: str
    family: str
    backbone: Optional[str] = None
    layers: tuple[int, ...] | str = "all"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown metric family {self.family!r}")
        if self.family == "lpips":
            if self.backbone not in BACKBONES:
                raise ValueError("lpips metrics need a backbone (vgg16, alexnet or squeezenet)")
            if self.layers != "all":
                n = N_STAGES[self.backbone]
                if not self.layers or any(not 1 <= i <= n for i in self.layers):
                    raise ValueError(f"{self.backbone} has stages 1..{n}, got {self.layers}")
        elif self.backbone is not None:
            raise ValueError(f"{self.family} is computed in pixel space and takes no backbone")

    @property
    def stages(self) -> tuple[int, ...]:
        if self.family != "lpips":
            return ()
        if self.layers == "all":
            return tuple(range(1, N_STAGES[self.backbone] + 1))
        return tuple(self.layers)

    @property
    def has_map(self) -> bool:
        return self.family in ("lpips", "mse", "ssim")


@dataclass
class DistanceResult:
    value: float
    metric_id: str
    map: Optional[np.ndarray] = None
    ae_id: Optional[str] = None


def default_device() -> str:
    dev = os.environ.get("AERODETECT_DEVICE", "cpu")
    if dev == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    return dev


def to_batch(img: ImageTensor, device=None, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) raster -> (1, 3, H, W) tensor."""
    t = torch.from_numpy(np.array(img.pixels, dtype=np.float32, copy=True)).permute(2, 0, 1)[None]
    return t.to(device=device or default_device(), dtype=dtype)


def check_pair(a: ImageTensor, b: ImageTensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
