"""Image perturbations (JPEG, center crop + resize, Gaussian blur, Gaussian noise)
and the robustness sweep that re-scores a manifest under each of them.

Both classes are perturbed identically before scoring. Output size always equals
input size; crop f=1, blur sigma=0 and noise sigma=0 return the input unchanged.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data_io import MIN_SIDE, ImageTensor

KINDS = ("jpeg", "crop", "blur", "noise")
BLUR_KERNEL = 9
RESAMPLE = "bicubic"

DEFAULT_STRENGTHS = {
    "jpeg": (90, 80, 70, 60, 50),
    "crop": (0.9, 0.8, 0.7, 0.6, 0.5),
    "blur": (1.0, 2.0, 3.0, 4.0, 5.0),
    "noise": (0.05, 0.1, 0.15, 0.2, 0.25),
}


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}; expected one of {KINDS}")
        s = self.strength
        if not np.isfinite(s):
            raise ValueError("strength must be finite")
        if self.kind == "jpeg" and not (float(s).is_integer() and 50 <= s <= 100):
            raise ValueError(f"jpeg quality must be an integer in 50..100, got {s}")
        if self.kind == "crop" and not 0.0 < s <= 1.0:
            raise ValueError(f"crop factor must lie in (0, 1], got {s}")
        if self.kind in ("blur", "noise") and s < 0:
            raise ValueError(f"{self.kind} sigma must be >= 0, got {s}")

    @property
    def is_identity(self) -> bool:
        return (self.kind == "crop" and self.strength == 1.0) or (self.kind in ("blur", "noise") and self.strength == 0)

    @property
    def label(self) -> str:
        return f"{self.kind}={self.strength:g}"


def default_grid(seed: int = 0) -> list[PerturbationSpec]:
    return [PerturbationSpec(k, s, seed) for k, values in DEFAULT_STRENGTHS.items() for s in values]


def load_grid(path: str | os.PathLike) -> list[PerturbationSpec]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data["grid"]
    grid = [PerturbationSpec(d["kind"], float(d["strength"]), int(d.get("seed", 0))) for d in data]
    if not grid:
        raise ValueError(f"{path}: empty perturbation grid")
    return grid


def jpeg_bytes(pixels_u8: np.ndarray, quality: int) -> bytes:
    """Pinned codec settings: baseline JPEG, 4:2:0 chroma below q95, 4:4:4 otherwise."""
    buf = io.BytesIO()
    Image.fromarray(pixels_u8, mode="RGB").save(
        buf, format="JPEG", quality=int(quality), subsampling=2 if quality < 95 else 0, optimize=False
    )
    return buf.getvalue()


def jpeg(img: ImageTensor, quality: int) -> ImageTensor:
    data = jpeg_bytes(img.to_uint8(), quality)
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return ImageTensor(arr, img.source_path)


def center_crop_resize(img: ImageTensor, factor: float) -> ImageTensor:
    if factor == 1.0:
        return img
    ch, cw = round(factor * img.height), round(factor * img.width)
    if min(ch, cw) < MIN_SIDE:
        raise ValueError(f"crop factor {factor} leaves {ch}x{cw}, below the {MIN_SIDE}px minimum")
    top, left = (img.height - ch) // 2, (img.width - cw) // 2
    x = torch.from_numpy(np.array(img.pixels[top : top + ch, left : left + cw], dtype=np.float64)).permute(2, 0, 1)[None]
    y = F.interpolate(x, size=img.shape, mode=RESAMPLE, align_corners=False)
    out = y[0].permute(1, 2, 0).clamp(0, 1).numpy().astype(np.float32)
    return ImageTensor(out, img.source_path)


def gaussian_kernel(sigma: float, size: int = BLUR_KERNEL) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(img: ImageTensor, sigma: float, size: int = BLUR_KERNEL) -> ImageTensor:
    if sigma == 0:
        return img
    k = gaussian_kernel(sigma, size)
    r = size // 2
    p = np.pad(img.pixels.astype(np.float64), ((r, r), (r, r), (0, 0)), mode="edge")
    h, w = img.shape
    rows = sum(k[i] * p[i : i + h, :, :] for i in range(size))
    out = sum(k[j] * rows[:, j : j + w, :] for j in range(size))
    return ImageTensor(np.clip(out, 0.0, 1.0).astype(np.float32), img.source_path)


def noise_rng(content_hash: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{content_hash}:{seed}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def gaussian_noise(img: ImageTensor, sigma: float, seed: int = 0) -> ImageTensor:
    if sigma == 0:
        return img
    rng = noise_rng(img.content_hash, seed)
    noisy = img.pixels.astype(np.float64) + rng.normal(0.0, sigma, size=img.pixels.shape)
    return ImageTensor(np.clip(noisy, 0.0, 1.0).astype(np.float32), img.source_path)


def perturb(spec: PerturbationSpec, img: ImageTensor) -> ImageTensor:
    if spec.kind == "jpeg":
        return jpeg(img, int(spec.strength))
    if spec.kind == "crop":
        return center_crop_resize(img, spec.strength)
    if spec.kind == "blur":
        return gaussian_blur(img, spec.strength)
    return gaussian_noise(img, spec.strength, spec.seed)


def robustness_sweep(
    manifest,
    backends,
    metric,
    grid: Sequence[PerturbationSpec],
    fpr_level: float = 0.05,
    cache_dir=None,
    workers: int = 1,
    device=None,
) -> dict:
    """Re-score the manifest under every perturbation; AP/TPR per dataset plus min/mean/max."""
    from .detector import labeled_values, score_manifest
    from .evaluation import build_report, to_labeled

    if not grid:
        raise ValueError("perturbation grid is empty")
    rows = []
    for spec in grid:
        result = score_manifest(
            manifest, backends, metric, cache_dir=cache_dir, workers=workers, transform=lambda im, s=spec: perturb(s, im), device=device
        )
        report = build_report(to_labeled(labeled_values(result.scores)), fpr_level=fpr_level)
        stats = report.summary_stats()
        rows.append(
            {
                **asdict(spec),
                "per_dataset": {ds: {"ap": r.ap, "tpr_at_fpr": r.tpr_at_fpr} for ds, r in report.per_dataset.items()},
                "ap": stats["ap"],
                "tpr_at_fpr": stats["tpr_at_fpr"],
                "n_failed": len(result.failures),
            }
        )
    return {
        "rows": rows,
        "metadata": {
            "metric_id": getattr(metric, "metric_id", metric),
            "ae_pool": [b.ae_id for b in backends],
            "fpr_level": fpr_level,
            "crop_resample": RESAMPLE,
            "jpeg_chroma": "4:2:0 below q95, 4:4:4 otherwise",
            "blur_kernel": BLUR_KERNEL,
            "noise": "added in [0,1] float space, then clamped; seeded per image from sha256(content_hash:seed)",
            "applied_to": "real and generated images alike, after the multiple-of-8 center crop",
        },
    }
