"""Patch grids, JPEG-size complexity and the complexity-vs-error scatter."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..ae_backends import reconstruct_cached
from ..data_io import ImageTensor, Label, load_image, prepare_for_ae
from ..distances import distance, get_metric
from ..perturbations import jpeg_bytes

logger = logging.getLogger(__name__)

PATCH_SIZE = 128
STRIDE = 64
COMPLEXITY_QUALITY = 50


@dataclass
class PatchGrid:
    patch_size: int
    stride: int
    patches: list[tuple[int, int, ImageTensor]]

    def __len__(self):
        return len(self.patches)


@dataclass(frozen=True)
class ComplexityPoint:
    complexity: int
    error: float
    label: Label
    dataset: str
    path: str = ""
    row: int = 0
    col: int = 0


def patch_positions(length: int, size: int, stride: int) -> list[int]:
    return list(range(0, length - size + 1, stride))


def patch_count(height: int, width: int, size: int = PATCH_SIZE, stride: int = STRIDE) -> int:
    return ((height - size) // stride + 1) * ((width - size) // stride + 1)


def extract_patches(img: ImageTensor, patch_size: int = PATCH_SIZE, stride: int = STRIDE) -> PatchGrid:
    """Full patches at rows/cols 0, stride, 2*stride, ...; the right/bottom remainder is dropped."""
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be positive")
    if img.height < patch_size or img.width < patch_size:
        raise ValueError(f"image {img.height}x{img.width} is smaller than the {patch_size}px patch")
    patches = [
        (r, c, img.crop(r, c, patch_size, patch_size))
        for r in patch_positions(img.height, patch_size, stride)
        for c in patch_positions(img.width, patch_size, stride)
    ]
    return PatchGrid(patch_size, stride, patches)


def patch_complexity(patch: ImageTensor, quality: int = COMPLEXITY_QUALITY) -> int:
    """Byte length of the patch as a full-colour JPEG at the pinned quality."""
    return len(jpeg_bytes(patch.to_uint8(), quality))


def spearman(x, y) -> float:
    if len(x) < 3:
        return float("nan")
    rho = stats.spearmanr(x, y).statistic
    return float(rho)


def complexity_scatter(manifest, backends, metric, cache_dir=None, patch_size: int = PATCH_SIZE, stride: int = STRIDE, device=None):
    """One point per patch: (JPEG-q50 size, minimum reconstruction error over the pool).

    Each image is reconstructed whole and the error is measured between matching
    patches of the image and its reconstruction. Returns ``(points, summary)``.
    """
    spec = get_metric(metric)
    points: list[ComplexityPoint] = []
    for rec in manifest:
        try:
            img = prepare_for_ae(load_image(rec.path))
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", rec.path, exc)
            continue
        recons = [reconstruct_cached(b, img, cache_dir) for b in backends]
        for r, c, patch in extract_patches(img, patch_size, stride).patches:
            err = min(distance(spec, patch, x.crop(r, c, patch_size, patch_size), device=device).value for x in recons)
            points.append(ComplexityPoint(patch_complexity(patch), err, rec.label, rec.dataset, rec.path, r, c))
    if not points:
        raise ValueError("no patches to analyse")
    return points, summarize(points)


def summarize(points) -> dict:
    if not points:
        raise ValueError("no patches to analyse")
    out = {"n_points": len(points), "spearman": {}, "n": {}}
    for label in Label:
        sel = [p for p in points if p.label == label]
        out["n"][label.value] = len(sel)
        if sel:
            out["spearman"][label.value] = spearman([p.complexity for p in sel], [p.error for p in sel])
    out["convention"] = "Spearman rank correlation, ties mid-ranked; complexity = full-colour JPEG q50 bytes"
    return out
