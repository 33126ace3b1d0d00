from .ddim import DiffusersDenoiser, LatentDenoiser, deep_reconstruct, load_denoiser
from .localization import ErrorHeatmap, localization_heatmap
from .patches import (
    ComplexityPoint,
    PatchGrid,
    complexity_scatter,
    extract_patches,
    patch_complexity,
    patch_count,
    summarize,
)

__all__ = [
    "ComplexityPoint",
    "DiffusersDenoiser",
    "ErrorHeatmap",
    "LatentDenoiser",
    "PatchGrid",
    "complexity_scatter",
    "deep_reconstruct",
    "extract_patches",
    "load_denoiser",
    "localization_heatmap",
    "patch_complexity",
    "patch_count",
    "summarize",
]
