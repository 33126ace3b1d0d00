"""Spatial reconstruction-error maps for spotting inpainted regions.

The raw map is the metric's per-location error before spatial averaging. The PNG
is min-max scaled per image, so compare images through the raw maps only.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..ae_backends import AEBackend, reconstruct_cached
from ..data_io import ImageTensor, atomic_write_bytes, atomic_write_text
from ..distances import distance, get_metric


@dataclass
class ErrorHeatmap:
    map: np.ndarray
    ae_id: str
    metric_id: str
    value: float

    @property
    def normalization(self) -> tuple[float, float]:
        return float(self.map.min()), float(self.map.max())

    def to_uint8(self) -> np.ndarray:
        lo, hi = self.normalization
        if hi == lo:
            return np.zeros(self.map.shape, dtype=np.uint8)
        return np.round((self.map - lo) / (hi - lo) * 255.0).astype(np.uint8)

    def save_png(self, path: str | os.PathLike) -> None:
        buf = io.BytesIO()
        Image.fromarray(self.to_uint8(), mode="L").save(buf, format="PNG")
        atomic_write_bytes(path, buf.getvalue())

    def to_dict(self) -> dict:
        return {
            "ae_id": self.ae_id,
            "metric_id": self.metric_id,
            "value": self.value,
            "shape": list(self.map.shape),
            "normalization": list(self.normalization),
            "values": self.map.astype(np.float64).ravel().tolist(),
        }

    def save_raw(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, json.dumps(self.to_dict()))

    @classmethod
    def load_raw(cls, path: str | os.PathLike) -> "ErrorHeatmap":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        arr = np.array(d["values"], dtype=np.float64).reshape(d["shape"])
        return cls(arr, d["ae_id"], d["metric_id"], d["value"])

    def region_mean(self, mask: np.ndarray) -> float:
        return float(self.map[mask].mean())


def localization_heatmap(backend: AEBackend, metric, img: ImageTensor, cache_dir=None, device=None) -> ErrorHeatmap:
    spec = get_metric(metric)
    if not spec.has_map:
        raise ValueError(f"{spec.metric_id} has no spatial error map; use an lpips, mse or ssim metric")
    rec = reconstruct_cached(backend, img, cache_dir)
    res = distance(spec, img, rec, want_map=True, device=device)
    return ErrorHeatmap(np.asarray(res.map, dtype=np.float64), backend.ae_id, spec.metric_id, res.value)
