"""Distance metrics d(x, x~) behind one dispatch point.

Metric ids: ``mse``, ``ssim``, ``ms-ssim``, ``dists`` and
``lpips-<backbone>-<all|lN>`` (e.g. ``lpips-vgg16-l2``). Every metric is a
distance: 0 for identical inputs, larger for worse reconstructions.
"""

from __future__ import annotations

from ..data_io import ImageTensor
from .base import BACKBONES, N_STAGES, DistanceResult, MetricSpec, default_device
from .lpips import lpips
from .pixel import pixel_metric


class UnknownMetricError(KeyError):
    def __str__(self):
        return self.args[0]


def _build_registry() -> dict[str, MetricSpec]:
    reg = {m: MetricSpec(m, m) for m in ("mse", "ssim", "ms-ssim", "dists")}
    for bb in BACKBONES:
        mid = f"lpips-{bb}-all"
        reg[mid] = MetricSpec(mid, "lpips", bb, "all")
        for i in range(1, N_STAGES[bb] + 1):
            mid = f"lpips-{bb}-l{i}"
            reg[mid] = MetricSpec(mid, "lpips", bb, (i,))
    return reg


REGISTRY = _build_registry()
DEFAULT_METRIC = "lpips-vgg16-l2"


def list_metrics() -> list[str]:
    return list(REGISTRY)


def get_metric(metric: str | MetricSpec) -> MetricSpec:
    if isinstance(metric, MetricSpec):
        return metric
    try:
        return REGISTRY[metric]
    except KeyError:
        raise UnknownMetricError(f"unknown metric {metric!r}; registered: {', '.join(REGISTRY)}") from None


def distance(metric: str | MetricSpec, a: ImageTensor, b: ImageTensor, want_map: bool = False, device=None) -> DistanceResult:
    spec = get_metric(metric)
    if want_map and not spec.has_map:
        raise ValueError(f"{spec.metric_id} does not produce a spatial error map")
    if spec.family == "lpips":
        return lpips(spec, a, b, want_map=want_map, device=device)
    return pixel_metric(spec, a, b, want_map=want_map, device=device)


__all__ = [
    "DEFAULT_METRIC",
    "DistanceResult",
    "MetricSpec",
    "REGISTRY",
    "UnknownMetricError",
    "default_device",
    "distance",
    "get_metric",
    "list_metrics",
    "lpips",
    "pixel_metric",
]
