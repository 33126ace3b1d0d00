"""Reconstruction-error detection and attribution.

The per-autoencoder error of an image is the distance between the image and its
reconstruction; the detection statistic is the minimum of those errors over a pool
of autoencoders, and the autoencoder attaining it is the attributed generator.
Smaller means more likely generated.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .ae_backends import AEBackend, WeightsUnavailableError, reconstruct_cached
from .data_io import (
    ImageTensor,
    Label,
    ManifestRecord,
    ScoreRecord,
    atomic_write_text,
    load_image,
    prepare_for_ae,
    score_cache_path,
)
from .distances import MetricSpec, distance, get_metric
from .distances.backbones import WeightsUnavailableError as BackboneWeightsUnavailable

logger = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.10


class ScoringError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectionScore:
    content_hash: str
    per_ae: dict[str, float]
    min_value: float
    argmin_ae: str
    metric_id: str
    path: str = ""
    dataset: str = ""
    label: Label | None = None

    @classmethod
    def from_errors(cls, content_hash: str, per_ae: dict[str, float], metric_id: str, **meta) -> "DetectionScore":
        if not per_ae:
            raise ValueError("per_ae must not be empty")
        # lexicographic ae_id breaks exact ties
        argmin = min(sorted(per_ae), key=lambda k: per_ae[k])
        return cls(content_hash, dict(per_ae), per_ae[argmin], argmin, metric_id, **meta)


@dataclass(frozen=True)
class Decision:
    is_generated: bool
    threshold: float
    score: DetectionScore


@dataclass
class ScoringResult:
    records: list[ScoreRecord] = field(default_factory=list)
    scores: list[DetectionScore] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)  # (path, reason)
    n_records: int = 0

    def summary(self) -> str:
        s = f"scored {len(self.scores)} images ({len(self.records)} score records)"
        if self.failures:
            s += f"; skipped {len(self.failures)} of {self.n_records}: " + "; ".join(f"{p} ({r})" for p, r in self.failures[:5])
            if len(self.failures) > 5:
                s += "; ..."
        return s


def delta_ae(backend: AEBackend, metric: str | MetricSpec, img: ImageTensor, cache_dir=None, device=None) -> float:
    """Reconstruction error of ``img`` under one autoencoder."""
    spec = get_metric(metric)
    rec = reconstruct_cached(backend, img, cache_dir)
    return distance(spec, img, rec, device=device).value


def _cached_delta(backend, spec, img, cache_dir, device) -> float:
    if cache_dir is None:
        return delta_ae(backend, spec, img, None, device)
    path = score_cache_path(cache_dir, backend.ae_id, spec.metric_id, img.content_hash)
    if path.exists():
        try:
            value = json.loads(path.read_text())["value"]
            if isinstance(value, float) and math.isfinite(value) and value >= 0:
                return value
        except (OSError, ValueError, KeyError, TypeError):
            pass
        logger.warning("corrupt score cache %s; recomputing", path)
    value = delta_ae(backend, spec, img, cache_dir, device)
    atomic_write_text(path, json.dumps({"value": value}))
    return value


def delta_min(backends: Sequence[AEBackend], metric: str | MetricSpec, img: ImageTensor, cache_dir=None, device=None, **meta) -> DetectionScore:
    if not backends:
        raise ValueError("delta_min needs at least one autoencoder")
    spec = get_metric(metric)
    per_ae = {b.ae_id: _cached_delta(b, spec, img, cache_dir, device) for b in backends}
    return DetectionScore.from_errors(img.content_hash, per_ae, spec.metric_id, **meta)


def decide(score: DetectionScore, threshold: float) -> Decision:
    """Generated iff the minimum error is at or below the threshold."""
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return Decision(score.min_value <= threshold, threshold, score)


def attribute(scores: Iterable[DetectionScore], dataset_tag: str | None = None) -> dict[str, float]:
    """Fraction of images for which each autoencoder has the smallest error."""
    scores = [s for s in scores if dataset_tag is None or s.dataset == dataset_tag]
    if not scores:
        raise ValueError("attribute needs at least one score" + (f" for dataset {dataset_tag!r}" if dataset_tag else ""))
    metrics = {s.metric_id for s in scores}
    if len(metrics) > 1:
        raise ValueError(f"scores mix metrics: {sorted(metrics)}")
    counts = Counter(s.argmin_ae for s in scores)
    pool = sorted(set().union(*(s.per_ae for s in scores)))
    return {ae: counts.get(ae, 0) / len(scores) for ae in pool}


def attribute_by_dataset(scores: Sequence[DetectionScore]) -> dict[str, dict[str, float]]:
    return {ds: attribute(scores, ds) for ds in sorted({s.dataset for s in scores})}


def scores_from_records(records: Iterable[ScoreRecord], ae_ids: Sequence[str] | None = None) -> list[DetectionScore]:
    """Regroup per-autoencoder score records into one DetectionScore per image."""
    grouped: dict[tuple[str, str], dict] = {}
    for r in records:
        if ae_ids is not None and r.ae_id not in ae_ids:
            continue
        g = grouped.setdefault((r.content_hash, r.metric_id), {"per_ae": {}, "meta": r})
        g["per_ae"][r.ae_id] = r.value
    out = []
    for (h, metric_id), g in grouped.items():
        m = g["meta"]
        out.append(DetectionScore.from_errors(h, g["per_ae"], metric_id, path=m.path, dataset=m.dataset, label=m.label))
    return out


Transform = Callable[[ImageTensor], ImageTensor]


def score_manifest(
    manifest: Sequence[ManifestRecord],
    backends: Sequence[AEBackend],
    metric: str | MetricSpec,
    cache_dir: str | os.PathLike | None = None,
    workers: int = 1,
    transform: Transform | None = None,
    max_failure_rate: float = MAX_FAILURE_RATE,
    device=None,
) -> ScoringResult:
    """Score every unique image of a manifest against every backend.

    Unreadable or too-small images are skipped with a warning; if more than
    ``max_failure_rate`` of the manifest fails the whole run fails. ``transform``
    (e.g. a perturbation) is applied after cropping and before scoring.
    """
    if not manifest:
        raise ValueError("manifest is empty")
    if not backends:
        raise ValueError("need at least one autoencoder")
    spec = get_metric(metric)
    result = ScoringResult(n_records=len(manifest))

    def work(rec: ManifestRecord):
        try:
            img = prepare_for_ae(load_image(rec.path))
            if transform is not None:
                img = transform(img)
        except (OSError, ValueError) as exc:
            return rec, None, str(exc)
        return rec, img, None

    seen = set()
    done = 0

    def handle(rec, img, err):
        nonlocal done
        done += 1
        if err is not None:
            logger.warning("skipping %s: %s", rec.path, err)
            result.failures.append((rec.path, err))
            return
        if img.content_hash in seen:
            logger.debug("duplicate image %s", rec.path)
            return
        seen.add(img.content_hash)
        try:
            score = delta_min(backends, spec, img, cache_dir, device, path=rec.path, dataset=rec.dataset, label=rec.label)
        except (WeightsUnavailableError, BackboneWeightsUnavailable):
            raise
        except (OSError, ValueError, RuntimeError) as exc:
            logger.warning("skipping %s: %s", rec.path, exc)
            result.failures.append((rec.path, str(exc)))
            return
        result.scores.append(score)
        for ae_id in score.per_ae:
            result.records.append(
                ScoreRecord(img.content_hash, rec.path, ae_id, spec.metric_id, score.per_ae[ae_id], rec.dataset, rec.label)
            )
        if done % 50 == 0:
            logger.info("progress %d/%d", done, len(manifest))

    if workers <= 1:
        for rec in manifest:
            handle(*work(rec))
    else:
        # decoding runs in the pool; scoring stays in order so outputs are reproducible
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for item in pool.map(work, manifest):
                handle(*item)

    rate = len(result.failures) / len(manifest)
    if result.failures:
        logger.warning(result.summary())
    if rate > max_failure_rate:
        raise ScoringError(f"{len(result.failures)} of {len(manifest)} images failed ({rate:.0%} > {max_failure_rate:.0%})")
    return result


def labeled_values(scores: Iterable[DetectionScore], ae_id: str | None = None):
    """(value, label, dataset) triples: the pool minimum, or one autoencoder's error."""
    out = []
    for s in scores:
        v = s.min_value if ae_id is None else s.per_ae[ae_id]
        out.append((v, s.label, s.dataset))
    return out


def group_by_dataset(scores: Iterable[DetectionScore]) -> dict[str, list[DetectionScore]]:
    d = defaultdict(list)
    for s in scores:
        d[s.dataset].append(s)
    return dict(d)
