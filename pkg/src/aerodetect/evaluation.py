"""Threshold-free and fixed-FPR evaluation of reconstruction-error scores.

Generated images are the positive class and rank first when their error is
small. AP is the step-wise (non-interpolated) precision-recall sum with tied
errors entering as one block; it is accumulated in exact rationals and rounded
once, so it does not depend on summation order.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .data_io import Label, write_json

logger = logging.getLogger(__name__)

MIN_CALIBRATION_REALS = 20

CONVENTIONS = {
    "ap": "step-wise (non-interpolated) precision-recall sum; tied errors processed as one block",
    "tpr_at_fpr": "largest observed error threshold whose real-image FPR does not exceed the level",
    "negatives": "real images shared across all generated datasets",
    "resolution": "native resolution, center-cropped to a multiple of 8 (no resizing)",
}


@dataclass(frozen=True)
class LabeledScore:
    value: float
    label: Label
    dataset: str = ""

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite score {self.value}")


def _split(scores: Sequence[LabeledScore]) -> tuple[np.ndarray, np.ndarray]:
    gen = np.array([s.value for s in scores if s.label == Label.GENERATED], dtype=np.float64)
    real = np.array([s.value for s in scores if s.label == Label.REAL], dtype=np.float64)
    if len(gen) == 0 or len(real) == 0:
        raise ValueError("need both generated and real samples")
    return gen, real


def average_precision(scores: Sequence[LabeledScore]) -> float:
    gen, real = _split(scores)
    values = np.concatenate([gen, real])
    is_pos = np.concatenate([np.ones(len(gen), dtype=np.int64), np.zeros(len(real), dtype=np.int64)])
    order = np.argsort(values, kind="stable")
    values, is_pos = values[order], is_pos[order]
    # last index of each block of tied values
    ends = np.flatnonzero(np.append(values[1:] != values[:-1], True))
    tp = np.cumsum(is_pos)[ends]
    seen = ends + 1
    total = Fraction(0)
    prev_tp = 0
    for t, k in zip(tp.tolist(), seen.tolist()):
        if t != prev_tp:
            total += Fraction((t - prev_tp) * t, k)
            prev_tp = t
    return float(total / len(gen))


def _operating_point(scores: Sequence[LabeledScore], fpr_level: float) -> tuple[float, float, float]:
    """(threshold, tpr, realised fpr) at the largest admissible observed threshold."""
    gen, real = _split(scores)
    gen.sort()
    real.sort()
    candidates = np.unique(np.concatenate([gen, real]))
    n_fp = np.searchsorted(real, candidates, side="right")
    ok = n_fp / len(real) <= fpr_level
    if ok.any():
        threshold = float(candidates[np.flatnonzero(ok)[-1]])
    else:
        threshold = float(np.nextafter(real[0], -np.inf))
    tp = int(np.searchsorted(gen, threshold, side="right"))
    fp = int(np.searchsorted(real, threshold, side="right"))
    return threshold, tp / len(gen), fp / len(real)


def tpr_at_fpr(scores: Sequence[LabeledScore], fpr_level: float = 0.05) -> float:
    if not 0.0 < fpr_level < 1.0:
        raise ValueError("fpr_level must lie in (0, 1)")
    return _operating_point(scores, fpr_level)[1]


def calibrate_threshold(scores: Sequence[LabeledScore], target_fpr: float = 0.05) -> float:
    """Threshold for ``detector.decide`` realising at most ``target_fpr`` on the real images."""
    if not 0.0 <= target_fpr < 1.0:
        raise ValueError("target_fpr must lie in [0, 1)")
    n_real = sum(1 for s in scores if s.label == Label.REAL)
    if n_real < MIN_CALIBRATION_REALS:
        raise ValueError(f"calibration needs at least {MIN_CALIBRATION_REALS} real samples, got {n_real}")
    return _operating_point(scores, target_fpr)[0]


@dataclass
class DatasetResult:
    ap: float
    tpr_at_fpr: float
    fpr_level: float
    threshold: float
    n_real: int
    n_generated: int


@dataclass
class EvalReport:
    per_dataset: dict[str, DatasetResult]
    histograms: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_dataset": {k: asdict(v) for k, v in self.per_dataset.items()},
            "histograms": self.histograms,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            per_dataset={k: DatasetResult(**v) for k, v in d["per_dataset"].items()},
            histograms=d.get("histograms", {}),
            metadata=d.get("metadata", {}),
        )

    def save(self, path: str | os.PathLike) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def summary_stats(self) -> dict[str, dict[str, float]]:
        """min / mean / max of AP and TPR across datasets."""
        out = {}
        for key in ("ap", "tpr_at_fpr"):
            vals = [getattr(r, key) for r in self.per_dataset.values()]
            out[key] = {"min": min(vals), "mean": float(np.mean(vals)), "max": max(vals)} if vals else {}
        return out


def histograms(scores: Sequence[LabeledScore], bins: int = 40) -> dict[str, dict]:
    """Per-dataset, per-label counts over bins spanning the global score range."""
    if bins < 1:
        raise ValueError("bins must be positive")
    values = np.array([s.value for s in scores], dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    out = {}
    for ds in sorted({s.dataset for s in scores}):
        entry = {"edges": edges.tolist()}
        total = np.zeros(bins, dtype=np.int64)
        for label in Label:
            v = [s.value for s in scores if s.dataset == ds and s.label == label]
            if v:
                c, _ = np.histogram(v, bins=edges)
                entry[label.value] = c.tolist()
                total += c
        entry["counts"] = total.tolist()
        out[ds] = entry
    return out


def build_report(scores: Sequence[LabeledScore], fpr_level: float = 0.05, bins: int = 40, metadata: dict | None = None) -> EvalReport:
    """AP and TPR@FPR per generated dataset, each against the shared pool of real images."""
    scores = list(scores)
    reals = [s for s in scores if s.label == Label.REAL]
    if not reals:
        raise ValueError("no real samples to evaluate against")
    per_dataset = {}
    for ds in sorted({s.dataset for s in scores}):
        gen = [s for s in scores if s.dataset == ds and s.label == Label.GENERATED]
        if not gen:
            logger.warning("dataset %r has no generated samples; used only as negatives", ds)
            continue
        subset = gen + reals
        threshold, tpr, _ = _operating_point(subset, fpr_level)
        per_dataset[ds] = DatasetResult(
            ap=average_precision(subset),
            tpr_at_fpr=tpr,
            fpr_level=fpr_level,
            threshold=threshold,
            n_real=len(reals),
            n_generated=len(gen),
        )
    if not per_dataset:
        raise ValueError("no dataset has generated samples")
    meta = {"conventions": dict(CONVENTIONS), "bins": bins}
    meta.update(metadata or {})
    return EvalReport(per_dataset, histograms(scores, bins), meta)


def to_labeled(triples: Iterable[tuple[float, Label, str]]) -> list[LabeledScore]:
    return [LabeledScore(float(v), lab, ds) for v, lab, ds in triples]
