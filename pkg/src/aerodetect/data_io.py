"""Image, manifest and score I/O.

All rasters travel through the package as :class:`ImageTensor`: an ``(H, W, 3)``
float32 array in ``[0, 1]`` plus a digest of the decoded pixels. The digest keys
every cache, so the same picture stored as PNG or lossless WebP is scored once.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

AE_DOWNSAMPLE = 8
MIN_SIDE = 128


class Label(str, Enum):
    REAL = "real"
    GENERATED = "generated"

    @classmethod
    def parse(cls, value: str) -> "Label":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown label {value!r}") from None


class ManifestError(ValueError):
    """A manifest line could not be turned into a record."""


class ScoreFileError(ValueError):
    """A score file is truncated or malformed."""


class ImageTooSmallError(ValueError):
    pass


def pixel_digest(pixels: np.ndarray) -> str:
    arr = np.ascontiguousarray(pixels, dtype=np.float32)
    h = hashlib.sha256()
    h.update(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class ImageTensor:
    pixels: np.ndarray
    source_path: str = ""
    content_hash: str = field(default="")

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) raster, got shape {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError("zero-area image")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must be finite and within [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        if not self.content_hash:
            object.__setattr__(self, "content_hash", pixel_digest(px))

    @classmethod
    def from_array(cls, arr: np.ndarray, source_path: str = "", clamp: bool = False) -> "ImageTensor":
        arr = np.asarray(arr, dtype=np.float32)
        if clamp:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr, source_path=source_path)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def crop(self, top: int, left: int, height: int, width: int) -> "ImageTensor":
        if top < 0 or left < 0 or top + height > self.height or left + width > self.width:
            raise ValueError("crop window outside image")
        return ImageTensor(self.pixels[top : top + height, left : left + width].copy(), self.source_path)

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash(self.content_hash)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: Label
    dataset: str
    generator_id: str | None = None


@dataclass(frozen=True)
class ScoreRecord:
    content_hash: str
    path: str
    ae_id: str
    metric_id: str
    value: float
    dataset: str
    label: Label

    def to_json(self) -> str:
        d = asdict(self)
        d["label"] = self.label.value
        return json.dumps(d, sort_keys=False)


# -- atomic output -------------------------------------------------------------


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- manifests -----------------------------------------------------------------


def load_manifest(path: str | os.PathLike) -> list[ManifestRecord]:
    """Parse a JSONL manifest. Relative image paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.resolve().parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed manifest record at line {lineno}: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"malformed manifest record at line {lineno}: expected an object")
            missing = [k for k in ("path", "label", "dataset") if k not in obj]
            if missing:
                raise ManifestError(f"malformed manifest record at line {lineno}: missing {', '.join(missing)}")
            try:
                label = Label.parse(obj["label"])
            except ValueError:
                raise ManifestError(f"unknown label {obj['label']!r} at line {lineno}") from None
            p = Path(str(obj["path"]))
            if not p.is_absolute():
                p = base / p
            gen = obj.get("generator_id")
            records.append(ManifestRecord(str(p), label, str(obj["dataset"]), None if gen is None else str(gen)))
    return records


def write_manifest(records: Iterable[ManifestRecord], path: str | os.PathLike) -> None:
    lines = []
    for r in records:
        d = {"path": r.path, "label": r.label.value, "dataset": r.dataset}
        if r.generator_id is not None:
            d["generator_id"] = r.generator_id
        lines.append(json.dumps(d))
    atomic_write_text(path, "".join(line + "\n" for line in lines))


# -- images --------------------------------------------------------------------


def decode_image(data: bytes, source_path: str = "") -> ImageTensor:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.width == 0 or im.height == 0:
                raise ValueError(f"zero-area image: {source_path}")
            if im.mode in ("I;16", "I;16B", "I;16L"):
                gray = np.asarray(im, dtype=np.float32) / 65535.0
                arr = np.repeat(gray[:, :, None], 3, axis=2)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode image {source_path or '<bytes>'}: {exc}") from exc
    return ImageTensor(arr, source_path=source_path)


def load_image(path: str | os.PathLike) -> ImageTensor:
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_image(data, source_path=path)


def encode_png(img: ImageTensor) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.to_uint8(), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_image(img: ImageTensor, path: str | os.PathLike) -> None:
    """Write an 8-bit PNG (display/export only; values are rounded)."""
    atomic_write_bytes(path, encode_png(img))


def prepare_for_ae(img: ImageTensor, factor: int = AE_DOWNSAMPLE, min_side: int = MIN_SIDE) -> ImageTensor:
    """Center-crop to the largest multiple of ``factor`` on each side. Never resamples."""
    if min(img.height, img.width) < min_side:
        raise ImageTooSmallError(f"image too small: {img.height}x{img.width} (minimum side {min_side})")
    h = img.height - img.height % factor
    w = img.width - img.width % factor
    if (h, w) == img.shape:
        return img
    top = (img.height - h) // 2
    left = (img.width - w) // 2
    return img.crop(top, left, h, w)


# -- scores --------------------------------------------------------------------


def persist_scores(records: Sequence[ScoreRecord], path: str | os.PathLike) -> None:
    atomic_write_text(path, "".join(r.to_json() + "\n" for r in records))


def _score_from_obj(obj) -> ScoreRecord:
    value = obj["value"]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError("value must be a number")
    return ScoreRecord(
        content_hash=str(obj["content_hash"]),
        path=str(obj.get("path", "")),
        ae_id=str(obj["ae_id"]),
        metric_id=str(obj["metric_id"]),
        value=float(value),
        dataset=str(obj["dataset"]),
        label=Label.parse(obj["label"]),
    )


def load_scores(path: str | os.PathLike) -> list[ScoreRecord]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read score file {path}: {exc}") from exc
    records = []
    offset = 0
    for lineno, line in enumerate(raw.splitlines(keepends=True), start=1):
        start = offset
        offset += len(line)
        if not line.strip():
            continue
        try:
            records.append(_score_from_obj(json.loads(line)))
        except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ScoreFileError(f"{path}: bad score record at line {lineno} (byte offset {start}): {exc}") from exc
    return records


# -- cache layout --------------------------------------------------------------


def recon_cache_path(cache_dir: str | os.PathLike, ae_id: str, content_hash: str) -> Path:
    return Path(cache_dir) / "recon" / ae_id / f"{content_hash}.npy"


def score_cache_path(cache_dir: str | os.PathLike, ae_id: str, metric_id: str, content_hash: str) -> Path:
    return Path(cache_dir) / "scores" / ae_id / metric_id / f"{content_hash}.json"
