"""Autoencoder backends: encode to latent space and decode back.

``reconstruct(x) = decode(encode(x))`` is the reconstruction the detector scores.
Two stub backends need no weights and make the whole pipeline testable offline:

* ``stub-identity``: the latent is a lossless space-to-depth rearrangement.
* ``stub-blur``: a fixed 5x5 box blur (edge clamped) followed by the same rearrangement.

Model backends wrap diffusers modules (``kl-vae`` for Stable Diffusion,
``vq-vae`` for Kandinsky's MoVQ). KL encoders use the posterior mode, VQ latents
snap to the nearest codebook entry, so every reconstruction is deterministic.
"""

from __future__ import annotations

import io
import json
import logging
import os
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data_io import ImageTensor, atomic_write_bytes, recon_cache_path
from .distances.base import default_device, to_batch

logger = logging.getLogger(__name__)

KINDS = ("kl-vae", "vq-vae", "stub")
REGISTRY_VERSION = "2024.1"

# weights_source is a local diffusers folder or "<hub repo>:<subfolder>"
BUILTIN_DESCRIPTORS = {
    "sd1": {"kind": "kl-vae", "weights_source": "CompVis/stable-diffusion-v1-1:vae"},
    "sd2": {"kind": "kl-vae", "weights_source": "stabilityai/stable-diffusion-2-base:vae"},
    "kd2.1": {"kind": "vq-vae", "weights_source": "kandinsky-community/kandinsky-2-1:movq"},
    "sd15": {"kind": "kl-vae", "weights_source": "runwayml/stable-diffusion-v1-5:vae"},
    "sd21": {"kind": "kl-vae", "weights_source": "stabilityai/stable-diffusion-2-1-base:vae"},
    "stub-identity": {"kind": "stub", "weights_source": "builtin:identity"},
    "stub-blur": {"kind": "stub", "weights_source": "builtin:box5"},
}

DEFAULT_POOL = ("sd1", "sd2", "kd2.1")


class WeightsUnavailableError(RuntimeError):
    pass


class DuplicateBackendError(ValueError):
    pass


@dataclass(frozen=True)
class BackendDescriptor:
    ae_id: str
    kind: str
    weights_source: str
    downsample_factor: int = 8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}; expected one of {KINDS}")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be a positive integer")

    @classmethod
    def from_dict(cls, d: dict) -> "BackendDescriptor":
        return cls(
            ae_id=str(d["ae_id"]),
            kind=str(d["kind"]),
            weights_source=str(d["weights_source"]),
            downsample_factor=int(d.get("downsample_factor", 8)),
        )


@dataclass(frozen=True)
class LatentTensor:
    values: np.ndarray  # (channels, h / factor, w / factor)
    ae_id: str
    image_shape: tuple[int, int]


def space_to_depth(pixels: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = pixels.shape
    x = pixels.reshape(h // factor, factor, w // factor, factor, c)
    return np.ascontiguousarray(x.transpose(4, 1, 3, 0, 2).reshape(c * factor * factor, h // factor, w // factor))


def depth_to_space(latent: np.ndarray, factor: int) -> np.ndarray:
    ch, hl, wl = latent.shape
    c = ch // (factor * factor)
    x = latent.reshape(c, factor, factor, hl, wl).transpose(3, 1, 4, 2, 0)
    return np.ascontiguousarray(x.reshape(hl * factor, wl * factor, c))


def box_blur(pixels: np.ndarray, size: int = 5) -> np.ndarray:
    """Mean filter with edge clamping, accumulated in float64."""
    r = size // 2
    padded = np.pad(pixels.astype(np.float64), ((r, r), (r, r), (0, 0)), mode="edge")
    h, w = pixels.shape[:2]
    acc = np.zeros((h, w, pixels.shape[2]), dtype=np.float64)
    for dy in range(size):
        for dx in range(size):
            acc += padded[dy : dy + h, dx : dx + w]
    return acc / (size * size)


class AEBackend:
    """Base class; subclasses implement ``_encode`` and ``_decode``."""

    latent_scale = 1.0

    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        self.calls = 0  # number of reconstructions actually computed
        self._busy = threading.Lock()

    ae_id = property(lambda self: self.descriptor.ae_id)
    kind = property(lambda self: self.descriptor.kind)
    weights_source = property(lambda self: self.descriptor.weights_source)
    downsample_factor = property(lambda self: self.descriptor.downsample_factor)

    def __repr__(self):
        return f"{type(self).__name__}({self.ae_id!r})"

    def _check(self, img: ImageTensor) -> None:
        f = self.downsample_factor
        if img.height % f or img.width % f:
            raise ValueError(f"{self.ae_id}: image {img.height}x{img.width} is not a multiple of {f}; run prepare_for_ae first")

    def encode(self, img: ImageTensor) -> LatentTensor:
        self._check(img)
        return LatentTensor(self._encode(img), self.ae_id, img.shape)

    def decode(self, latent: LatentTensor) -> ImageTensor:
        pixels = self._decode(latent.values)
        return ImageTensor(np.clip(pixels, 0.0, 1.0).astype(np.float32))

    def reconstruct(self, img: ImageTensor) -> ImageTensor:
        self._check(img)
        with self._busy:
            self.calls += 1
            out = self.decode(self.encode(img))
        if out.shape != img.shape:
            raise RuntimeError(f"{self.ae_id} changed the image size {img.shape} -> {out.shape}")
        return ImageTensor(out.pixels, img.source_path)

    def _encode(self, img: ImageTensor) -> np.ndarray:
        raise NotImplementedError

    def _decode(self, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityStub(AEBackend):
    def _encode(self, img):
        return space_to_depth(img.pixels, self.downsample_factor)

    def _decode(self, values):
        return depth_to_space(values, self.downsample_factor)


class BlurStub(AEBackend):
    def _encode(self, img):
        return space_to_depth(box_blur(img.pixels).astype(np.float32), self.downsample_factor)

    def _decode(self, values):
        return depth_to_space(values, self.downsample_factor)


def _split_source(source: str) -> tuple[str, str | None]:
    if os.path.isdir(source):
        return source, None
    repo, _, sub = source.partition(":")
    return repo, sub or None


class _DiffusersBackend(AEBackend):
    module_cls_name = ""

    def __init__(self, descriptor: BackendDescriptor, module=None, device=None):
        super().__init__(descriptor)
        self.device = device or default_device()
        self._module = module
        self._load_lock = threading.Lock()
        if module is not None:
            self._module = module.to(self.device).eval()

    @property
    def module(self):
        with self._load_lock:
            if self._module is None:
                self._module = self._load()
            return self._module

    def _load(self):
        try:
            import diffusers
        except ImportError as exc:
            raise WeightsUnavailableError(
                f"{self.ae_id}: loading {self.weights_source} needs the 'models' extra (diffusers)"
            ) from exc
        cls = getattr(diffusers, self.module_cls_name)
        repo, sub = _split_source(self.weights_source)
        try:
            module = cls.from_pretrained(repo, subfolder=sub, torch_dtype=torch.float32)
        except Exception as exc:  # hub/network/file errors all mean the same thing here
            raise WeightsUnavailableError(f"{self.ae_id}: weights unavailable from {self.weights_source}: {exc}") from exc
        return module.to(self.device).eval()

    @property
    def latent_scale(self):
        return float(getattr(self.module.config, "scaling_factor", 1.0))

    def _to_model(self, img: ImageTensor) -> torch.Tensor:
        return to_batch(img, self.device) * 2.0 - 1.0

    @staticmethod
    def _from_model(x: torch.Tensor) -> np.ndarray:
        return ((x[0].float().clamp(-1, 1) + 1.0) / 2.0).permute(1, 2, 0).cpu().numpy()


class KLVAEBackend(_DiffusersBackend):
    module_cls_name = "AutoencoderKL"

    def _encode(self, img):
        with torch.no_grad():
            z = self.module.encode(self._to_model(img)).latent_dist.mode()
        return z[0].float().cpu().numpy()

    def _decode(self, values):
        with torch.no_grad():
            z = torch.from_numpy(values)[None].to(self.device)
            return self._from_model(self.module.decode(z).sample)


def nearest_codebook(z: torch.Tensor, codebook: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    """Index of the nearest codebook row for each row of ``z`` (squared L2, float64).

    ``argmin`` returns the first minimum, so ties go to the lowest index.
    """
    cb = codebook.double()
    out = []
    for start in range(0, z.shape[0], chunk):
        zc = z[start : start + chunk].double()
        d = ((zc[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
        out.append(torch.argmin(d, dim=1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


class VQVAEBackend(_DiffusersBackend):
    module_cls_name = "VQModel"

    def _encode(self, img):
        with torch.no_grad():
            h = self.module.encode(self._to_model(img)).latents[0]
            c, hh, ww = h.shape
            flat = h.permute(1, 2, 0).reshape(-1, c)
            codebook = self.module.quantize.embedding.weight
            idx = nearest_codebook(flat, codebook)
            q = codebook[idx].reshape(hh, ww, c).permute(2, 0, 1)
        return q.float().cpu().numpy()

    def _decode(self, values):
        with torch.no_grad():
            q = torch.from_numpy(values)[None].to(self.device)
            return self._from_model(self.module.decode(q, force_not_quantize=True).sample)


def make_backend(descriptor: BackendDescriptor, module=None, device=None) -> AEBackend:
    if descriptor.kind == "stub":
        if descriptor.weights_source == "builtin:identity":
            return IdentityStub(descriptor)
        if descriptor.weights_source == "builtin:box5":
            return BlurStub(descriptor)
        raise ValueError(f"unknown stub {descriptor.weights_source!r}")
    if descriptor.kind == "kl-vae":
        return KLVAEBackend(descriptor, module=module, device=device)
    return VQVAEBackend(descriptor, module=module, device=device)


class BackendRegistry:
    """ae_id -> backend. Populate at startup, read-only afterwards."""

    def __init__(self):
        self._backends: dict[str, AEBackend] = {}

    def register_backend(self, descriptor: BackendDescriptor | dict, module=None, device=None) -> AEBackend:
        if isinstance(descriptor, dict):
            descriptor = BackendDescriptor.from_dict(descriptor)
        if descriptor.ae_id in self._backends:
            raise DuplicateBackendError(f"backend {descriptor.ae_id!r} is already registered")
        backend = make_backend(descriptor, module=module, device=device)
        self._backends[descriptor.ae_id] = backend
        return backend

    def __getitem__(self, ae_id: str) -> AEBackend:
        try:
            return self._backends[ae_id]
        except KeyError:
            raise KeyError(f"no backend {ae_id!r}; registered: {', '.join(self._backends) or '(none)'}") from None

    def __contains__(self, ae_id):
        return ae_id in self._backends

    def __len__(self):
        return len(self._backends)

    def ids(self) -> list[str]:
        return list(self._backends)


def builtin_descriptor(ae_id: str) -> BackendDescriptor:
    if ae_id not in BUILTIN_DESCRIPTORS:
        raise KeyError(f"unknown autoencoder {ae_id!r}; built-in: {', '.join(BUILTIN_DESCRIPTORS)}")
    return BackendDescriptor(ae_id=ae_id, **BUILTIN_DESCRIPTORS[ae_id])


def load_descriptors(path: str | os.PathLike) -> list[BackendDescriptor]:
    """A descriptor file holds one JSON object or a list of them."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [BackendDescriptor.from_dict(d) for d in data]


def build_pool(ae_ids, extra_descriptors=(), device=None) -> list[AEBackend]:
    known = {d.ae_id: d for d in extra_descriptors}
    reg = BackendRegistry()
    for ae_id in ae_ids:
        reg.register_backend(known.get(ae_id) or builtin_descriptor(ae_id), device=device)
    return [reg[a] for a in reg.ids()]


def reconstruct(backend: AEBackend, img: ImageTensor) -> ImageTensor:
    return backend.reconstruct(img)


def _load_cached(path: Path, shape: tuple[int, int]) -> np.ndarray | None:
    try:
        arr = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        warnings.warn(f"corrupt reconstruction cache {path}: {exc}; recomputing")
        return None
    if arr.dtype != np.float32 or arr.shape != (*shape, 3) or not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        warnings.warn(f"corrupt reconstruction cache {path}; recomputing")
        return None
    return arr


def reconstruct_cached(backend: AEBackend, img: ImageTensor, cache_dir: str | os.PathLike | None) -> ImageTensor:
    """``reconstruct`` with a per-(content_hash, ae_id) float32 cache; hits are bit-exact."""
    if cache_dir is None:
        return backend.reconstruct(img)
    path = recon_cache_path(cache_dir, backend.ae_id, img.content_hash)
    if path.exists():
        arr = _load_cached(path, img.shape)
        if arr is not None:
            return ImageTensor(arr, img.source_path)
    out = backend.reconstruct(img)
    buf = io.BytesIO()
    np.save(buf, out.pixels, allow_pickle=False)
    atomic_write_bytes(path, buf.getvalue())
    return out
