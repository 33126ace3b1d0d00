"""Deeper reconstructions: DDIM inversion for t steps, then DDIM denoising back.

The schedule follows the usual latent-diffusion setup: ``total_steps`` timesteps
with leading spacing (``k * (T // total_steps) + offset``). Noise levels are
indexed by step ``k``: level 0 is the clean latent (the scheduler's final alpha),
level ``k >= 1`` is ``alphas_cumprod[timesteps[k - 1]]``. Inversion walks up the
levels, denoising walks back down, each update evaluating the noise prediction
at the timestep of the higher level.
"""

from __future__ import annotations

import logging
from typing import Protocol, Sequence

import numpy as np
import torch

from ..ae_backends import AEBackend, LatentTensor, WeightsUnavailableError, reconstruct
from ..data_io import ImageTensor

logger = logging.getLogger(__name__)

TOTAL_STEPS = 50

# family -> diffusers pipeline holding the matching U-Net, text encoder and scheduler
DENOISER_SOURCES = {
    "sd1": "CompVis/stable-diffusion-v1-1",
    "sd15": "runwayml/stable-diffusion-v1-5",
    "sd2": "stabilityai/stable-diffusion-2-base",
    "sd21": "stabilityai/stable-diffusion-2-1-base",
}


class LatentDenoiser(Protocol):
    alphas_cumprod: torch.Tensor  # (num_train_timesteps,)
    final_alpha_cumprod: float
    steps_offset: int

    def predict_noise(self, latents: torch.Tensor, timestep: int, prompt: str) -> torch.Tensor: ...


def scaled_linear_alphas(num_train_timesteps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012) -> torch.Tensor:
    """The Stable Diffusion training schedule."""
    betas = torch.linspace(beta_start**0.5, beta_end**0.5, num_train_timesteps, dtype=torch.float64) ** 2
    return torch.cumprod(1.0 - betas, dim=0)


def timesteps(num_train_timesteps: int, total_steps: int, offset: int = 0) -> list[int]:
    """Ascending DDIM timesteps with leading spacing."""
    ratio = num_train_timesteps // total_steps
    return [k * ratio + offset for k in range(total_steps)]


def noise_levels(denoiser: LatentDenoiser, total_steps: int) -> tuple[list[float], list[int]]:
    """Cumulative alphas per level (length total_steps + 1) and the timestep of levels 1..total_steps."""
    ac = denoiser.alphas_cumprod.double()
    ts = timesteps(len(ac), total_steps, denoiser.steps_offset)
    return [float(denoiser.final_alpha_cumprod)] + [float(ac[t]) for t in ts], ts


def _step(z: torch.Tensor, eps: torch.Tensor, a_from: float, a_to: float) -> torch.Tensor:
    x0 = (z - (1.0 - a_from) ** 0.5 * eps) / a_from**0.5
    return a_to**0.5 * x0 + (1.0 - a_to) ** 0.5 * eps


def ddim_invert(denoiser: LatentDenoiser, z0: torch.Tensor, t: int, total_steps: int = TOTAL_STEPS, prompt: str = "") -> torch.Tensor:
    alphas, ts = noise_levels(denoiser, total_steps)
    z = z0
    for k in range(t):
        eps = denoiser.predict_noise(z, ts[k], prompt)
        z = _step(z, eps, alphas[k], alphas[k + 1])
    return z


def ddim_denoise(denoiser: LatentDenoiser, zt: torch.Tensor, t: int, total_steps: int = TOTAL_STEPS, prompt: str = "") -> torch.Tensor:
    alphas, ts = noise_levels(denoiser, total_steps)
    z = zt
    for k in range(t, 0, -1):
        eps = denoiser.predict_noise(z, ts[k - 1], prompt)
        z = _step(z, eps, alphas[k], alphas[k - 1])
    return z


def deep_reconstruct(
    backend: AEBackend,
    denoiser: LatentDenoiser | None,
    img: ImageTensor,
    t: int,
    total_steps: int = TOTAL_STEPS,
    prompt: str = "",
) -> ImageTensor:
    """Reconstruct through ``t`` of ``total_steps`` diffusion steps; ``t == 0`` is the plain AE round trip."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    if not 0 <= t <= total_steps:
        raise ValueError(f"t must lie in 0..{total_steps}, got {t}")
    if t == 0:
        return reconstruct(backend, img)
    if denoiser is None:
        raise WeightsUnavailableError(f"{backend.ae_id}: deep reconstruction with t={t} needs a latent denoiser")
    latent = backend.encode(img)
    scale = backend.latent_scale
    z0 = torch.from_numpy(latent.values).double()[None] * scale
    with torch.no_grad():
        zt = ddim_invert(denoiser, z0, t, total_steps, prompt)
        z = ddim_denoise(denoiser, zt, t, total_steps, prompt)
    values = (z[0] / scale).float().cpu().numpy()
    out = backend.decode(LatentTensor(values, backend.ae_id, img.shape))
    return ImageTensor(out.pixels, img.source_path)


class DiffusersDenoiser:
    """U-Net + text encoder of a diffusers Stable Diffusion pipeline.

    ``guidance_scale`` > 1 applies classifier-free guidance against the empty prompt.
    """

    def __init__(self, source: str, device=None, guidance_scale: float = 1.0, unet=None, text_encoder=None, tokenizer=None, scheduler_config=None):
        from ..distances.base import default_device

        self.source = source
        self.device = device or default_device()
        self.guidance_scale = guidance_scale
        try:
            if unet is None:
                import diffusers
                import transformers

                unet = diffusers.UNet2DConditionModel.from_pretrained(source, subfolder="unet", torch_dtype=torch.float32)
                text_encoder = transformers.CLIPTextModel.from_pretrained(source, subfolder="text_encoder")
                tokenizer = transformers.CLIPTokenizer.from_pretrained(source, subfolder="tokenizer")
                scheduler_config = diffusers.DDIMScheduler.load_config(source, subfolder="scheduler")
        except ImportError as exc:
            raise WeightsUnavailableError("deep reconstruction needs the 'models' extra (diffusers, transformers)") from exc
        except Exception as exc:
            raise WeightsUnavailableError(f"denoiser weights unavailable from {source}: {exc}") from exc
        from diffusers import DDIMScheduler

        sched = DDIMScheduler.from_config(scheduler_config or {})
        self.unet = unet.to(self.device).eval()
        self.text_encoder = None if text_encoder is None else text_encoder.to(self.device).eval()
        self.tokenizer = tokenizer
        self.alphas_cumprod = sched.alphas_cumprod.double()
        self.final_alpha_cumprod = 1.0 if sched.config.set_alpha_to_one else float(self.alphas_cumprod[0])
        self.steps_offset = int(sched.config.steps_offset)
        self._embeddings: dict[str, torch.Tensor] = {}

    def _embed(self, prompt: str) -> torch.Tensor:
        if prompt not in self._embeddings:
            tok = self.tokenizer(prompt, padding="max_length", max_length=self.tokenizer.model_max_length, truncation=True, return_tensors="pt")
            with torch.no_grad():
                self._embeddings[prompt] = self.text_encoder(tok.input_ids.to(self.device))[0]
        return self._embeddings[prompt]

    def predict_noise(self, latents: torch.Tensor, timestep: int, prompt: str) -> torch.Tensor:
        dtype = next(self.unet.parameters()).dtype
        x = latents.to(self.device, dtype)
        cond = self._embed(prompt)
        eps = self.unet(x, timestep, encoder_hidden_states=cond).sample
        if self.guidance_scale != 1.0:
            uncond = self.unet(x, timestep, encoder_hidden_states=self._embed("")).sample
            eps = uncond + self.guidance_scale * (eps - uncond)
        return eps.to(latents.dtype)


def load_denoiser(ae_id: str, source: str | None = None, device=None, guidance_scale: float = 1.0) -> DiffusersDenoiser:
    source = source or DENOISER_SOURCES.get(ae_id)
    if source is None:
        raise WeightsUnavailableError(f"no denoiser known for autoencoder {ae_id!r}; known: {', '.join(DENOISER_SOURCES)}")
    return DiffusersDenoiser(source, device=device, guidance_scale=guidance_scale)
