"""Gaussian perturbations and the Lipschitz-style forgetting losses.

All losses take the clean image ``(H, W, C)`` and a stack of pixel noise
``(N, H, W, C)``; perturbed inputs are ``image + noise`` without clipping so
the noise norm stays the exact denominator.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .encoders import EncoderPair, InputError

IMAGE_PIXELS = "image_pixels"
TEXT_EMBEDDING = "text_embedding"


class DegenerateNoiseError(ArithmeticError):
    """A perturbation with zero norm would divide by zero."""


@dataclass(frozen=True)
class PerturbationConfig:
    sigma: float = 0.1
    n_perturbations: int = 25
    target: str = IMAGE_PIXELS

    def __post_init__(self):
        if not self.sigma > 0:
            raise InputError(f"sigma must be positive, got {self.sigma}")
        if self.n_perturbations < 1:
            raise InputError("n_perturbations must be >= 1")
        if self.target not in (IMAGE_PIXELS, TEXT_EMBEDDING):
            raise InputError(f"unknown perturbation target {self.target!r}")


def gaussian_noise(
    shape, n: int, sigma: float, generator: torch.Generator | None = None, dtype=torch.float32
) -> torch.Tensor:
    """``n`` i.i.d. draws of ``N(0, sigma^2)`` noise of the given shape."""
    if not sigma > 0:
        raise InputError(f"sigma must be positive, got {sigma}")
    return sigma * torch.randn((n, *shape), generator=generator, dtype=dtype)


def sample_perturbations(image: torch.Tensor, cfg: PerturbationConfig, seed: int = 0):
    """List of ``(image + eps, eps)`` pairs."""
    g = torch.Generator().manual_seed(seed)
    noise = gaussian_noise(image.shape, cfg.n_perturbations, cfg.sigma, g, image.dtype)
    return [(image + eps, eps) for eps in noise]


def _noise_norms(noise: torch.Tensor) -> torch.Tensor:
    norms = noise.reshape(noise.shape[0], -1).norm(dim=1)
    if bool((norms == 0).any()):
        raise DegenerateNoiseError("perturbation with zero norm")
    return norms


def _as_noise(perturbations) -> torch.Tensor:
    if isinstance(perturbations, torch.Tensor):
        noise = perturbations
    else:
        noise = torch.stack([eps for _, eps in perturbations])
    if noise.shape[0] < 1:
        raise InputError("need at least one perturbation")
    return noise


def _embed(pair: EncoderPair, image: torch.Tensor, noise: torch.Tensor, normalize: bool):
    batch = torch.cat([image.unsqueeze(0), image.unsqueeze(0) + noise.to(image.dtype)])
    emb = pair.encode_images(batch)
    if normalize:
        emb = F.normalize(emb, dim=-1)
    return emb[0], emb[1:]


def _text(pair: EncoderPair, text_prompt: str, normalize: bool) -> torch.Tensor:
    t = pair.encode_text([text_prompt])[0]
    return F.normalize(t, dim=-1) if normalize else t


def lipschitz_terms(pair, image, text_prompt, perturbations, normalize: bool = False):
    """Per-perturbation image and text ratios, each ``(N,)``."""
    noise = _as_noise(perturbations)
    denom = _noise_norms(noise)
    clean, perturbed = _embed(pair, image, noise, normalize)
    image_term = (clean - perturbed).norm(dim=1) / denom.to(clean.dtype)
    if text_prompt is None:
        return image_term, None
    t = _text(pair, text_prompt, normalize)
    text_term = (t - perturbed).norm(dim=1) / denom.to(clean.dtype)
    return image_term, text_term


def lipschitz_loss_unimodal(pair, image, perturbations, normalize: bool = False) -> torch.Tensor:
    """Mean over perturbations of ``||f(x) - f(x + eps)|| / ||eps||``."""
    image_term, _ = lipschitz_terms(pair, image, None, perturbations, normalize)
    return image_term.mean()


def lipschitz_loss_multimodal(pair, image, text_prompt: str, perturbations, normalize: bool = False) -> torch.Tensor:
    """Image ratio plus the text ratio ``||f_text(t) - f(x + eps)|| / ||eps||``, averaged."""
    image_term, text_term = lipschitz_terms(pair, image, text_prompt, perturbations, normalize)
    return (image_term + text_term).mean()


def embedding_reg_loss(
    pair,
    image,
    text_prompt: str,
    perturbations,
    alpha: float,
    normalize: bool = False,
    difference: bool = False,
) -> torch.Tensor:
    """Unscaled embedding distances plus ``alpha * ||f(x) + f_text(t)||``.

    ``difference=True`` swaps the final sum for ``f(x) - f_text(t)``.
    """
    noise = _as_noise(perturbations)
    clean, perturbed = _embed(pair, image, noise, normalize)
    t = _text(pair, text_prompt, normalize)
    dist = ((clean - perturbed).norm(dim=1) + (t - perturbed).norm(dim=1)).mean()
    tail = clean - t if difference else clean + t
    return dist + alpha * tail.norm()


def perturb_text_embedding_variant(
    pair, image, text_prompt: str, perturbations, text_noise: torch.Tensor, normalize: bool = False
) -> torch.Tensor:
    """Image ratio plus ``||f(x) - (f_text(t) + e)|| / ||e||`` with ``e`` in embedding space.

    ``text_noise`` is ``(N, d)``, paired row-wise with the pixel noise.
    """
    noise = _as_noise(perturbations)
    if text_noise.shape[0] != noise.shape[0]:
        raise InputError("text_noise and pixel perturbations differ in count")
    denom = _noise_norms(noise)
    text_denom = _noise_norms(text_noise)
    clean, perturbed = _embed(pair, image, noise, normalize)
    image_term = (clean - perturbed).norm(dim=1) / denom.to(clean.dtype)
    t = _text(pair, text_prompt, normalize)
    shifted = t.unsqueeze(0) + text_noise.to(t.dtype)
    text_term = (clean.unsqueeze(0) - shifted).norm(dim=1) / text_denom.to(t.dtype)
    return (image_term + text_term).mean()
