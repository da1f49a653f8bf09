"""Scalar diffusion math: preconditioning, noising, sigma grids and loss weights.

Every function accepts python floats, numpy arrays or torch tensors for the
noise level, as long as the arithmetic broadcasts against the latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


def _check_nonneg(sigma, name="sigma"):
    s = sigma.detach().cpu().numpy() if torch.is_tensor(sigma) else np.asarray(sigma)
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError(f"{name} must be finite and >= 0, got {sigma!r}")


def _check_pos(sigma, name="sigma"):
    s = sigma.detach().cpu().numpy() if torch.is_tensor(sigma) else np.asarray(sigma)
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ValueError(f"{name} must be finite and > 0, got {sigma!r}")


def _sqrt(x):
    if torch.is_tensor(x):
        return torch.sqrt(x)
    return np.sqrt(x) if isinstance(x, np.ndarray) else math.sqrt(x)


@dataclass(frozen=True)
class Preconditioner:
    """EDM preconditioning for a data standard deviation ``sigma_data``.

    ``c_skip(0) = 1`` and ``c_out(0) = 0`` so the denoiser is the identity at
    zero noise. ``c_in`` uses the squared ``sigma_data`` everywhere.
    """

    sigma_data: float = 0.5

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")

    def c_skip(self, sigma):
        sd2 = self.sigma_data**2
        return sd2 / (sigma**2 + sd2)

    def c_out(self, sigma):
        return sigma * self.sigma_data / _sqrt(sigma**2 + self.sigma_data**2)

    def c_in(self, sigma):
        return 1.0 / _sqrt(sigma**2 + self.sigma_data**2)

    def c_noise(self, sigma):
        # log(0) is undefined; clamp so sigma=0 still yields a finite embedding
        if torch.is_tensor(sigma):
            return 0.25 * torch.log(sigma.clamp(min=1e-20))
        if isinstance(sigma, np.ndarray):
            return 0.25 * np.log(np.maximum(sigma, 1e-20))
        return 0.25 * math.log(max(sigma, 1e-20))

    def weight(self, sigma):
        return (sigma**2 + self.sigma_data**2) / (sigma * self.sigma_data) ** 2


def precondition(sigma, pre: Preconditioner = Preconditioner()):
    """Return ``(c_skip, c_out, c_in, c_noise, lambda)`` at noise level ``sigma``.

    ``lambda`` is infinite at ``sigma == 0``.
    """
    _check_nonneg(sigma)
    if not torch.is_tensor(sigma) and np.ndim(sigma) == 0 and sigma == 0:
        lam = math.inf
    else:
        lam = pre.weight(sigma)
    return pre.c_skip(sigma), pre.c_out(sigma), pre.c_in(sigma), pre.c_noise(sigma), lam


def add_noise(z0, sigma, noise):
    """Forward diffusion ``z0 + sigma * noise``."""
    if tuple(z0.shape) != tuple(noise.shape):
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    _check_nonneg(sigma)
    return z0 + sigma * noise


def expand_sigma(sigma, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-sample sigma against a batched latent."""
    sigma = torch.as_tensor(sigma, dtype=like.dtype, device=like.device)
    if sigma.ndim == 0:
        return sigma
    return sigma.reshape(sigma.shape + (1,) * (like.ndim - sigma.ndim))


def denoise(z_noisy, z_masked_cond, sigma, backbone, pre: Preconditioner = Preconditioner(), *, return_tap=False):
    """Preconditioned denoiser output ``c_skip z + c_out F([c_in z, cond])``.

    ``backbone`` maps ``(x, c_noise)`` with ``x`` the channel concatenation of
    the scaled noisy latent and the masked condition to ``(residual, tap)``.
    Latents are channels-last: ``[..., T, h, w, D]``.
    """
    _check_nonneg(sigma)
    if z_noisy.shape != z_masked_cond.shape:
        raise ValueError("noisy latent and condition must share shape")
    s = expand_sigma(sigma, z_noisy)
    x = torch.cat([pre.c_in(s) * z_noisy, z_masked_cond], dim=-1)
    c_noise = pre.c_noise(torch.as_tensor(sigma, dtype=z_noisy.dtype, device=z_noisy.device))
    residual, tap = backbone(x, c_noise)
    if residual.shape != z_noisy.shape:
        raise RuntimeError(f"backbone returned {tuple(residual.shape)}, expected {tuple(z_noisy.shape)}")
    out = pre.c_skip(s) * z_noisy + pre.c_out(s) * residual
    return (out, tap) if return_tap else out


def score_from_denoiser(z_noisy, denoised, sigma):
    """Score of the smoothed density recovered as ``(D(z) - z) / sigma**2``."""
    s = sigma.detach().cpu().numpy() if torch.is_tensor(sigma) else np.asarray(sigma)
    if np.any(s == 0):
        raise ZeroDivisionError("score is undefined at sigma = 0")
    _check_pos(sigma)
    if torch.is_tensor(z_noisy):
        sigma = expand_sigma(sigma, z_noisy)
    return (denoised - z_noisy) / sigma**2


def loss_weight(sigma, pre: Preconditioner = Preconditioner()):
    _check_pos(sigma)
    return pre.weight(sigma)


def karras_sigma_grid(n_steps: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> np.ndarray:
    """Power-interpolated noise levels from ``sigma_max`` to ``sigma_min``, then 0.

    Returns ``n_steps + 1`` float64 values.
    """
    if n_steps < 2 or not 0 < sigma_min < sigma_max or rho <= 0:
        raise ValueError(
            f"need n_steps >= 2, 0 < sigma_min < sigma_max, rho > 0; got {n_steps}, {sigma_min}, {sigma_max}, {rho}"
        )
    ramp = np.arange(n_steps, dtype=np.float64) / (n_steps - 1)
    hi, lo = sigma_max ** (1 / rho), sigma_min ** (1 / rho)
    sigmas = (hi + ramp * (lo - hi)) ** rho
    # pin the endpoints; the power round trip is not exact in floating point
    sigmas[0], sigmas[-1] = sigma_max, sigma_min
    return np.append(sigmas, 0.0)


@dataclass(frozen=True)
class TrainSigmaSampler:
    """Log-normal training noise distribution ``exp(p_mean + p_std * g)``."""

    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if self.p_std < 0:
            raise ValueError("p_std must be >= 0")

    def median(self) -> float:
        return math.exp(self.p_mean)


def sample_train_sigma(sampler: TrainSigmaSampler, rng, size=None):
    """Draw training noise levels.

    ``rng`` is a ``numpy.random.Generator`` (returns float/ndarray) or a
    ``torch.Generator`` (returns a tensor of shape ``size``).
    """
    if isinstance(rng, torch.Generator):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        g = torch.randn(shape, generator=rng)
        return torch.exp(sampler.p_mean + sampler.p_std * g)
    g = rng.standard_normal(size)
    return np.exp(sampler.p_mean + sampler.p_std * g)
