"""Frame-conditioned stochastic Euler sampler with classifier and classifier-free guidance.

A ``model`` is anything with ``denoise(z, cond, sigma, mask=None)`` returning
the clean-latent estimate and, for classifier guidance,
``logits_from_scaled(x_scaled, cond, c_noise, mask=None)`` plus a ``pre``
attribute holding the :class:`~vidmask.edm.Preconditioner`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .edm import expand_sigma, karras_sigma_grid
from .masking import apply_mask


@dataclass
class SamplerConfig:
    n_steps: int = 40
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    churn: float = 0.0
    guidance_scale_s: float = 0.0
    cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")
        if self.churn < 0 or self.guidance_scale_s < 0:
            raise ValueError("churn and guidance_scale_s must be >= 0")
        if self.cfg_scale < 1:
            raise ValueError("cfg_scale must be >= 1")

    def sigmas(self) -> np.ndarray:
        return karras_sigma_grid(self.n_steps, self.sigma_min, self.sigma_max, self.rho)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GuidanceTarget:
    class_index: int

    def check(self, num_classes: int):
        if not 0 <= self.class_index < num_classes:
            raise ValueError(f"class index {self.class_index} outside [0, {num_classes})")


def churn_perturb(z_i, t_i: float, churn: float, n_steps: int, generator: torch.Generator | None = None):
    """Raise the noise level from ``t_i`` to ``t_i (1 + gamma)`` by adding fresh noise."""
    if t_i <= 0:
        raise ValueError("t_i must be positive")
    gamma = min(churn / n_steps, math.sqrt(2) - 1) if churn > 0 else 0.0
    if gamma == 0:
        return z_i, t_i
    t_hat = t_i * (1 + gamma)
    eps = torch.randn(z_i.shape, generator=generator, dtype=z_i.dtype)
    return z_i + math.sqrt(t_hat**2 - t_i**2) * eps, t_hat


def euler_residual(z_hat, denoised, t_hat: float, t_next: float):
    """Unguided update ``eps = (t_next - t_hat) (z_hat - D) / t_hat``."""
    return (t_next - t_hat) * (z_hat - denoised) / t_hat


def euler_step(z_hat, t_hat: float, t_next: float, cond, model, mask=None, delta=None, denoised=None):
    """One first-order step ``z_hat + eps`` with an optional additive residual correction ``delta``."""
    if t_hat <= 0:
        raise ValueError("t_hat must be positive")
    if not t_next < t_hat:
        raise ValueError("t_next must be below t_hat")
    if denoised is None:
        with torch.no_grad():
            denoised = model.denoise(z_hat, cond, t_hat, mask=mask)
    if t_next == 0:
        # exact jump to the denoised estimate
        out = denoised
    else:
        out = z_hat + euler_residual(z_hat, denoised, t_hat, t_next)
    return out if delta is None else out + delta


def guidance_gradient(z_hat, t_hat: float, cond, target, model, mask=None):
    """``grad_c log softmax(logits(c))[y]`` at ``c = c_in(t_hat) z_hat``.

    ``target`` is an int, a :class:`GuidanceTarget`, or a per-sample index tensor.
    """
    pre = model.pre
    x = (pre.c_in(t_hat) * z_hat).detach().clone().requires_grad_(True)
    c_noise = pre.c_noise(torch.tensor(float(t_hat), dtype=z_hat.dtype))
    with torch.enable_grad():
        logits = model.logits_from_scaled(x, cond, c_noise, mask)
        logp = F.log_softmax(logits, dim=-1)
        idx = _target_index(target, logp)
        sel = logp.gather(-1, idx.unsqueeze(-1)).sum()
        (grad,) = torch.autograd.grad(sel, x)
    return grad


def _target_index(target, logp):
    num_classes = logp.shape[-1]
    if isinstance(target, GuidanceTarget):
        target = target.class_index
    idx = torch.as_tensor(target, dtype=torch.long)
    if torch.any(idx < 0) or torch.any(idx >= num_classes):
        raise ValueError(f"class index {target} outside [0, {num_classes})")
    return idx.expand(logp.shape[:-1]) if idx.ndim == 0 else idx


def classifier_guidance_delta(z_hat, t_hat: float, t_next: float, cond, target, s: float, model, pre=None, mask=None):
    """Additive correction to the residual from the classification branch.

    ``-(t_next - t_hat) t_hat / sqrt(t_hat^2 + sigma_data^2) * s * grad_c log p(y | c)``
    with ``c = c_in(t_hat) z_hat``. On a decreasing grid the prefactor is
    positive, so the correction climbs the target-class log-probability.
    """
    if s < 0:
        raise ValueError("guidance scale must be >= 0")
    pre = model.pre if pre is None else pre
    if s == 0:
        if isinstance(target, GuidanceTarget):
            n_cls = getattr(getattr(model, "cfg", None), "num_classes", None)
            if n_cls is not None:
                target.check(n_cls)
        return torch.zeros_like(z_hat)
    grad = guidance_gradient(z_hat, t_hat, cond, target, model, mask)
    coef = (t_next - t_hat) * t_hat / math.sqrt(t_hat**2 + pre.sigma_data**2)
    return -coef * s * grad


def classifier_free_mix(eps_cond, eps_uncond, cfg_scale: float):
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("residual shapes differ")
    if cfg_scale == 1:
        return eps_cond
    return eps_uncond + cfg_scale * (eps_cond - eps_uncond)


def _expand_mask(mask, batch, T):
    m = np.asarray(mask, dtype=bool)
    if m.shape[-1] != T:
        raise ValueError(f"mask length {m.shape[-1]} != {T}")
    return np.broadcast_to(m, (batch, T)) if batch is not None else m


@torch.no_grad()
def sample(cond_mask, observed, config: SamplerConfig, target=None, model=None, *, callback=None):
    """Generate latents conditioned on the visible frames of ``observed``.

    ``observed`` is ``[T, h, w, D]`` or ``[B, T, h, w, D]``; ``cond_mask`` is
    ``[T]`` or ``[B, T]``. Starts from ``N(0, sigma_max^2 I)`` and walks the
    Karras grid down to 0. Deterministic given ``config.seed``.
    """
    if model is None:
        raise ValueError("a model is required")
    unbatched = observed.ndim == 4
    obs = observed[None] if unbatched else observed
    B, T = obs.shape[0], obs.shape[1]
    mask = _expand_mask(cond_mask, B, T)
    cond = apply_mask(obs, mask)
    uncond = torch.zeros_like(cond)
    hidden_all = np.zeros_like(mask)
    if target is not None:
        num_classes = getattr(getattr(model, "cfg", None), "num_classes", None)
        tgt = torch.as_tensor(target.class_index if isinstance(target, GuidanceTarget) else target, dtype=torch.long)
        if num_classes is not None and (torch.any(tgt < 0) or torch.any(tgt >= num_classes)):
            raise ValueError(f"class index {target} outside [0, {num_classes})")
    gen = torch.Generator().manual_seed(int(config.seed))
    sigmas = config.sigmas()
    z = float(sigmas[0]) * torch.randn(obs.shape, generator=gen, dtype=obs.dtype)
    for i in range(config.n_steps):
        t_i, t_next = float(sigmas[i]), float(sigmas[i + 1])
        z_hat, t_hat = churn_perturb(z, t_i, config.churn, config.n_steps, gen)
        d_cond = model.denoise(z_hat, cond, t_hat, mask=mask)
        eps = euler_residual(z_hat, d_cond, t_hat, t_next)
        if config.cfg_scale != 1:
            d_unc = model.denoise(z_hat, uncond, t_hat, mask=hidden_all)
            eps = classifier_free_mix(eps, euler_residual(z_hat, d_unc, t_hat, t_next), config.cfg_scale)
            d_cond = None
        if target is not None and config.guidance_scale_s > 0:
            eps = eps + classifier_guidance_delta(z_hat, t_hat, t_next, cond, target, config.guidance_scale_s, model, mask=mask)
            d_cond = None
        if t_next == 0 and d_cond is not None:
            z = d_cond
        else:
            z = z_hat + eps
        if callback is not None:
            callback(i, t_hat, z)
    return z[0] if unbatched else z
