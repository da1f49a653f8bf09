"""Joint objective: weighted denoising loss, cross-entropy, balancing, condition dropout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .edm import Preconditioner, _check_pos

DEFAULT_GAMMA = 10.0
DEFAULT_P_DROP = 0.10


@dataclass
class LossBreakdown:
    gen_loss: float | torch.Tensor
    cls_loss: float | torch.Tensor
    total: float | torch.Tensor
    gamma: float


def generative_loss(z0, denoised, sigma, pre: Preconditioner = Preconditioner(), reduce: bool = True):
    """``lambda(sigma) * mean((D - z0)^2)``.

    For a batch with per-sample ``sigma`` the mean runs over each sample's
    elements, then the weighted values are averaged (or returned per sample
    with ``reduce=False``).
    """
    if tuple(z0.shape) != tuple(denoised.shape):
        raise ValueError("z0 and denoised must share shape")
    _check_pos(sigma)
    if not torch.is_tensor(z0):
        return float(pre.weight(sigma) * np.mean((np.asarray(denoised) - np.asarray(z0)) ** 2))
    sig = torch.as_tensor(sigma, dtype=z0.dtype, device=z0.device)
    if sig.ndim == 0:
        return pre.weight(sig) * F.mse_loss(denoised, z0)
    per = (denoised - z0).pow(2).reshape(sig.shape[0], -1).mean(dim=1) * pre.weight(sig)
    return per.mean() if reduce else per


def classification_loss(labels, logits):
    """Mean cross-entropy. ``labels`` are one-hot rows or integer class indices."""
    logits = torch.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits[None]
    labels = torch.as_tensor(labels)
    if labels.ndim == 0:
        labels = labels[None]
    logp = F.log_softmax(logits, dim=-1)
    if labels.ndim == logits.ndim:
        if labels.shape[-1] != logits.shape[-1]:
            raise ValueError(f"label dimension {labels.shape[-1]} != logits dimension {logits.shape[-1]}")
        return -(labels.to(logp.dtype) * logp).sum(-1).mean()
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("batch sizes of labels and logits differ")
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise ValueError("class index out of range")
    return F.nll_loss(logp, labels.long())


def total_loss(gen, cls, gamma: float = DEFAULT_GAMMA) -> LossBreakdown:
    return LossBreakdown(gen, cls, cls + gamma * gen, gamma)


def condition_dropout(z_masked, rng, p_drop: float = DEFAULT_P_DROP):
    """Replace the whole condition by zeros with probability ``p_drop``.

    For a batch ``[B, T, h, w, D]`` each sample is dropped independently;
    returns ``(condition, dropped)`` with ``dropped`` a boolean array.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    batched = z_masked.ndim == 5
    n = z_masked.shape[0] if batched else 1
    dropped = rng.random(n) < p_drop
    keep = torch.as_tensor(~dropped, device=z_masked.device)
    if batched:
        keep = keep.reshape(n, 1, 1, 1, 1)
    else:
        keep = keep.reshape(())
    out = torch.where(keep, z_masked, torch.zeros((), dtype=z_masked.dtype, device=z_masked.device))
    return out, (dropped if batched else bool(dropped[0]))
