"""Recognition from full videos and from partially observed frames."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .edm import TrainSigmaSampler, add_noise
from .masking import apply_mask

DEFAULT_SIGMA_MAX = 80.0


@dataclass
class RecognitionConfig:
    eval_sigma: float = math.exp(TrainSigmaSampler().p_mean)
    n_eval_draws: int = 4
    seed: int = 0
    sigma_max: float = DEFAULT_SIGMA_MAX  # noise level announced to the partial-frame path
    batch_size: int = 256

    def __post_init__(self):
        if self.n_eval_draws < 1:
            raise ValueError("n_eval_draws must be >= 1")
        if self.eval_sigma <= 0:
            raise ValueError("eval_sigma must be positive")


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


@torch.no_grad()
def classify_full(z0, config: RecognitionConfig, model):
    """Logits with the clean video as condition and a lightly noised copy as input.

    Averages logits over ``n_eval_draws`` noise draws; noise for draw ``k`` of
    the batch comes from a generator seeded with ``(seed, k)``.
    """
    unb = z0.ndim == 4
    z = z0[None] if unb else z0
    total = None
    for k in range(config.n_eval_draws):
        gen = torch.Generator().manual_seed(int(config.seed) * 1000003 + k)
        noise = torch.randn(z.shape, generator=gen, dtype=z.dtype)
        parts = []
        for sl in _batches(z.shape[0], config.batch_size):
            noisy = add_noise(z[sl], config.eval_sigma, noise[sl])
            parts.append(model.logits(noisy, z[sl], config.eval_sigma, mask=np.ones((noisy.shape[0], z.shape[1]), bool)))
        logits = torch.cat(parts)
        total = logits if total is None else total + logits
    out = total / config.n_eval_draws
    return out[0] if unb else out


@torch.no_grad()
def classify_partial(observed, mask, model, rng=None, sigma_max: float = DEFAULT_SIGMA_MAX, batch_size: int = 256):
    """Logits from the visible frames only; the noisy channel is a standard-normal draw.

    ``rng`` is a ``torch.Generator`` or an integer seed.
    """
    unb = observed.ndim == 4
    obs = observed[None] if unb else observed
    m = np.asarray(mask, dtype=bool)
    if m.shape[-1] != obs.shape[1]:
        raise ValueError(f"mask length {m.shape[-1]} != number of frames {obs.shape[1]}")
    m = np.broadcast_to(m, (obs.shape[0], obs.shape[1]))
    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(0 if rng is None else int(rng))
    noise = torch.randn(obs.shape, generator=gen, dtype=obs.dtype)
    c_noise = model.pre.c_noise(torch.tensor(float(sigma_max), dtype=obs.dtype))
    parts = []
    for sl in _batches(obs.shape[0], batch_size):
        cond = apply_mask(obs[sl], m[sl])
        parts.append(model.logits_from_scaled(noise[sl], cond, c_noise, mask=m[sl]))
    out = torch.cat(parts)
    return out[0] if unb else out


def predict(logits):
    """``(argmax, softmax)``; ties go to the smallest index."""
    x = logits.detach().cpu().double().numpy() if torch.is_tensor(logits) else np.asarray(logits, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    return np.argmax(x, axis=-1), probs
