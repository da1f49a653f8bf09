"""Closed-form oracle family: an isotropic Gaussian mixture over short vector trajectories.

Data is ``z0 ~ sum_y pi_y N(mu_y, sigma_d^2 I)`` with ``mu_y`` a flattened
``[T, d]`` trajectory. Smoothing by noise level ``sigma`` only inflates the
variance to ``s2 = sigma_d^2 + sigma^2``, so score, optimal denoiser, class
posterior and frame-conditional means all have closed forms. Vectors are
numpy float64 arrays of shape ``[..., T*d]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import logsumexp, softmax

from .edm import Preconditioner


@dataclass(frozen=True)
class LinearGaussianSpec:
    means: np.ndarray  # [C, T*d]
    sigma_d: float = 0.5
    prior: np.ndarray | None = None
    num_frames: int = 4
    dim: int = 2

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != self.num_frames * self.dim:
            raise ValueError(f"means must be [C, {self.num_frames * self.dim}], got {means.shape}")
        if len({m.tobytes() for m in means}) != len(means):
            raise ValueError("class means must be distinct")
        if self.sigma_d <= 0:
            raise ValueError("sigma_d must be positive")
        prior = np.full(len(means), 1.0 / len(means)) if self.prior is None else np.asarray(self.prior, dtype=np.float64)
        if prior.shape != (len(means),) or np.any(prior < 0) or abs(prior.sum() - 1) > 1e-12:
            raise ValueError("prior must lie on the simplex")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "prior", prior)

    @property
    def num_classes(self) -> int:
        return len(self.means)

    @property
    def n(self) -> int:
        return self.num_frames * self.dim

    def frame_slice(self, frames) -> np.ndarray:
        """Flat coordinate indices of the given frame indices."""
        frames = np.asarray(frames, dtype=int).reshape(-1)
        return (frames[:, None] * self.dim + np.arange(self.dim)[None]).reshape(-1)

    def sample(self, n: int, rng, labels=None):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        if labels is None:
            labels = rng.choice(self.num_classes, size=n, p=self.prior)
        z = self.means[labels] + self.sigma_d * rng.standard_normal((n, self.n))
        return z, np.asarray(labels)

    def mean(self) -> np.ndarray:
        return self.prior @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        dev = self.means - m
        return self.sigma_d**2 * np.eye(self.n) + (self.prior[:, None] * dev).T @ dev


def default_linear_gaussian(num_classes: int = 2, num_frames: int = 4, dim: int = 2, sigma_d: float = 0.5) -> LinearGaussianSpec:
    """Trajectories that share their first frame and fan out in distinct directions."""
    t = np.arange(num_frames, dtype=np.float64)
    means = []
    for y in range(num_classes):
        ang = np.pi / 2 * y / max(1, num_classes - 1)
        direction = np.zeros(dim)
        direction[0], direction[1 % dim] = np.cos(ang), np.sin(ang)
        base = np.ones(dim)
        means.append((base[None] + 0.75 * t[:, None] * direction[None]).reshape(-1))
    return LinearGaussianSpec(np.array(means), sigma_d, None, num_frames, dim)


def _s2(spec, sigma):
    return spec.sigma_d**2 + np.asarray(sigma, dtype=np.float64) ** 2


def _class_logits(z, sigma, spec):
    """``log pi_y + log N(z; mu_y, s2 I)`` for every class, shape ``[..., C]``."""
    z = np.asarray(z, dtype=np.float64)
    s2 = np.asarray(_s2(spec, sigma))[..., None]
    d2 = ((z[..., None, :] - spec.means) ** 2).sum(-1)
    return np.log(spec.prior) - 0.5 * d2 / s2 - 0.5 * spec.n * np.log(2 * np.pi * s2)


def analytic_log_density(z, sigma, spec: LinearGaussianSpec):
    return logsumexp(_class_logits(z, sigma, spec), axis=-1)


def analytic_posterior(z, sigma, spec: LinearGaussianSpec):
    """Bayes posterior over classes under the smoothed mixture."""
    return softmax(_class_logits(z, sigma, spec), axis=-1)


def analytic_score(z, sigma, spec: LinearGaussianSpec):
    """Exact ``grad_z log p_sigma(z)``."""
    z = np.asarray(z, dtype=np.float64)
    r = analytic_posterior(z, sigma, spec)
    s2 = np.asarray(_s2(spec, sigma))[..., None]
    return (r @ spec.means - z) / s2


def analytic_optimal_denoiser(z, sigma, spec: LinearGaussianSpec):
    """``E[z0 | z0 + sigma n = z]``: responsibility-weighted Gaussian posterior means."""
    z = np.asarray(z, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    r = analytic_posterior(z, sigma, spec)
    sd2, sg2 = spec.sigma_d**2, (sigma**2)[..., None]
    return (sd2 * z + sg2 * (r @ spec.means)) / (sd2 + sg2)


def analytic_grad_log_posterior(z, sigma, spec: LinearGaussianSpec, y: int):
    """``grad_z log p(y | z; sigma) = (mu_y - sum_k r_k mu_k) / s2``."""
    r = analytic_posterior(z, sigma, spec)
    s2 = np.asarray(_s2(spec, sigma))[..., None]
    return (spec.means[y] - r @ spec.means) / s2


def observed_responsibilities(observed, frames, spec: LinearGaussianSpec):
    idx = spec.frame_slice(frames)
    obs = np.asarray(observed, dtype=np.float64)
    d2 = ((obs[..., None, :] - spec.means[:, idx]) ** 2).sum(-1)
    return softmax(np.log(spec.prior) - 0.5 * d2 / spec.sigma_d**2, axis=-1)


def analytic_conditional_mean(observed, frames, spec: LinearGaussianSpec, y: int | None = None):
    """``E[z_hidden | z_frames = observed]`` (optionally also given the class).

    ``observed`` holds the flat coordinates of ``frames`` (``[..., len(frames)*d]``).
    Returns the flat hidden coordinates in frame order; empty when all
    frames are observed.
    """
    frames = np.asarray(frames, dtype=int).reshape(-1)
    if frames.size == 0:
        raise ValueError("need at least one observed frame")
    hidden = np.setdiff1d(np.arange(spec.num_frames), frames)
    hid = spec.frame_slice(hidden)
    obs = np.asarray(observed, dtype=np.float64)
    if y is not None:
        return np.broadcast_to(spec.means[y, hid], obs.shape[:-1] + (hid.size,)).copy()
    r = observed_responsibilities(obs, frames, spec)
    return r @ spec.means[:, hid]


def to_latent(z_flat, spec: LinearGaussianSpec) -> torch.Tensor:
    """Flat ``[..., T*d]`` vectors to latent videos ``[..., T, 1, 1, d]``."""
    z = torch.as_tensor(z_flat)
    return z.reshape(*z.shape[:-1], spec.num_frames, 1, 1, spec.dim)


def to_flat(z_latent) -> np.ndarray:
    z = z_latent.detach().cpu().numpy() if torch.is_tensor(z_latent) else np.asarray(z_latent)
    return z.reshape(*z.shape[:-4], -1)


class AnalyticModel:
    """Exact denoiser and classifier for a :class:`LinearGaussianSpec`, exposing the model interface.

    ``denoise`` ignores hidden frames of the condition and treats visible ones
    as exact observations: those coordinates are returned verbatim and the
    hidden ones are denoised under the class posterior given the visible
    frames. An all-zero condition (or all-hidden mask) gives the unconditional
    optimal denoiser. ``logits_from_scaled`` is the torch log-posterior of the
    unscaled input, so it is differentiable for guidance.
    """

    def __init__(self, spec: LinearGaussianSpec, sigma_data: float | None = None):
        self.spec = spec
        self.pre = Preconditioner(spec.sigma_d if sigma_data is None else sigma_data)

    def _visible(self, cond, mask):
        if mask is not None:
            m = np.asarray(mask, dtype=bool)
            return np.broadcast_to(m, cond.shape[:-4] + (self.spec.num_frames,))
        c = cond.detach().cpu().numpy() if torch.is_tensor(cond) else np.asarray(cond)
        return np.any(c.reshape(*c.shape[:-4], self.spec.num_frames, -1) != 0, axis=-1)

    def denoise(self, z_noisy, cond, sigma, mask=None, return_tap=False):
        spec = self.spec
        z = to_flat(z_noisy)
        c = to_flat(cond)
        vis = self._visible(cond, mask)
        sig = np.broadcast_to(np.asarray(sigma.detach().cpu() if torch.is_tensor(sigma) else sigma, dtype=np.float64), z.shape[:-1])
        out = np.empty_like(z)
        zs, cs, vs, ss = z.reshape(-1, spec.n), c.reshape(-1, spec.n), vis.reshape(-1, spec.num_frames), sig.reshape(-1)
        outs = out.reshape(-1, spec.n)
        for key in {v.tobytes() for v in vs}:
            rows = np.flatnonzero([v.tobytes() == key for v in vs])
            frames = np.flatnonzero(vs[rows[0]])
            if frames.size == 0:
                outs[rows] = analytic_optimal_denoiser(zs[rows], ss[rows], spec)
                continue
            obs_idx = spec.frame_slice(frames)
            hid_idx = np.setdiff1d(np.arange(spec.n), obs_idx)
            r = observed_responsibilities(cs[rows][:, obs_idx], frames, spec)
            # posterior over classes also uses the noisy hidden coordinates
            s2 = spec.sigma_d**2 + ss[rows, None] ** 2
            d2 = ((zs[rows][:, None, hid_idx] - spec.means[None][:, :, hid_idx]) ** 2).sum(-1)
            logr = np.log(np.maximum(r, 1e-300)) - 0.5 * d2 / s2
            rr = softmax(logr, axis=-1)
            sd2, sg2 = spec.sigma_d**2, ss[rows, None] ** 2
            res = np.empty((rows.size, spec.n))
            res[:, obs_idx] = cs[rows][:, obs_idx]
            res[:, hid_idx] = (sd2 * zs[rows][:, hid_idx] + sg2 * (rr @ spec.means[:, hid_idx])) / (sd2 + sg2)
            outs[rows] = res
        result = torch.as_tensor(out, dtype=z_noisy.dtype if torch.is_tensor(z_noisy) else torch.float64)
        result = result.reshape(z_noisy.shape)
        return (result, None) if return_tap else result

    def logits_from_scaled(self, x_scaled, cond, c_noise, mask=None):
        spec = self.spec
        sigma = torch.exp(4.0 * torch.as_tensor(c_noise, dtype=torch.float64))
        c_in = self.pre.c_in(sigma)
        s2 = spec.sigma_d**2 + sigma**2
        if sigma.ndim:
            c_in, s2 = c_in[:, None], s2[:, None]
        z = x_scaled.reshape(*x_scaled.shape[:-4], spec.n).to(torch.float64) / c_in
        d2 = ((z[..., None, :] - torch.as_tensor(spec.means)) ** 2).sum(-1)
        return torch.log(torch.as_tensor(spec.prior)) - 0.5 * d2 / s2
