"""Walk through the linear-Gaussian oracle family.

Shows the score/denoiser identity, unconditional and frame-conditioned sampling
with the exact denoiser, and classifier guidance pulling samples toward a class.

    python3 demos/analytic_oracle.py
"""

from __future__ import annotations

import numpy as np
import torch

from vidmask.analytic import (
    AnalyticModel,
    analytic_conditional_mean,
    analytic_optimal_denoiser,
    analytic_posterior,
    analytic_score,
    default_linear_gaussian,
    to_flat,
    to_latent,
)
from vidmask.edm import score_from_denoiser
from vidmask.sampler import SamplerConfig, sample


def main():
    spec = default_linear_gaussian(2)
    model = AnalyticModel(spec)
    rng = np.random.default_rng(0)
    print(f"family: {spec.num_classes} classes, {spec.num_frames} frames of dim {spec.dim}")

    z = rng.standard_normal((1000, spec.n)) * 2
    gap = np.abs(score_from_denoiser(z, analytic_optimal_denoiser(z, 0.7, spec), 0.7) - analytic_score(z, 0.7, spec)).max()
    print(f"score from denoiser vs analytic score: max gap {gap:.1e}")

    obs = torch.zeros(5000, spec.num_frames, 1, 1, spec.dim, dtype=torch.float64)
    for steps in (40, 200):
        out = to_flat(sample(np.zeros(spec.num_frames, bool), obs, SamplerConfig(n_steps=steps), model=model))
        cov_err = np.linalg.norm(np.cov(out, rowvar=False) - spec.covariance()) / np.linalg.norm(spec.covariance())
        print(f"unconditional, {steps:3d} Euler steps: covariance rel err {cov_err:.3f}")

    z0, y = spec.sample(1, rng)
    mask = np.eye(1, spec.num_frames, dtype=bool)[0]
    cond = to_latent(np.repeat(z0, 2000, axis=0), spec)
    out = to_flat(sample(mask, cond, SamplerConfig(seed=1), model=model))
    hid = np.setdiff1d(np.arange(spec.n), spec.frame_slice([0]))
    ref = analytic_conditional_mean(z0[:, spec.frame_slice([0])], [0], spec)[0]
    print("given frame 0, sampled mean of the rest:", out[:, hid].mean(0).round(2))
    print("                   exact conditional mean:", ref.round(2))

    for s in (0.0, 1.0, 4.0):
        gen = to_flat(sample(mask, cond[:500], SamplerConfig(seed=2, guidance_scale_s=s), target=torch.ones(500, dtype=torch.long), model=model))
        p = analytic_posterior(gen, 0.0, spec)[:, 1].mean()
        print(f"guidance s={s:g}: mean posterior of class 1 = {p:.3f}")


if __name__ == "__main__":
    main()
