"""Training loop for the joint generation + recognition objective."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import VideoDenoiser, save_checkpoint
from .edm import TrainSigmaSampler, add_noise, sample_train_sigma
from .masking import MaskPolicy, apply_mask, sample_masks
from .objectives import classification_loss, condition_dropout, generative_loss, total_loss

log = logging.getLogger(__name__)

PHASES = ("gen_only", "joint", "cls_only")


@dataclass
class TrainConfig:
    phase: str = "joint"
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1.25e-5
    min_lr: float = 2.5e-7
    warmup_epochs: float = 5.0
    head_lr_mult: float = 10.0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    gamma: float = 10.0
    p_drop: float = 0.10
    mask_mode: str = "random_subset"
    min_hidden: int | None = None
    max_hidden: int | None = None
    p_mean: float = -1.2
    p_std: float = 1.2
    freeze_backbone: bool = False
    seed: int = 0
    log_every: int = 1
    ckpt_every: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.freeze_backbone and self.phase != "cls_only":
            raise ValueError("a frozen backbone only makes sense for the cls_only phase")

    @property
    def policy(self) -> MaskPolicy:
        return MaskPolicy(self.mask_mode, self.min_hidden, self.max_hidden)

    @property
    def sigma_sampler(self) -> TrainSigmaSampler:
        return TrainSigmaSampler(self.p_mean, self.p_std)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from ``min_lr`` to ``lr`` then cosine decay back to ``min_lr``."""
    warm = int(round(cfg.warmup_epochs * steps_per_epoch))
    if step < warm:
        return cfg.min_lr + (cfg.lr - cfg.min_lr) * step / warm
    span = max(1, cfg.steps - warm)
    prog = min(1.0, (step - warm) / span)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * prog))


def step_generators(seed: int, step: int):
    """Per-step RNGs so a resumed run replays the same batches and noise."""
    return np.random.default_rng([seed, step]), torch.Generator().manual_seed(seed * 1_000_003 + step)


def compute_losses(model: VideoDenoiser, z0, labels, cfg: TrainConfig, rng, tgen):
    """One forward pass returning ``(LossBreakdown, stats)``; losses are tensors."""
    B, T = z0.shape[0], z0.shape[1]
    sigma = sample_train_sigma(cfg.sigma_sampler, tgen, B).to(z0.dtype)
    noise = torch.randn(z0.shape, generator=tgen, dtype=z0.dtype)
    noisy = add_noise(z0, sigma.reshape(B, 1, 1, 1, 1), noise)
    masks = sample_masks(cfg.policy, T, B, rng)
    cond, dropped = condition_dropout(apply_mask(z0, masks), rng, cfg.p_drop)
    masks = masks & ~np.asarray(dropped)[:, None]
    zero = torch.zeros((), dtype=z0.dtype)
    if cfg.phase == "cls_only":
        logits = model.logits(noisy, cond, sigma, mask=masks)
        gen = zero
    else:
        denoised, tap = model.denoise(noisy, cond, sigma, mask=masks, return_tap=True)
        gen = generative_loss(z0, denoised, sigma, model.pre)
        logits = model.head(tap) if cfg.phase == "joint" else None
    cls = classification_loss(labels, logits) if logits is not None else zero
    if cfg.phase == "gen_only":
        out = total_loss(gen, zero, cfg.gamma)
    elif cfg.phase == "cls_only":
        out = total_loss(zero, cls, 0.0)
    else:
        out = total_loss(gen, cls, cfg.gamma)
    stats = {
        "sigma_mean": float(sigma.mean()),
        "sigma_min": float(sigma.min()),
        "sigma_max": float(sigma.max()),
        "drop_frac": float(np.mean(dropped)),
    }
    return out, stats


def make_optimizer(model: VideoDenoiser, cfg: TrainConfig):
    if cfg.freeze_backbone:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
        groups = [{"params": list(model.head.parameters()), "lr": cfg.lr * cfg.head_lr_mult, "lr_mult": cfg.head_lr_mult}]
    else:
        groups = model.param_groups(cfg.lr, cfg.head_lr_mult)
    return torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)


@dataclass
class TrainState:
    step: int = 0
    history: list = field(default_factory=list)


def train(
    model: VideoDenoiser,
    latents: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    *,
    run_dir=None,
    optimizer=None,
    start_step: int = 0,
    stop_step: int | None = None,
    progress: bool = False,
    ckpt_extra: dict | None = None,
) -> TrainState:
    """Optimise ``model`` in place on ``latents`` ``[N, T, h, w, D]``.

    Writes ``metrics.jsonl`` (one record per logged step) and periodic
    checkpoints into ``run_dir`` when given. ``start_step``/``stop_step`` allow
    resuming: step ``k`` always draws the same batch, masks and noise.
    ``ckpt_extra`` is merged into the checkpoint's ``extra`` dict.
    """
    torch.manual_seed(cfg.seed)
    n = latents.shape[0]
    steps_per_epoch = max(1, n // cfg.batch_size)
    opt = optimizer or make_optimizer(model, cfg)
    stop = cfg.steps if stop_step is None else min(stop_step, cfg.steps)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "metrics.jsonl", "a")
    state = TrainState(step=start_step)
    model.train()
    t0 = time.time()
    try:
        for step in range(start_step, stop):
            lr = lr_at(step, cfg, steps_per_epoch)
            for g in opt.param_groups:
                g["lr"] = lr * g.get("lr_mult", 1.0)
            rng, tgen = step_generators(cfg.seed, step)
            idx = torch.as_tensor(rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size))
            losses, stats = compute_losses(model, latents[idx], labels[idx], cfg, rng, tgen)
            if not torch.isfinite(losses.total.detach()):
                raise FloatingPointError(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_([p for g in opt.param_groups for p in g["params"]], cfg.grad_clip)
            opt.step()
            state.step = step + 1
            rec = {
                "step": step,
                "lr": lr,
                "gen_loss": float(losses.gen_loss.detach()),
                "cls_loss": float(losses.cls_loss.detach()),
                "total": float(losses.total.detach()),
                **stats,
            }
            state.history.append(rec)
            if log_fh is not None and step % cfg.log_every == 0:
                log_fh.write(json.dumps(rec) + "\n")
            if progress and step % 100 == 0:
                log.info("step %d  total %.4f  gen %.4f  cls %.4f  (%.1fs)", step, rec["total"], rec["gen_loss"], rec["cls_loss"], time.time() - t0)
            if run_dir is not None and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
                save_checkpoint(run_dir / "checkpoint.pt", model, optimizer=opt, step=state.step, extra={"train": cfg.to_dict(), **(ckpt_extra or {})})
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoint.pt", model, optimizer=opt, step=state.step, extra={"train": cfg.to_dict(), **(ckpt_extra or {})})
    state.optimizer = opt
    return state
