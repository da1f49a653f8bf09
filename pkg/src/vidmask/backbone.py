"""Spatial-temporal UNet denoiser with a feature tap and an attentive-pooling classifier.

Latents are channels-last, ``[B, T, h, w, D]`` (an unbatched ``[T, h, w, D]``
is accepted everywhere and returned unbatched). The network input is the
channel concatenation of the ``c_in``-scaled noisy latent and the masked
condition, so its depth is ``2 * D``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .edm import Preconditioner, denoise, expand_sigma

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class BackboneConfig:
    """Architecture hyperparameters. Shapes and parameter counts depend on nothing else."""

    latent_channels: int = 1
    num_frames: int = 16
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 4)
    num_up_blocks: int = 4
    feature_tap_index: int = 2
    num_classes: int = 8
    temporal_mixing: str = "temporal_conv"
    emb_dim: int = 64
    pool_dim: int = 64
    mask_indicator: bool = False
    arch: str = "unet"  # "unet" for videos, "mlp" for tiny vector-valued latents
    mlp_hidden: int = 256
    mlp_depth: int = 3

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        if self.arch not in ("unet", "mlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.temporal_mixing not in ("temporal_attention", "temporal_conv"):
            raise ValueError(f"unknown temporal_mixing {self.temporal_mixing!r}")
        if self.arch == "unet" and len(self.channel_multipliers) != self.num_up_blocks:
            raise ValueError("need one channel multiplier per resolution stage")
        if not 1 <= self.feature_tap_index <= self.num_up_blocks:
            raise ValueError(f"feature_tap_index must lie in [1, {self.num_up_blocks}]")
        if self.num_classes < 1 or self.latent_channels < 1:
            raise ValueError("num_classes and latent_channels must be positive")

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels + int(self.mask_indicator)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class NoiseEmbedding(nn.Module):
    """Fourier features of ``c_noise`` followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.register_buffer("freqs", torch.exp(torch.linspace(0.0, math.log(64.0), dim // 2)))
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, c_noise: torch.Tensor) -> torch.Tensor:
        ang = c_noise[:, None] * self.freqs[None]
        return self.mlp(torch.cat([ang.cos(), ang.sin()], dim=-1))


class ResBlock(nn.Module):
    """Per-frame 3x3 residual block with an additive noise-level bias."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        # x: [N, C, H, W] with N = B*T; emb: [N, E]
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TemporalMix(nn.Module):
    """Cross-frame mixing; the only pathway between frames. Output projection is zero-initialised."""

    def __init__(self, ch: int, num_frames: int, mode: str):
        super().__init__()
        self.mode = mode
        self.norm = nn.GroupNorm(_groups(ch), ch)
        if mode == "temporal_conv":
            self.mix = nn.Conv1d(ch, ch, 3, padding=1)
            self.out = nn.Conv1d(ch, ch, 1)
        else:
            heads = max(1, ch // 16)
            self.pos = nn.Parameter(torch.zeros(num_frames, ch))
            nn.init.normal_(self.pos, std=0.02)
            self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)
            self.out = nn.Linear(ch, ch)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, frames: int):
        n, c, h, w = x.shape
        b = n // frames
        y = self.norm(x)
        # [B*T, C, H, W] -> [B*H*W, C, T]
        y = y.reshape(b, frames, c, h, w).permute(0, 3, 4, 2, 1).reshape(b * h * w, c, frames)
        if self.mode == "temporal_conv":
            y = self.out(F.silu(self.mix(y)))
        else:
            seq = y.transpose(1, 2) + self.pos[:frames]
            y, _ = self.attn(seq, seq, seq, need_weights=False)
            y = self.out(y).transpose(1, 2)
        y = y.reshape(b, h, w, c, frames).permute(0, 4, 3, 1, 2).reshape(n, c, h, w)
        return x + y


class STBlock(nn.Module):
    def __init__(self, c_in, c_out, cfg: BackboneConfig):
        super().__init__()
        self.res = ResBlock(c_in, c_out, cfg.emb_dim)
        self.temporal = TemporalMix(c_out, cfg.num_frames, cfg.temporal_mixing)

    def forward(self, x, emb, frames):
        return self.temporal(self.res(x, emb), frames)


class SpatialTemporalUNet(nn.Module):
    """Four-stage factorized UNet; ``forward`` returns ``(residual, tap)``.

    Up-blocks are numbered 1..num_up_blocks from the coarsest resolution. The
    tap is the output of up-block ``feature_tap_index``, taken before any
    upsampling. With ``compute_residual=False`` the forward pass stops at the
    tap and returns ``(None, tap)``.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.noise_emb = NoiseEmbedding(cfg.emb_dim)
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = chans[0]
        for ch in chans:
            self.down.append(STBlock(prev, ch, cfg))
            prev = ch
        self.mid = STBlock(prev, prev, cfg)
        self.up = nn.ModuleList()
        for ch in reversed(chans):
            self.up.append(STBlock(prev + ch, ch, cfg))
            prev = ch
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def tap_channels(self) -> int:
        mults = list(reversed(self.cfg.channel_multipliers))
        return self.cfg.base_channels * mults[self.cfg.feature_tap_index - 1]

    def forward(self, x, c_noise, compute_residual: bool = True):
        b, t, h, w, c = x.shape
        if c != self.cfg.in_channels:
            raise ValueError(f"expected input depth {self.cfg.in_channels}, got {c}")
        c_noise = torch.as_tensor(c_noise, dtype=x.dtype, device=x.device)
        c_noise = c_noise.expand(b) if c_noise.ndim == 0 else c_noise.reshape(b)
        emb = self.noise_emb(c_noise).repeat_interleave(t, dim=0)
        hcur = self.conv_in(x.permute(0, 1, 4, 2, 3).reshape(b * t, c, h, w))
        skips = []
        last = len(self.down) - 1
        for i, blk in enumerate(self.down):
            hcur = blk(hcur, emb, t)
            skips.append(hcur)
            if i < last:
                hcur = F.avg_pool2d(hcur, 2)
        hcur = self.mid(hcur, emb, t)
        tap = None
        for j, blk in enumerate(self.up, start=1):
            hcur = blk(torch.cat([hcur, skips.pop()], dim=1), emb, t)
            if j == self.cfg.feature_tap_index:
                n, ct, ht, wt = hcur.shape
                tap = hcur.reshape(b, t, ct, ht, wt).permute(0, 1, 3, 4, 2)
                if not compute_residual:
                    return None, tap
            if j < len(self.up):
                hcur = F.interpolate(hcur, scale_factor=2, mode="nearest")
        out = self.conv_out(F.silu(self.norm_out(hcur)))
        out = out.reshape(b, t, self.cfg.latent_channels, h, w).permute(0, 1, 3, 4, 2)
        return out, tap


class MLPBackbone(nn.Module):
    """Dense stand-in for tiny latents ``[T, 1, 1, d]`` used by the analytic oracle family.

    The tap is the last hidden layer reshaped to ``[T, 1, 1, hidden // T]``.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.mlp_hidden % cfg.num_frames:
            raise ValueError("mlp_hidden must be divisible by num_frames")
        n_in = cfg.num_frames * cfg.in_channels
        self.noise_emb = NoiseEmbedding(cfg.emb_dim)
        self.inp = nn.Linear(n_in + cfg.emb_dim, cfg.mlp_hidden)
        self.hidden = nn.ModuleList(nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden) for _ in range(cfg.mlp_depth - 1))
        self.out = nn.Linear(cfg.mlp_hidden, cfg.num_frames * cfg.latent_channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def tap_channels(self) -> int:
        return self.cfg.mlp_hidden // self.cfg.num_frames

    def forward(self, x, c_noise, compute_residual: bool = True):
        b, t, h, w, c = x.shape
        if c != self.cfg.in_channels or h * w != 1:
            raise ValueError(f"MLP backbone expects [B, T, 1, 1, {self.cfg.in_channels}], got {tuple(x.shape)}")
        c_noise = torch.as_tensor(c_noise, dtype=x.dtype, device=x.device)
        c_noise = c_noise.expand(b) if c_noise.ndim == 0 else c_noise.reshape(b)
        hcur = F.silu(self.inp(torch.cat([x.reshape(b, -1), self.noise_emb(c_noise)], dim=-1)))
        for lin in self.hidden:
            hcur = F.silu(lin(hcur))
        tap = hcur.reshape(b, t, 1, 1, -1)
        if not compute_residual:
            return None, tap
        return self.out(hcur).reshape(b, t, 1, 1, self.cfg.latent_channels), tap


class AttentivePooler(nn.Module):
    """One learned query attending over all ``T * h' * w'`` tap tokens."""

    def __init__(self, in_dim: int, dim: int, num_frames: int):
        super().__init__()
        self.norm = nn.LayerNorm(in_dim)
        self.frame_pos = nn.Parameter(torch.zeros(num_frames, in_dim))
        self.query = nn.Parameter(torch.randn(dim) * 0.02)
        self.key = nn.Linear(in_dim, dim)
        self.value = nn.Linear(in_dim, dim)
        self.proj = nn.Linear(dim, dim)

    def tokens(self, tap):
        b, t, h, w, c = tap.shape
        x = self.norm(tap) + self.frame_pos[:t, None, None, :]
        return x.reshape(b, t * h * w, c)

    def project(self, tokens):
        """Value then output projection of individual tokens."""
        return self.proj(self.value(tokens))

    def forward(self, tap):
        x = self.tokens(tap)
        scores = self.key(x) @ self.query / math.sqrt(self.query.numel())
        attn = scores.softmax(dim=-1)
        pooled = (attn[..., None] * self.value(x)).sum(dim=1)
        return self.proj(pooled)


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, cfg: BackboneConfig):
        super().__init__()
        self.pool = AttentivePooler(in_dim, cfg.pool_dim, cfg.num_frames)
        self.fc = nn.Linear(cfg.pool_dim, cfg.num_classes)

    def forward(self, tap):
        return self.fc(self.pool(tap))


def _batched(z):
    return (z[None], True) if z.ndim == 4 else (z, False)


class VideoDenoiser(nn.Module):
    """Backbone plus classification head plus preconditioning.

    ``self.backbone`` is the network ``F``; its layers up to the tap form
    ``F_head``. ``self.head`` is the attentive pooler with its linear layer.
    """

    def __init__(self, cfg: BackboneConfig, sigma_data: float = 0.5):
        super().__init__()
        self.cfg = cfg
        self.pre = Preconditioner(sigma_data)
        self.backbone = SpatialTemporalUNet(cfg) if cfg.arch == "unet" else MLPBackbone(cfg)
        self.head = ClassifierHead(self.backbone.tap_channels, cfg)

    def _cond(self, cond, mask):
        if not self.cfg.mask_indicator:
            return cond
        if mask is None:
            raise ValueError("mask_indicator models need the frame mask")
        m = torch.as_tensor(mask, dtype=cond.dtype, device=cond.device)
        m = m.reshape(m.shape + (1, 1, 1)).expand(*cond.shape[:-1], 1)
        return torch.cat([cond, m], dim=-1)

    def forward(self, x, c_noise, compute_residual: bool = True):
        return self.backbone(x, c_noise, compute_residual=compute_residual)

    def denoise(self, z_noisy, cond, sigma, mask=None, return_tap=False):
        """``D(z; cond, sigma)``; accepts batched or unbatched latents."""
        z_noisy, unb = _batched(z_noisy)
        cond, _ = _batched(cond)
        if self.cfg.mask_indicator:
            ind = self._cond(cond, mask)[..., -1:]
            out, tap = denoise(z_noisy, cond, sigma, lambda x, cn: self(torch.cat([x, ind], -1), cn), self.pre, return_tap=True)
        else:
            out, tap = denoise(z_noisy, cond, sigma, self, self.pre, return_tap=True)
        if unb:
            out, tap = out[0], tap[0]
        return (out, tap) if return_tap else out

    def features(self, x_scaled, cond, c_noise, mask=None):
        """``F_head([x_scaled, cond])`` without running the decoder tail."""
        x_scaled, unb = _batched(x_scaled)
        cond, _ = _batched(cond)
        _, tap = self(torch.cat([x_scaled, self._cond(cond, mask)], dim=-1), c_noise, compute_residual=False)
        return tap[0] if unb else tap

    def logits_from_scaled(self, x_scaled, cond, c_noise, mask=None):
        """Class logits for an already ``c_in``-scaled noisy input."""
        x_scaled, unb = _batched(x_scaled)
        cond, _ = _batched(cond)
        logits = self.head(self.features(x_scaled, cond, c_noise, mask))
        return logits[0] if unb else logits

    def logits(self, z_noisy, cond, sigma, mask=None):
        """Class logits for a noisy latent at level ``sigma`` (scaled by ``c_in`` internally)."""
        z_noisy, unb = _batched(z_noisy)
        cond, _ = _batched(cond)

        s = expand_sigma(sigma, z_noisy)
        c_noise = self.pre.c_noise(torch.as_tensor(sigma, dtype=z_noisy.dtype))
        out = self.logits_from_scaled(self.pre.c_in(s) * z_noisy, cond, c_noise, mask)
        return out[0] if unb else out

    def param_groups(self, lr: float, head_lr_mult: float = 10.0, weight_decay: float = 0.0):
        return [
            {"params": list(self.backbone.parameters()), "lr": lr, "lr_mult": 1.0, "weight_decay": weight_decay},
            {"params": list(self.head.parameters()), "lr": lr * head_lr_mult, "lr_mult": head_lr_mult, "weight_decay": weight_decay},
        ]


def layer_shapes(cfg: BackboneConfig) -> dict[str, list[int]]:
    """Name -> shape of every parameter of a freshly built model."""
    torch.manual_seed(0)
    model = VideoDenoiser(cfg)
    return {k: list(v.shape) for k, v in model.state_dict().items()}


def save_checkpoint(path, model: VideoDenoiser, *, optimizer=None, step: int = 0, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "sigma_data": model.pre.sigma_data,
        "weights": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, expected: BackboneConfig | None = None):
    """Return ``(model, payload)``. Rejects format-version and config-hash mismatches."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt or truncated archive
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {payload.get('format_version')} != supported {CHECKPOINT_FORMAT_VERSION}"
        )
    cfg = BackboneConfig.from_dict(payload["config"])
    if cfg.hash() != payload["config_hash"]:
        raise CheckpointError("stored config does not match its hash")
    if expected is not None and expected.hash() != cfg.hash():
        raise CheckpointError(f"config hash mismatch: checkpoint {cfg.hash()} vs expected {expected.hash()}")
    model = VideoDenoiser(cfg, sigma_data=payload["sigma_data"])
    model.load_state_dict(payload["weights"])
    return model, payload
