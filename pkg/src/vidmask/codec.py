"""Lossless pixel <-> latent codecs standing in for a learned video autoencoder."""

from __future__ import annotations

import torch


class IdentityCodec:
    """Latent is the pixel tensor itself."""

    factor = 1

    def latent_shape(self, video_shape):
        return tuple(video_shape)

    def encode(self, video: torch.Tensor) -> torch.Tensor:
        return video

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z


class SpaceToDepthCodec:
    """Fold ``f x f`` pixel patches into channels: ``[.., T, H, W, C] -> [.., T, H/f, W/f, C f^2]``.

    A pure reshuffle, so ``decode(encode(v)) == v`` bit for bit.
    """

    def __init__(self, factor: int = 2):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = factor

    def latent_shape(self, video_shape):
        *lead, T, H, W, C = video_shape
        f = self.factor
        if H % f or W % f:
            raise ValueError(f"spatial size {H}x{W} not divisible by {f}")
        return (*lead, T, H // f, W // f, C * f * f)

    def encode(self, video: torch.Tensor) -> torch.Tensor:
        *lead, T, H, W, C = video.shape
        f = self.factor
        x = video.reshape(*lead, T, H // f, f, W // f, f, C)
        n = len(lead)
        perm = list(range(n)) + [n, n + 1, n + 3, n + 2, n + 4, n + 5]
        return x.permute(perm).reshape(*lead, T, H // f, W // f, f * f * C)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        *lead, T, h, w, D = z.shape
        f = self.factor
        C = D // (f * f)
        x = z.reshape(*lead, T, h, w, f, f, C)
        n = len(lead)
        perm = list(range(n)) + [n, n + 1, n + 3, n + 2, n + 4, n + 5]
        return x.permute(perm).reshape(*lead, T, h * f, w * f, C)


def make_codec(name: str = "identity", factor: int = 2):
    if name == "identity":
        return IdentityCodec()
    if name == "space_to_depth":
        return SpaceToDepthCodec(factor)
    raise ValueError(f"unknown codec {name!r}")
