"""Per-frame visibility masks for conditioning on arbitrary frame subsets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

MASK_MODES = ("random_subset", "prefix", "uniform_stride", "all_visible", "all_hidden", "first_frame_only")


@dataclass(frozen=True)
class MaskPolicy:
    """How training masks are drawn.

    ``min_hidden``/``max_hidden`` of ``None`` mean "half the frames, rounded
    up" and "all frames". ``prefix`` and ``uniform_stride`` draw the hidden
    count the same way and keep the visible frames at the front or spread
    evenly.
    """

    mode: str = "random_subset"
    min_hidden: int | None = None
    max_hidden: int | None = None

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}; expected one of {MASK_MODES}")

    def bounds(self, T: int) -> tuple[int, int]:
        lo = math.ceil(T / 2) if self.min_hidden is None else self.min_hidden
        hi = T if self.max_hidden is None else self.max_hidden
        if not 0 <= lo <= hi <= T:
            raise ValueError(f"need 0 <= min_hidden <= max_hidden <= T; got {lo}, {hi}, T={T}")
        return lo, hi

    def expected_hidden_fraction(self, T: int) -> float:
        if self.mode == "all_visible":
            return 0.0
        if self.mode == "all_hidden":
            return 1.0
        if self.mode == "first_frame_only":
            return (T - 1) / T
        lo, hi = self.bounds(T)
        return (lo + hi) / 2 / T


def policy_for_ratio(ratio: float, T: int) -> MaskPolicy:
    """Random-subset policy whose expected hidden fraction is ``ratio``.

    The hidden count is uniform on ``{lo, ..., T}`` with ``lo = 2 ratio T - T``,
    so 0.75 gives the default ``{T/2, ..., T}`` and 0.875 gives ``{3T/4, ..., T}``.
    """
    lo = 2 * ratio * T - T
    if abs(lo - round(lo)) > 1e-9 or not 0 <= lo <= T:
        raise ValueError(f"ratio {ratio} is not reachable with T={T} frames")
    return MaskPolicy("random_subset", int(round(lo)), T)


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_mask(policy: MaskPolicy, T: int, rng) -> np.ndarray:
    """Draw one boolean mask of length ``T`` (True = frame given as condition)."""
    rng = _rng(rng)
    if policy.mode == "all_visible":
        return np.ones(T, dtype=bool)
    if policy.mode == "all_hidden":
        return np.zeros(T, dtype=bool)
    if policy.mode == "first_frame_only":
        m = np.zeros(T, dtype=bool)
        m[0] = True
        return m
    lo, hi = policy.bounds(T)
    n_hidden = int(rng.integers(lo, hi + 1))
    n_vis = T - n_hidden
    if policy.mode == "prefix":
        return np.arange(T) < n_vis
    if policy.mode == "uniform_stride":
        return mask_for_sparse_frames(n_vis, T) if n_vis else np.zeros(T, dtype=bool)
    m = np.ones(T, dtype=bool)
    m[rng.choice(T, size=n_hidden, replace=False)] = False
    return m


def sample_masks(policy: MaskPolicy, T: int, n: int, rng) -> np.ndarray:
    rng = _rng(rng)
    return np.stack([sample_mask(policy, T, rng) for _ in range(n)])


def apply_mask(z0, mask):
    """Zero out hidden frames of a ``[..., T, h, w, D]`` latent.

    ``mask`` has shape ``[T]`` or ``[B, T]`` for a batched latent.
    """
    m = mask.bool() if torch.is_tensor(mask) else torch.from_numpy(np.array(mask, dtype=bool))
    T = z0.shape[-4]
    if m.shape[-1] != T:
        raise ValueError(f"mask length {m.shape[-1]} != number of frames {T}")
    m = m.to(z0.device).reshape(m.shape + (1, 1, 1))
    return torch.where(m, z0, torch.zeros((), dtype=z0.dtype, device=z0.device))


def mask_for_observation_ratio(rho: float, T: int) -> np.ndarray:
    """Prefix mask keeping the first ``max(1, floor(rho T))`` frames."""
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    # tolerate floating noise such as 0.3 * 10 = 2.9999999999999996
    n = max(1, math.floor(rho * T + 1e-9))
    return np.arange(T) < n


def sparse_positions(k: int, T: int) -> list[int]:
    if not 1 <= k <= T:
        raise ValueError(f"k must lie in [1, {T}], got {k}")
    if k == 1:
        return [0]
    # round half up; numpy's banker's rounding would move some positions
    return [int(math.floor(i * (T - 1) / (k - 1) + 0.5)) for i in range(k)]


def mask_for_sparse_frames(k: int, T: int) -> np.ndarray:
    """``k`` visible frames at an endpoint-inclusive uniform stride."""
    m = np.zeros(T, dtype=bool)
    m[sparse_positions(k, T)] = True
    return m
