from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from vidmask.masking import (
    MaskPolicy,
    apply_mask,
    mask_for_observation_ratio,
    mask_for_sparse_frames,
    policy_for_ratio,
    sample_mask,
    sample_masks,
    sparse_positions,
)


def test_default_policy_mean_hidden_fraction():
    masks = sample_masks(MaskPolicy(), 16, 10**5, np.random.default_rng(0))
    hidden = (~masks).sum(1)
    assert hidden.mean() / 16 == pytest.approx(0.75, abs=0.005)
    assert MaskPolicy().expected_hidden_fraction(16) == 0.75


def test_default_policy_hidden_count_uniform():
    masks = sample_masks(MaskPolicy(), 16, 10**5, np.random.default_rng(1))
    counts = np.bincount((~masks).sum(1), minlength=17)
    assert counts[:8].sum() == 0
    assert stats.chisquare(counts[8:]).pvalue > 0.01


def test_hidden_positions_uniform():
    masks = sample_masks(MaskPolicy(), 16, 20000, np.random.default_rng(2))
    per_frame = (~masks).mean(0)
    np.testing.assert_allclose(per_frame, 0.75, atol=0.02)


def test_first_frame_only():
    m = sample_mask(MaskPolicy("first_frame_only"), 16, 0)
    assert m[0] and not m[1:].any()


def test_all_hidden_and_visible():
    assert not sample_mask(MaskPolicy("all_hidden"), 16, 0).any()
    assert sample_mask(MaskPolicy("all_visible"), 16, 0).all()


def test_prefix_and_uniform_policies():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m = sample_mask(MaskPolicy("prefix"), 16, rng)
        n = m.sum()
        assert m[:n].all() and not m[n:].any()
        u = sample_mask(MaskPolicy("uniform_stride"), 16, rng)
        if u.sum() >= 2:
            assert u[0] and u[-1]


def test_policy_bounds_errors():
    with pytest.raises(ValueError):
        sample_mask(MaskPolicy(min_hidden=10, max_hidden=20), 16, 0)
    with pytest.raises(ValueError):
        MaskPolicy(min_hidden=5, max_hidden=3).bounds(16)
    with pytest.raises(ValueError):
        MaskPolicy("spatial")


def test_policy_for_ratio():
    assert policy_for_ratio(0.75, 16).bounds(16) == (8, 16)
    p = policy_for_ratio(0.875, 16)
    assert p.bounds(16) == (12, 16) and p.expected_hidden_fraction(16) == 0.875
    with pytest.raises(ValueError):
        policy_for_ratio(0.3, 16)


@given(st.integers(1, 32), st.data())
def test_random_subset_respects_bounds(T, data):
    lo = data.draw(st.integers(0, T))
    hi = data.draw(st.integers(lo, T))
    m = sample_mask(MaskPolicy("random_subset", lo, hi), T, data.draw(st.integers(0, 2**31)))
    assert m.shape == (T,) and lo <= (~m).sum() <= hi


# apply_mask


def test_apply_mask_all_visible():
    z = torch.randn(16, 4, 4, 2)
    assert torch.equal(apply_mask(z, np.ones(16, bool)), z)


def test_apply_mask_all_hidden():
    z = torch.randn(16, 4, 4, 2)
    assert torch.equal(apply_mask(z, np.zeros(16, bool)), torch.zeros_like(z))


def test_apply_mask_alternating():
    z = torch.randn(16, 4, 4, 2)
    m = np.arange(16) % 2 == 0
    out = apply_mask(z, m)
    assert torch.equal(out[0::2], z[0::2])
    assert torch.equal(out[1::2], torch.zeros_like(z[1::2]))


def test_apply_mask_batched_per_sample():
    z = torch.randn(3, 16, 2, 2, 1)
    m = np.zeros((3, 16), bool)
    m[0, 0] = m[1, 5] = m[2] = True
    out = apply_mask(z, m)
    assert torch.equal(out[0, 0], z[0, 0]) and out[0, 1:].abs().sum() == 0
    assert torch.equal(out[2], z[2])


def test_apply_mask_length_mismatch():
    with pytest.raises(ValueError):
        apply_mask(torch.zeros(16, 2, 2, 1), np.ones(15, bool))


@given(st.lists(st.booleans(), min_size=1, max_size=20), st.integers(0, 1000))
def test_apply_mask_idempotent_and_exact(bits, seed):
    m = np.array(bits)
    z = torch.randn(len(bits), 2, 3, 2, generator=torch.Generator().manual_seed(seed))
    once = apply_mask(z, m)
    assert torch.equal(apply_mask(once, m), once)
    assert torch.equal(once[torch.from_numpy(m)], z[torch.from_numpy(m)])


# protocol masks


def test_observation_ratio_examples():
    assert mask_for_observation_ratio(1.0, 16).all()
    np.testing.assert_array_equal(np.flatnonzero(mask_for_observation_ratio(0.5, 16)), np.arange(8))
    np.testing.assert_array_equal(np.flatnonzero(mask_for_observation_ratio(0.1, 16)), [0])
    assert mask_for_observation_ratio(0.3, 10).sum() == 3
    assert mask_for_observation_ratio(0.01, 16).sum() == 1


@pytest.mark.parametrize("rho", [0.0, -0.1, 1.01])
def test_observation_ratio_range(rho):
    with pytest.raises(ValueError):
        mask_for_observation_ratio(rho, 16)


@given(st.floats(0.001, 1.0), st.integers(1, 64))
def test_observation_ratio_is_prefix(rho, T):
    m = mask_for_observation_ratio(rho, T)
    n = m.sum()
    assert n >= 1 and m[:n].all() and not m[n:].any()


def test_sparse_examples():
    assert mask_for_sparse_frames(16, 16).all()
    assert sparse_positions(2, 16) == [0, 15]
    assert sparse_positions(4, 16) == [0, 5, 10, 15]
    assert sparse_positions(3, 16) == [0, 8, 15]  # 7.5 rounds up
    assert sparse_positions(1, 16) == [0]


@pytest.mark.parametrize("k", [0, 17])
def test_sparse_range(k):
    with pytest.raises(ValueError):
        mask_for_sparse_frames(k, 16)


@given(st.integers(1, 64), st.data())
def test_sparse_exact_count(T, data):
    k = data.draw(st.integers(1, T))
    assert mask_for_sparse_frames(k, T).sum() == k


def test_full_observation_protocols_agree():
    np.testing.assert_array_equal(mask_for_observation_ratio(1.0, 16), mask_for_sparse_frames(16, 16))
