from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from vidmask.backbone import BackboneConfig, VideoDenoiser
from vidmask.edm import Preconditioner
from vidmask.objectives import (
    DEFAULT_GAMMA,
    DEFAULT_P_DROP,
    classification_loss,
    condition_dropout,
    generative_loss,
    total_loss,
)
from vidmask.training import TrainConfig, compute_losses, make_optimizer, step_generators

PRE = Preconditioner(0.5)


def test_generative_loss_perfect():
    z = torch.randn(2, 4, 2, 2, 1)
    assert float(generative_loss(z, z.clone(), 1.0, PRE)) == 0.0


def test_generative_loss_scalar_case():
    # lambda(1) = 5 for sigma_data 0.5
    assert generative_loss(np.zeros(1), np.ones(1), 1.0, PRE) == pytest.approx(5.0)


def test_generative_loss_per_sample_sigma():
    z = torch.zeros(2, 4, 1, 1, 1)
    d = torch.ones_like(z)
    sig = torch.tensor([1.0, 0.5])
    per = generative_loss(z, d, sig, PRE, reduce=False)
    assert torch.allclose(per, torch.tensor([5.0, 8.0]))
    assert float(generative_loss(z, d, sig, PRE)) == pytest.approx(6.5)


def test_generative_loss_errors():
    z = torch.zeros(4, 1, 1, 1)
    with pytest.raises(ValueError):
        generative_loss(z, z, 0.0, PRE)
    with pytest.raises(ValueError):
        generative_loss(z, torch.zeros(3, 1, 1, 1), 1.0, PRE)


def test_generative_loss_frame_permutation_invariant():
    g = torch.Generator().manual_seed(0)
    z, d = torch.randn(16, 2, 2, 1, generator=g), torch.randn(16, 2, 2, 1, generator=g)
    perm = torch.randperm(16, generator=g)
    assert float(generative_loss(z, d, 0.8, PRE)) == pytest.approx(float(generative_loss(z[perm], d[perm], 0.8, PRE)), rel=1e-6)


def test_classification_loss_examples():
    assert float(classification_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[80.0, -80.0]]))) == pytest.approx(0.0, abs=1e-6)
    assert float(classification_loss(torch.eye(4)[:1], torch.zeros(1, 4))) == pytest.approx(math.log(4), abs=1e-6)
    val = classification_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[math.log(3), 0.0]]))
    assert float(val) == pytest.approx(-math.log(0.75), abs=1e-6)


def test_classification_loss_index_labels_match_one_hot():
    logits = torch.randn(5, 3)
    y = torch.tensor([0, 2, 1, 1, 0])
    assert torch.allclose(classification_loss(y, logits), classification_loss(torch.eye(3)[y], logits))


def test_classification_loss_dimension_mismatch():
    with pytest.raises(ValueError):
        classification_loss(torch.eye(3)[:2], torch.zeros(2, 4))


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.data())
def test_classification_loss_nonnegative(logits, data):
    y = data.draw(st.integers(0, len(logits) - 1))
    val = float(classification_loss(torch.tensor([y]), torch.tensor([logits], dtype=torch.float64)))
    p = torch.softmax(torch.tensor(logits, dtype=torch.float64), 0)[y]
    assert val >= 0
    if val < 1e-6:
        assert float(p) > 1 - 1e-6


def test_total_loss_examples():
    assert DEFAULT_GAMMA == 10
    out = total_loss(0.5, 1.0)
    assert out.total == 6.0 and out.gamma == 10
    assert total_loss(0.7, 1.3, 0.0).total == 1.3


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0.001, 100), st.floats(0, 10))
def test_total_loss_linear(gen, cls, gamma, k):
    a = total_loss(gen, cls, gamma).total
    assert total_loss(gen + k, cls, gamma).total - a == pytest.approx(gamma * k, rel=1e-9, abs=1e-9)
    assert total_loss(gen, cls + k, gamma).total - a == pytest.approx(k, rel=1e-9, abs=1e-9)


def test_condition_dropout_extremes():
    z = torch.randn(8, 4, 2, 2, 1)
    out, dropped = condition_dropout(z, 0, 0.0)
    assert torch.equal(out, z) and not dropped.any()
    out, dropped = condition_dropout(z, 0, 1.0)
    assert torch.equal(out, torch.zeros_like(z)) and dropped.all()


def test_condition_dropout_frequency():
    assert DEFAULT_P_DROP == 0.10
    z = torch.ones(10**5, 1, 1, 1, 1)
    out, dropped = condition_dropout(z, np.random.default_rng(0))
    assert dropped.mean() == pytest.approx(0.10, abs=0.005)
    assert float(out.mean()) == pytest.approx(1 - dropped.mean())


def test_condition_dropout_invalid():
    with pytest.raises(ValueError):
        condition_dropout(torch.zeros(4, 1, 1, 1), 0, 1.5)


def test_condition_dropout_unbatched():
    z = torch.randn(4, 2, 2, 1)
    out, dropped = condition_dropout(z, 0, 1.0)
    assert dropped is True and torch.equal(out, torch.zeros_like(z))


def tiny_model(**kw):
    torch.manual_seed(0)
    cfg = BackboneConfig(num_frames=4, base_channels=8, channel_multipliers=(1, 1, 1, 1), emb_dim=16, pool_dim=16, num_classes=3, **kw)
    return VideoDenoiser(cfg)


def test_joint_step_reaches_both_parameter_groups():
    model = tiny_model()
    # break the zero init of the output layer so the tail receives a nonzero gradient path
    torch.nn.init.normal_(model.backbone.conv_out.weight, std=0.1)
    cfg = TrainConfig(phase="joint", batch_size=4)
    z0 = torch.randn(4, 4, 8, 8, 1)
    labels = torch.tensor([0, 1, 2, 0])
    rng, tgen = step_generators(0, 0)
    losses, _ = compute_losses(model, z0, labels, cfg, rng, tgen)
    losses.total.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.backbone.parameters())
    assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in model.head.parameters())
    assert model.backbone.conv_out.weight.grad.abs().sum() > 0
    assert float(losses.total.detach()) == pytest.approx(float(losses.cls_loss.detach()) + 10 * float(losses.gen_loss.detach()), rel=1e-6)


def test_phase_selects_loss_terms():
    model = tiny_model()
    z0 = torch.randn(4, 4, 8, 8, 1)
    labels = torch.tensor([0, 1, 2, 0])
    gen_only, _ = compute_losses(model, z0, labels, TrainConfig(phase="gen_only"), *step_generators(0, 0))
    assert float(gen_only.cls_loss) == 0 and float(gen_only.total.detach()) == pytest.approx(10 * float(gen_only.gen_loss.detach()))
    cls_only, _ = compute_losses(model, z0, labels, TrainConfig(phase="cls_only"), *step_generators(0, 0))
    assert float(cls_only.gen_loss) == 0 and float(cls_only.total.detach()) == float(cls_only.cls_loss.detach())


def test_head_lr_multiplier():
    model = tiny_model()
    opt = make_optimizer(model, TrainConfig(lr=1e-4))
    lrs = sorted(g["lr"] for g in opt.param_groups)
    assert lrs == pytest.approx([1e-4, 1e-3])


def test_probe_freezes_backbone():
    model = tiny_model()
    opt = make_optimizer(model, TrainConfig(phase="cls_only", freeze_backbone=True))
    assert len(opt.param_groups) == 1
    assert not any(p.requires_grad for p in model.backbone.parameters())
    with pytest.raises(ValueError):
        TrainConfig(phase="joint", freeze_backbone=True)
