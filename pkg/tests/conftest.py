"""Shared fixtures for the trained-model suites.

Trained checkpoints are cached under ``$VIDMASK_ACCEPT_CACHE`` (default
``<repo>/.acceptance_cache``), keyed by a hash of everything that shapes the
training run, so only the first run pays for training.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from vidmask.analytic import default_linear_gaussian, to_latent
from vidmask.backbone import BackboneConfig, VideoDenoiser, load_checkpoint, save_checkpoint
from vidmask.codec import SpaceToDepthCodec
from vidmask.config import ExperimentConfig
from vidmask.masking import policy_for_ratio
from vidmask.shapes import TemporalShapesSpec, generate_temporal_shapes, split_dataset
from vidmask.training import TrainConfig, train

CACHE = Path(os.environ.get("VIDMASK_ACCEPT_CACHE", Path(__file__).resolve().parents[1] / ".acceptance_cache"))
SEEDS = (0, 1, 2)
N_VIDEOS = 6000
STEPS = 5000

DESK = ExperimentConfig().backbone
LG_BACKBONE = BackboneConfig(
    latent_channels=2, num_frames=4, arch="mlp", mlp_hidden=256, mlp_depth=3, num_classes=2, emb_dim=32, pool_dim=32
)

log = logging.getLogger("acceptance")
RESULTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str):
    RESULTS[criterion] = (bool(ok), detail)
    print(f"CRITERION {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"CRITERION {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def ts_train_config(kind: str, seed: int) -> TrainConfig:
    extra = {}
    phase = kind
    if kind == "joint875":
        p = policy_for_ratio(0.875, 16)
        extra = dict(min_hidden=p.min_hidden, max_hidden=p.max_hidden)
        phase = "joint"
    return TrainConfig(
        phase=phase, steps=STEPS, batch_size=32, lr=1e-3, min_lr=1e-5, warmup_epochs=1, head_lr_mult=10, seed=seed,
        log_every=100, **extra,
    )


def _key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def cached_model(name: str, backbone: BackboneConfig, tcfg: TrainConfig, data_key: str, make_data):
    key = _key({"name": name, "backbone": backbone.to_dict(), "train": tcfg.to_dict(), "data": data_key, "torch": torch.__version__})
    path = CACHE / f"{name}-{key}.pt"
    if path.exists():
        model, _ = load_checkpoint(path, expected=backbone)
        return model.eval()
    latents, labels = make_data()
    torch.manual_seed(tcfg.seed)
    model = VideoDenoiser(backbone)
    log.warning("training %s (cache miss: %s)", name, path)
    train(model, latents, labels, tcfg, progress=True)
    CACHE.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(tmp, model, extra={"train": tcfg.to_dict()})
    tmp.replace(path)
    return model.eval()


class ShapesData:
    def __init__(self):
        self.spec = TemporalShapesSpec()
        self.codec = SpaceToDepthCodec(2)
        splits = split_dataset(generate_temporal_shapes(self.spec, N_VIDEOS, seed=0))
        self.train, self.val, self.test = splits["train"], splits["val"], splits["test"]
        self.train_latents = self.codec.encode(torch.from_numpy(self.train.videos))
        self.test_latents = self.codec.encode(torch.from_numpy(self.test.videos))
        self.key = f"{self.spec.hash()}-{N_VIDEOS}-0"


@pytest.fixture(scope="session")
def shapes():
    return ShapesData()


@pytest.fixture(scope="session")
def ts_models(shapes):
    """``ts_models(kind, seed)`` -> trained desk model; kinds: joint, cls_only, joint875."""
    memo = {}

    def get(kind: str, seed: int):
        if (kind, seed) not in memo:
            memo[kind, seed] = cached_model(
                f"ts_{kind}_s{seed}", DESK, ts_train_config(kind, seed), shapes.key,
                lambda: (shapes.train_latents, torch.from_numpy(shapes.train.labels)),
            )
        return memo[kind, seed]

    return get


@pytest.fixture(scope="session")
def lg_spec():
    return default_linear_gaussian(2)


@pytest.fixture(scope="session")
def lg_model(lg_spec):
    tcfg = TrainConfig(
        steps=4000, batch_size=512, lr=2e-3, min_lr=1e-5, warmup_epochs=0.5, p_mean=0.0, p_std=1.6, head_lr_mult=1.0,
        weight_decay=0.0, log_every=1000,
    )

    def data():
        z, y = lg_spec.sample(200000, np.random.default_rng(0))
        return to_latent(torch.tensor(z, dtype=torch.float32), lg_spec), torch.as_tensor(y)

    return cached_model("lg_mlp", LG_BACKBONE, tcfg, f"lg-{_key({'means': lg_spec.means.tolist()})}-200000-0", data)
