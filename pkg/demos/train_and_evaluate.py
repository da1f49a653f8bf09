"""Train a desk-scale joint model on TemporalShapes and run the recognition sweeps.

Roughly 4 minutes per 1000 steps on one CPU core. Pass the step count as the
first argument (default 1000) and an output directory as the second.

    python3 demos/train_and_evaluate.py 1000 /tmp/demo_run
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import torch

from vidmask.backbone import VideoDenoiser
from vidmask.config import ExperimentConfig
from vidmask.protocols import emit_plots, full_accuracy, run_early_prediction_sweep, run_sparse_sweep
from vidmask.shapes import generate_temporal_shapes, split_dataset
from vidmask.training import TrainConfig, train


def main(steps="1000", out_dir="demo_run"):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = ExperimentConfig()
    codec = cfg.data.make_codec()
    splits = split_dataset(generate_temporal_shapes(cfg.data.shapes_spec(), 6000, seed=0))
    train_lat = codec.encode(torch.from_numpy(splits["train"].videos))
    test_lat = codec.encode(torch.from_numpy(splits["test"].videos))
    labels = splits["test"].labels

    tcfg = TrainConfig(steps=int(steps), lr=1e-3, min_lr=1e-5, warmup_epochs=1, log_every=100)
    torch.manual_seed(0)
    model = VideoDenoiser(cfg.backbone)
    train(model, train_lat, torch.from_numpy(splits["train"].labels), tcfg, run_dir=out_dir, progress=True)

    print(f"full-video top-1: {full_accuracy(model, test_lat, labels):.3f}")
    records = run_early_prediction_sweep(model, test_lat, labels) + run_sparse_sweep(model, test_lat, labels)
    for r in records:
        if r.metric_name == "accuracy":
            print(f"{r.protocol:>6s} {r.sweep_var}={r.sweep_value:g}: {r.metric_value:.3f}")
    for path in emit_plots(records, Path(out_dir) / "eval"):
        print("wrote", path)


if __name__ == "__main__":
    main(*sys.argv[1:])
