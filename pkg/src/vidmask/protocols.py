"""Evaluation protocols: early prediction, sparse frames, generation-vs-recognition, guidance."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .masking import mask_for_observation_ratio, mask_for_sparse_frames
from .metrics import retention_curve, top1_accuracy
from .recognition import RecognitionConfig, classify_full, classify_partial, predict
from .sampler import SamplerConfig, sample

RHO_GRID = (0.1, 0.3, 0.5, 0.7, 1.0)
K_GRID = (2, 3, 4, 16)
CSV_FIELDS = ("protocol", "sweep_var", "sweep_value", "metric_name", "metric_value", "n", "seed")


@dataclass(frozen=True)
class MetricRecord:
    protocol: str
    sweep_var: str
    sweep_value: float
    metric_name: str
    metric_value: float
    n: int
    seed: int


def partial_accuracy(model, latents, labels, mask, seed: int = 0) -> float:
    pred, _ = predict(classify_partial(latents, mask, model, seed))
    return top1_accuracy(pred, np.asarray(labels))


def full_accuracy(model, latents, labels, config: RecognitionConfig | None = None) -> float:
    pred, _ = predict(classify_full(latents, config or RecognitionConfig(), model))
    return top1_accuracy(pred, np.asarray(labels))


def _sweep(protocol, var, values, masks, model, latents, labels, seed):
    acc = {v: partial_accuracy(model, latents, labels, m, seed) for v, m in zip(values, masks)}
    full_key = max(values)
    ret = retention_curve(acc, acc[full_key]) if acc[full_key] > 0 else {v: float("nan") for v in values}
    n = len(labels)
    out = []
    for v in values:
        out.append(MetricRecord(protocol, var, float(v), "accuracy", acc[v], n, seed))
        out.append(MetricRecord(protocol, var, float(v), "retention", ret[v], n, seed))
    return out


def run_early_prediction_sweep(model, latents, labels, rho_grid=RHO_GRID, seed: int = 0) -> list[MetricRecord]:
    """Prefix masks keeping ``max(1, floor(rho T))`` frames; retention is relative to the largest rho."""
    T = latents.shape[1]
    return _sweep("early", "rho", rho_grid, [mask_for_observation_ratio(r, T) for r in rho_grid], model, latents, labels, seed)


def run_sparse_sweep(model, latents, labels, k_grid=K_GRID, seed: int = 0) -> list[MetricRecord]:
    T = latents.shape[1]
    return _sweep("sparse", "k", k_grid, [mask_for_sparse_frames(k, T) for k in k_grid], model, latents, labels, seed)


def generate_with_mask(model, latents, mask, config: SamplerConfig, batch_size: int = 250, target=None):
    """Condition on the visible frames of every video in ``latents``; one sample each."""
    outs = []
    for b, start in enumerate(range(0, len(latents), batch_size)):
        sl = slice(start, start + batch_size)
        cfg = SamplerConfig(**{**config.to_dict(), "seed": config.seed * 7919 + b})
        tgt = None if target is None else torch.as_tensor(target)[sl]
        outs.append(sample(mask, latents[sl], cfg, tgt, model))
    return torch.cat(outs)


def run_generation_difficulty_sweep(
    model,
    latents,
    labels,
    masks: dict,
    *,
    codec,
    extractor,
    sampler_config: SamplerConfig | None = None,
    reference_videos=None,
    seed: int = 0,
) -> list[MetricRecord]:
    """Partial-frame accuracy and toy FVD of mask-conditioned generations for each named mask.

    FVD compares decoded generations with ``reference_videos`` (defaults to
    the decoded conditioning videos themselves).
    """
    from .fvd import toy_fvd

    sampler_config = sampler_config or SamplerConfig(seed=seed)
    ref = codec.decode(latents) if reference_videos is None else torch.as_tensor(reference_videos)
    out = []
    n = len(labels)
    for name, mask in masks.items():
        vis = int(np.sum(mask))
        acc = partial_accuracy(model, latents, labels, mask, seed)
        gen = codec.decode(generate_with_mask(model, latents, mask, sampler_config)).clamp(-1, 1)
        fvd = toy_fvd(gen, ref, extractor)
        out.append(MetricRecord(f"genrel:{name}", "visible_frames", float(vis), "accuracy", acc, n, seed))
        out.append(MetricRecord(f"genrel:{name}", "visible_frames", float(vis), "fvd", fvd, n, seed))
    return out


def run_guidance_sweep(model, latents, s_grid=(0.0, 1.0, 2.0, 4.0), *, mask=None, sampler_config=None, seed: int = 0,
                       recognition: RecognitionConfig | None = None) -> list[MetricRecord]:
    """Rate at which guided generations are recognised as their target class.

    Targets are drawn uniformly per sample from ``seed``; each generation is
    scored by the same model's full-video path on the clean output.
    """
    T = latents.shape[1]
    mask = np.eye(1, T, dtype=bool)[0] if mask is None else mask
    num_classes = model.cfg.num_classes
    targets = np.random.default_rng(seed).integers(0, num_classes, size=len(latents))
    out = []
    for s in s_grid:
        cfg = SamplerConfig(**{**(sampler_config or SamplerConfig()).to_dict(), "guidance_scale_s": float(s), "seed": seed})
        gen = generate_with_mask(model, latents, mask, cfg, target=targets)
        pred, _ = predict(classify_full(gen, recognition or RecognitionConfig(seed=seed), model))
        out.append(MetricRecord("guidance", "s", float(s), "target_rate", float(np.mean(pred == targets)), len(latents), seed))
    return out


def point_records(records) -> list[dict]:
    """Collapse metric rows into one JSON-ready record per protocol point."""
    points: dict = {}
    for r in records:
        key = (r.protocol, r.sweep_value)
        p = points.setdefault(key, {"protocol": r.protocol, "rho_or_k": r.sweep_value, "n_samples": r.n, "seed": r.seed})
        p[r.metric_name] = r.metric_value
    return list(points.values())


def write_csv(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.protocol, r.sweep_var, repr(float(r.sweep_value)), r.metric_name, repr(float(r.metric_value)), r.n, r.seed])
    return path


def read_csv(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricRecord(r["protocol"], r["sweep_var"], float(r["sweep_value"]), r["metric_name"], float(r["metric_value"]), int(r["n"]), int(r["seed"]))
        for r in rows
    ]


def emit_plots(records, out_dir) -> list[Path]:
    """Write ``metrics.csv`` plus one PNG per (protocol, metric) into ``out_dir``."""
    records = list(records)
    if not records:
        raise ValueError("no records to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_csv(records, out_dir / "metrics.csv")]
    groups: dict = {}
    for r in records:
        groups.setdefault((r.protocol, r.metric_name, r.sweep_var), []).append(r)
    for (proto, metric, var), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r.sweep_value)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([r.sweep_value for r in rows], [r.metric_value for r in rows], marker="o")
        ax.set_xlabel(var)
        ax.set_ylabel(metric)
        ax.set_title(proto)
        fig.tight_layout()
        name = f"{proto.replace(':', '_')}__{metric}.png"
        fig.savefig(out_dir / name, dpi=80)
        plt.close(fig)
        written.append(out_dir / name)
    return written
