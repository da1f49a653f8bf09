"""Command-line entry point: ``vidmask <command> ...``.

Exit codes: 0 success, 2 usage, 3 config, 4 I/O, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from .backbone import CheckpointError, VideoDenoiser, load_checkpoint
from .config import ConfigError, ExperimentConfig, resolve_config
from .datasets import DatasetFormatError, load_dataset, read_header, save_dataset
from .masking import mask_for_observation_ratio, mask_for_sparse_frames
from .metrics import MatrixSqrtError

log = logging.getLogger("vidmask")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5
PROTOCOLS = ("full", "early", "sparse", "genrel", "fvd", "guidance")
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class LockError(OSError):
    pass


# ---------------------------------------------------------------- helpers


def _config(args) -> ExperimentConfig:
    return resolve_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def _split_path(data_dir, split) -> Path:
    return Path(data_dir) / f"{split}.npz"


def _load_split(data_dir, split, cfg: ExperimentConfig):
    ds = load_dataset(_split_path(data_dir, split), expected_spec_hash=cfg.data.shapes_spec().hash())
    return ds, cfg.data.make_codec().encode(torch.from_numpy(ds.videos))


def _prepare_out_dir(path: Path, overwrite: bool):
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise FileExistsError(f"{path} exists and is not empty; pass --overwrite to replace its contents")
    path.mkdir(parents=True, exist_ok=True)


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive ownership of a run directory for one training process."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / "train.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{run_dir} is locked by another training process (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def parse_mask(text: str, T: int) -> np.ndarray:
    """``first`` | ``first_last`` | ``all`` | ``none`` | ``prefix:N`` | ``sparse:K`` | ``rho:R`` | ``frames:0,5,9``."""
    kind, _, arg = text.partition(":")
    try:
        if kind == "first":
            m = np.zeros(T, bool)
            m[0] = True
        elif kind == "first_last":
            m = np.zeros(T, bool)
            m[[0, T - 1]] = True
        elif kind == "all":
            m = np.ones(T, bool)
        elif kind == "none":
            m = np.zeros(T, bool)
        elif kind == "prefix":
            m = np.arange(T) < int(arg)
        elif kind == "sparse":
            m = mask_for_sparse_frames(int(arg), T)
        elif kind == "rho":
            m = mask_for_observation_ratio(float(arg), T)
        elif kind == "frames":
            m = np.zeros(T, bool)
            m[[int(i) for i in arg.split(",")]] = True
        else:
            raise UsageError(f"unknown mask kind {kind!r}")
    except (ValueError, IndexError) as exc:
        raise UsageError(f"bad mask {text!r}: {exc}") from exc
    return m


def _model_and_config(checkpoint) -> tuple[VideoDenoiser, ExperimentConfig, dict]:
    model, payload = load_checkpoint(checkpoint)
    model.eval()
    exp = payload.get("extra", {}).get("experiment")
    cfg = ExperimentConfig.from_dict(exp) if exp else ExperimentConfig()
    return model, cfg, payload


def _limit(ds, latents, n):
    if n and n < len(ds):
        return ds.subset(np.arange(n)), latents[:n]
    return ds, latents


# ---------------------------------------------------------------- commands


def cmd_data_gen(args) -> int:
    from .shapes import generate_temporal_shapes, split_dataset

    cfg = _config(args)
    out = Path(args.out or Path(cfg.out_dir) / "data")
    _prepare_out_dir(out, args.overwrite)
    spec = cfg.data.shapes_spec()
    splits = split_dataset(generate_temporal_shapes(spec, cfg.data.n, seed=cfg.data.seed))
    manifest = {"spec": spec.to_dict(), "spec_hash": spec.hash(), "seed": cfg.data.seed, "splits": {}}
    for name, ds in splits.items():
        p = save_dataset(ds, _split_path(out, name))
        manifest["splits"][name] = {"file": p.name, "n": len(ds), "class_counts": np.bincount(ds.labels, minlength=spec.num_classes).tolist()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps({name: v["n"] for name, v in manifest["splits"].items()}))
    return EXIT_OK


def cmd_data_inspect(args) -> int:
    header = read_header(args.path)
    ds = load_dataset(args.path)
    header["class_counts"] = np.bincount(ds.labels, minlength=len(ds.class_names)).tolist()
    header["value_range"] = [float(ds.videos.min()), float(ds.videos.max())] if len(ds) else None
    print(json.dumps(header, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, make_optimizer, train

    cfg = _config(args)
    run_dir = Path(args.run_dir or cfg.out_dir)
    ckpt = run_dir / "checkpoint.pt"
    overrides = {"phase": args.phase}
    if args.probe:
        overrides.update(phase="cls_only", freeze_backbone=True)
    if args.steps is not None:
        overrides["steps"] = args.steps
    obj = {**cfg.objectives.to_dict(), **overrides}
    cfg.objectives = TrainConfig(**obj)
    with run_lock(run_dir):
        start, optimizer = 0, None
        if args.resume:
            if not ckpt.exists():
                raise FileNotFoundError(f"nothing to resume: {ckpt} does not exist")
            model, payload = load_checkpoint(ckpt, expected=cfg.backbone)
            stored = payload.get("extra", {}).get("config_hash")
            if stored != cfg.training_hash():
                raise ConfigError(
                    f"refusing to resume: run config hash {stored} differs from the requested config {cfg.training_hash()}"
                )
            start = int(payload["step"])
            optimizer = make_optimizer(model, cfg.objectives)
            if payload.get("optimizer"):
                optimizer.load_state_dict(payload["optimizer"])
        else:
            if ckpt.exists() and not args.overwrite:
                raise FileExistsError(f"{ckpt} exists; pass --resume to continue or --overwrite to start over")
            if args.overwrite:
                for name in ("checkpoint.pt", "metrics.jsonl"):
                    (run_dir / name).unlink(missing_ok=True)
            torch.manual_seed(cfg.objectives.seed)
            if args.init:
                model, _ = load_checkpoint(args.init, expected=cfg.backbone)
            else:
                model = VideoDenoiser(cfg.backbone)
        cfg.dump(run_dir / "config.yaml")
        ds, latents = _load_split(args.data, "train", cfg)
        extra = {"experiment": cfg.to_dict(), "config_hash": cfg.training_hash()}
        state = train(
            model,
            latents,
            torch.from_numpy(ds.labels),
            cfg.objectives,
            run_dir=run_dir,
            optimizer=optimizer,
            start_step=start,
            stop_step=args.stop_step,
            progress=True,
            ckpt_extra=extra,
        )
    print(json.dumps({"run_dir": str(run_dir), "step": state.step}))
    return EXIT_OK


def cmd_sample(args) -> int:
    from .sampler import SamplerConfig, sample
    from .shapes import quantize

    model, cfg, _ = _model_and_config(args.checkpoint)
    if args.cls is not None and not 0 <= args.cls < model.cfg.num_classes:
        raise UsageError(f"--class {args.cls} outside [0, {model.cfg.num_classes})")
    ds, latents = _load_split(args.data, args.split, cfg)
    ds, latents = _limit(ds, latents, args.n)
    mask = parse_mask(args.mask, latents.shape[1])
    scfg = {**cfg.sampler.to_dict()}
    for key in ("n_steps", "churn", "seed", "cfg_scale"):
        if getattr(args, key) is not None:
            scfg[key] = getattr(args, key)
    if args.s is not None:
        scfg["guidance_scale_s"] = args.s
    scfg = SamplerConfig(**scfg)
    target = None if args.cls is None else torch.full((len(latents),), args.cls, dtype=torch.long)
    z = sample(mask, latents, scfg, target, model)
    videos = cfg.data.make_codec().decode(z).clamp(-1, 1).numpy()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, quantize(videos))
    sidecar = {
        "checkpoint": str(args.checkpoint),
        "mask": args.mask,
        "visible_frames": np.flatnonzero(mask).tolist(),
        "class": args.cls,
        "sampler": scfg.to_dict(),
        "source_ids": ds.ids.tolist(),
        "encoding": "uint8, value = q / 127.5 - 1",
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"videos": str(out), "n": len(videos)}))
    return EXIT_OK


def cmd_classify(args) -> int:
    from .metrics import top1_accuracy
    from .recognition import classify_full, classify_partial, predict

    model, cfg, _ = _model_and_config(args.checkpoint)
    ds, latents = _load_split(args.data, args.split, cfg)
    ds, latents = _limit(ds, latents, args.n)
    if args.mask is None or (args.mask == "all" and not args.partial_path):
        logits = classify_full(latents, cfg.recognition, model)
    else:
        logits = classify_partial(latents, parse_mask(args.mask, latents.shape[1]), model, cfg.recognition.seed, cfg.recognition.sigma_max)
    pred, probs = predict(logits)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write("id,label,prediction,confidence\n")
            for i, y, p, pr in zip(ds.ids, ds.labels, pred, probs):
                fh.write(f"{i},{y},{p},{pr[p]!r}\n")
    print(json.dumps({"n": len(pred), "accuracy": top1_accuracy(pred, ds.labels)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import protocols as P

    model, cfg, _ = _model_and_config(args.checkpoint)
    ds, latents = _load_split(args.data, cfg.eval.split, cfg)
    ds, latents = _limit(ds, latents, args.n or cfg.eval.max_samples)
    labels = ds.labels
    seed = cfg.eval.seed
    proto = args.protocol
    if proto == "full":
        acc = P.full_accuracy(model, latents, labels, cfg.recognition)
        records = [P.MetricRecord("full", "frames", float(latents.shape[1]), "accuracy", acc, len(labels), seed)]
    elif proto == "early":
        records = P.run_early_prediction_sweep(model, latents, labels, tuple(cfg.eval.rho_grid), seed)
    elif proto == "sparse":
        records = P.run_sparse_sweep(model, latents, labels, tuple(cfg.eval.k_grid), seed)
    elif proto in ("genrel", "fvd"):
        from .fvd import load_extractor

        T = latents.shape[1]
        masks = {}
        for k in cfg.eval.genrel_frames:
            masks[f"prefix{k}"] = np.arange(T) < k
            if k < T:
                masks[f"uniform{k}"] = mask_for_sparse_frames(k, T)
        if proto == "fvd":
            masks = {"first": parse_mask("first", T), "all": np.ones(T, bool)}
        codec = cfg.data.make_codec()
        records = P.run_generation_difficulty_sweep(
            model, latents, labels, masks, codec=codec, extractor=load_extractor(), sampler_config=cfg.sampler, seed=seed
        )
    elif proto == "guidance":
        records = P.run_guidance_sweep(model, latents, tuple(cfg.eval.s_grid), sampler_config=cfg.sampler, seed=seed,
                                       recognition=cfg.recognition)
    else:  # argparse already restricts choices
        raise UsageError(f"unknown protocol {proto!r}; valid: {', '.join(PROTOCOLS)}")
    out = Path(args.out or Path(args.checkpoint).parent / "eval" / proto)
    written = P.emit_plots(records, out)
    (out / "points.json").write_text(json.dumps(P.point_records(records), indent=2, sort_keys=True) + "\n")
    for r in records:
        print(f"{r.protocol:>14s} {r.sweep_var}={r.sweep_value:g} {r.metric_name}={r.metric_value:.4f}")
    log.info("wrote %d files to %s", len(written), out)
    return EXIT_OK


def cmd_plots(args) -> int:
    from .protocols import emit_plots, read_csv

    records = []
    for path in args.csv:
        records.extend(read_csv(path))
    written = emit_plots(records, args.out)
    print(json.dumps([str(p) for p in written]))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_config_args(p):
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. objectives.lr=1e-3 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidmask", description="Masked video diffusion with joint recognition (toy scale).")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset generation and inspection")
    dsub = data.add_subparsers(dest="data_command", required=True)
    gen = dsub.add_parser("gen", help="generate TemporalShapes splits")
    _add_config_args(gen)
    gen.add_argument("--out", help="output directory (default: <out_dir>/data)")
    gen.add_argument("--overwrite", action="store_true")
    gen.set_defaults(func=cmd_data_gen)
    insp = dsub.add_parser("inspect", help="print a dataset file's header")
    insp.add_argument("path")
    insp.set_defaults(func=cmd_data_inspect)

    tr = sub.add_parser("train", help="train or resume a model")
    _add_config_args(tr)
    tr.add_argument("--data", required=True, help="directory written by `data gen`")
    tr.add_argument("--run-dir", help="default: out_dir from the config")
    tr.add_argument("--phase", choices=("gen_only", "joint", "cls_only"), default="joint")
    tr.add_argument("--probe", action="store_true", help="freeze the backbone and train only the attentive head")
    tr.add_argument("--init", help="checkpoint to initialise from (e.g. a gen_only run)")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--stop-step", type=int, help="stop early at this step (resume later)")
    tr.add_argument("--resume", action="store_true")
    tr.add_argument("--overwrite", action="store_true")
    tr.set_defaults(func=cmd_train)

    sa = sub.add_parser("sample", help="mask-conditioned generation")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--data", required=True)
    sa.add_argument("--split", choices=SPLITS, default="test")
    sa.add_argument("--mask", default="first", help="first | first_last | all | none | prefix:N | sparse:K | rho:R | frames:i,j")
    sa.add_argument("--class", dest="cls", type=int, help="target class for classifier guidance")
    sa.add_argument("--s", type=float, help="classifier guidance scale")
    sa.add_argument("--cfg-scale", dest="cfg_scale", type=float)
    sa.add_argument("--n-steps", dest="n_steps", type=int)
    sa.add_argument("--churn", type=float)
    sa.add_argument("--seed", type=int)
    sa.add_argument("--n", type=int, default=16, help="number of conditioning videos")
    sa.add_argument("--out", required=True, help=".npy path; a .json sidecar is written next to it")
    sa.set_defaults(func=cmd_sample)

    cl = sub.add_parser("classify", help="recognise full or partially observed videos")
    cl.add_argument("--checkpoint", required=True)
    cl.add_argument("--data", required=True)
    cl.add_argument("--split", choices=SPLITS, default="test")
    cl.add_argument("--mask", help="visible frames; omitted means the full-video path")
    cl.add_argument("--partial-path", action="store_true", help="use the partial-frame path even for --mask all")
    cl.add_argument("--n", type=int, default=0)
    cl.add_argument("--out", help="per-sample predictions CSV")
    cl.set_defaults(func=cmd_classify)

    ev = sub.add_parser("eval", help="run an evaluation protocol")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--protocol", required=True, choices=PROTOCOLS)
    ev.add_argument("--n", type=int, default=0, help="limit the number of evaluated videos")
    ev.add_argument("--out", help="default: <checkpoint dir>/eval/<protocol>")
    ev.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plots", help="re-render plots from metric CSVs")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vidmask: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError) as exc:
        print(f"vidmask: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, MatrixSqrtError) as exc:
        print(f"vidmask: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError) as exc:
        print(f"vidmask: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"vidmask: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
