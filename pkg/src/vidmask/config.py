"""Experiment configuration: nested sections, YAML/JSON files, env and flag overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .codec import make_codec
from .recognition import RecognitionConfig
from .sampler import SamplerConfig
from .shapes import TemporalShapesSpec
from .training import TrainConfig

ENV_PREFIX = "VIDMASK_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n: int = 8000
    seed: int = 0
    codec: str = "space_to_depth"
    codec_factor: int = 2
    spec: dict = field(default_factory=lambda: TemporalShapesSpec().to_dict())

    def shapes_spec(self) -> TemporalShapesSpec:
        d = dict(self.spec)
        for k in ("blob_std", "window_start", "window_end"):
            if k in d:
                d[k] = tuple(d[k])
        return TemporalShapesSpec(**d)

    def make_codec(self):
        return make_codec(self.codec, self.codec_factor)


@dataclass
class EvalConfig:
    split: str = "test"
    max_samples: int = 0  # 0 means the whole split
    rho_grid: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 1.0])
    k_grid: list = field(default_factory=lambda: [2, 3, 4, 16])
    s_grid: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 4.0])
    genrel_frames: list = field(default_factory=lambda: [2, 4, 8, 16])
    seed: int = 0


def _desk_backbone() -> dict:
    return BackboneConfig(
        latent_channels=4, base_channels=8, channel_multipliers=(1, 2, 4, 4), emb_dim=32, pool_dim=32,
        temporal_mixing="temporal_attention",
    ).to_dict()


SECTIONS = {
    "data": DataConfig,
    "backbone": BackboneConfig,
    "objectives": TrainConfig,
    "sampler": SamplerConfig,
    "recognition": RecognitionConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(**_desk_backbone()))
    objectives: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    recognition: RecognitionConfig = field(default_factory=RecognitionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d["backbone"]["channel_multipliers"] = list(self.backbone.channel_multipliers)
        d["seed"] = self.seed
        d["out_dir"] = self.out_dir
        return json.loads(json.dumps(d))  # tuples -> lists

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        base = ExperimentConfig().to_dict()
        merged = _merge(base, d or {}, "")
        try:
            sections = {name: _build(kind, merged[name], name) for name, kind in SECTIONS.items()}
            cfg = cls(**sections, seed=int(merged["seed"]), out_dir=str(merged["out_dir"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self):
        codec = self.data.make_codec()
        spec = self.data.shapes_spec()
        lat = codec.latent_shape((spec.num_frames, spec.size, spec.size, 1))
        if lat[-1] != self.backbone.latent_channels:
            raise ConfigError(
                f"backbone.latent_channels={self.backbone.latent_channels} but the {self.data.codec} codec yields {lat[-1]}"
            )
        if self.backbone.num_frames != spec.num_frames or self.backbone.num_classes != spec.num_classes:
            raise ConfigError("backbone num_frames/num_classes disagree with the dataset spec")

    def training_hash(self) -> str:
        """Hash of everything that shapes a training trajectory."""
        d = self.to_dict()
        blob = {k: d[k] for k in ("data", "backbone", "objectives", "seed")}
        blob["objectives"] = {k: v for k, v in blob["objectives"].items() if k not in ("log_every", "ckpt_every")}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _build(kind, values: dict, name: str):
    known = {f.name for f in fields(kind)}
    extra = set(values) - known
    if extra:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(extra)}")
    return kind(**values)


def _merge(base: dict, over: dict, where: str) -> dict:
    out = dict(base)
    for k, v in over.items():
        path = f"{where}.{k}" if where else k
        if k not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[k], dict) and k != "spec":
            if not isinstance(v, dict):
                raise ConfigError(f"{path!r} must be a mapping")
            out[k] = _merge(base[k], v, path)
        elif k == "spec":
            if not isinstance(v, dict):
                raise ConfigError(f"{path!r} must be a mapping")
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _set_path(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not a section")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``"objectives.lr=1e-3"`` -> ``("objectives.lr", 0.001)``; values are parsed as YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {text!r}") from exc


def env_overrides(environ=None) -> dict:
    """``VIDMASK_OBJECTIVES__LR=1e-3`` sets ``objectives.lr``."""
    environ = os.environ if environ is None else environ
    tree: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if "__" not in key and key not in ("seed", "out_dir"):
            continue  # other VIDMASK_* variables are not config
        dotted = key.replace("__", ".")
        _, value = parse_override(f"x={raw}")
        _set_path(tree, dotted, value)
    return tree


def resolve_config(path=None, overrides=(), environ=None) -> ExperimentConfig:
    """Defaults < file < environment < ``key=value`` overrides."""
    tree = read_config_file(path) if path else {}
    tree = _deep_update(tree, env_overrides(environ))
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_path(tree, key, value)
    return ExperimentConfig.from_dict(tree)


def _deep_update(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _deep_update(out.get(k, {}), v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out
