"""Run configuration: strict schema, canonical hashing, config echo.

Unknown keys are a hard error (silent hyperparameter typos are the main
reproducibility hazard). Every artifact embeds its config echo, which also
records the full-scale reference values next to the desk-scale ones in use.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

from .scenegen import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    decoder_layers: int = 4
    num_queries: int = 16
    fourier_freqs: int = 32
    fourier_sigma: float = 0.3
    class_emb_dim: int = 16
    voxel_size: float = 0.05
    knn_k: int = 8
    fh_tau: float = 0.08
    fh_min_size: int = 20
    color_weight: float = 0.5
    points_per_segment: int = 128
    point_hidden: int = 64
    structure: str = "main"  # main | parallel | sequential
    dropout_rate: float = 0.6
    extra_residuals: bool = False
    layer_norm_eps: float = 1e-5
    gen_blocks: int = 2
    gen_max_len: int = 16
    lambda_mask: float = 1.0
    lambda_grd: float = 10.0
    lambda_gen: float = 1.0
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    noobj_weight: float = 0.1
    deep_mask_supervision: bool = True  # average the mask loss over every layer's masks


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 4
    steps: int = 200
    stage1_fraction: float = 0.25
    warmup_fraction: float = 0.1
    gt_mask_guidance: bool = False
    divergence_threshold: float = 1e6
    log_every: int = 25


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = dataclasses.field(default_factory=SceneConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def validate(self):
        m = self.model
        if m.structure not in ("main", "parallel", "sequential"):
            raise ConfigError(f"unknown decoder structure {m.structure!r}")
        if m.decoder_layers < 0:
            raise ConfigError("decoder_layers must be >= 0")
        if not 0.0 <= m.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.train.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.train.stage1_fraction <= 1.0:
            raise ConfigError("stage1_fraction must be in [0, 1]")
        if m.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")
        return self


# values used at full scale, recorded in every config echo for comparison
FULL_SCALE_REFERENCE = {
    "hidden_dim": 768,
    "decoder_layers": 4,
    "num_queries": 120,
    "points_per_segment": 1024,
    "voxel_size": 0.02,
    "dropout_rate": 0.6,
    "lr": 1e-4,
    "betas": [0.9, 0.98],
    "lambda_mask": 1.0,
    "lambda_grd": 10.0,
    "lambda_gen": 1.0,
    "grounding_head_hidden": 384,
}


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    return cls(**data)


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(data) - {"seed", "scene", "model", "train"})
    if unknown:
        raise ConfigError(f"config root: unknown key(s) {unknown}")
    cfg = RunConfig(
        seed=int(data.get("seed", 0)),
        scene=_from_dict(SceneConfig, data.get("scene", {}), "scene"),
        model=_from_dict(ModelConfig, data.get("model", {}), "model"),
        train=_from_dict(TrainConfig, data.get("train", {}), "train"),
    )
    return cfg.validate()


def config_to_dict(cfg):
    return {
        "seed": cfg.seed,
        "scene": dataclasses.asdict(cfg.scene),
        "model": dataclasses.asdict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
    }


def load_config(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def config_hash(cfg):
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def config_echo(cfg):
    """The block embedded in every artifact: the config, its hash, and the
    full-scale reference values for comparison."""
    return {
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "full_scale_reference": FULL_SCALE_REFERENCE,
    }
