"""Flat key=value configuration for runs.

Every tunable lives under a module prefix (``sk.iters``,
``queue.capacity``, ...). A run resolves defaults, then an optional
config file, then command-line overrides, and writes the result to
``config.resolved`` so any run can be reproduced from that file alone.
"""

from __future__ import annotations

from pathlib import Path

from .augment import AugmentConfig
from .baseline import BaselineConfig, SubsampleSpec
from .losses import TrainConfig
from .model import ModelConfig
from .queueing import QueueConfig
from .train import DiscoveryConfig, ExperimentConfig, SinkhornConfig

DEFAULTS = {
    "aug.rot": "on",
    "aug.scale_lo": "0.95",
    "aug.scale_hi": "1.05",
    "aug.jitter_sigma": "0.01",
    "model.D": "32",
    "model.hidden": "64",
    "model.k": "16",
    "model.heads": "5",
    "model.overcluster_factor": "3",
    "model.eval_head": "auto",
    "sk.iters": "3",
    "sk.eps_start": "0.3",
    "sk.eps_end": "0.05",
    "queue.capacity": "1024",
    "queue.insert_fraction": "0.1",
    "queue.sample_per_class": "64",
    "unc.p": "0.5",
    "train.epochs": "10",
    "train.batch_size": "4",
    "train.momentum": "0.9",
    "train.weight_decay": "0.0001",
    "train.lr_max": "0.01",
    "train.lr_min": "0.00001",
    "train.warmup_fraction": "0.1",
    "train.temperature": "0.2",
    "train.seed": "0",
    "disc.use_queue": "on",
    "disc.phi_queue": "on",
    "disc.tau_train": "on",
    "disc.overcluster": "on",
    "offline.pretrain_epochs": "20",
    "offline.finetune_epochs": "10",
    "offline.ratio": "0.3",
    "offline.cap": "1000",
    "offline.overcluster": "off",
    "offline.overcluster_factor": "3",
    "data.scenes": "200",
    "data.val_scenes": "50",
    "data.points": "512",
    "data.classes": "5",
    "data.novel": "2",
    "data.dropout": "0.0",
    "data.archetypes": "toy",
}


def parse_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def resolve(file_path=None, overrides=()) -> dict:
    cfg = dict(DEFAULTS)
    if file_path is not None:
        for key, value in parse_config_file(file_path).items():
            if key not in cfg:
                raise ValueError(f"unknown config key {key!r}")
            cfg[key] = value
    for item in overrides:
        key, _, value = item.partition("=")
        if key not in cfg:
            raise ValueError(f"unknown config key {key!r}")
        cfg[key] = value.strip()
    return cfg


def write_resolved(path, cfg: dict):
    Path(path).write_text("".join(f"{k}={cfg[k]}\n" for k in sorted(cfg)))


def _flag(cfg, key) -> bool:
    value = cfg[key].lower()
    if value in ("on", "true", "1", "yes"):
        return True
    if value in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"{key}: expected on/off, got {cfg[key]!r}")


def experiment_config(cfg: dict) -> ExperimentConfig:
    return ExperimentConfig(
        model=ModelConfig(
            feature_dim=int(cfg["model.D"]),
            hidden=int(cfg["model.hidden"]),
            knn=int(cfg["model.k"]),
            heads=int(cfg["model.heads"]),
            overcluster_factor=int(cfg["model.overcluster_factor"]),
        ),
        augment=AugmentConfig(
            rotate=_flag(cfg, "aug.rot"),
            scale_lo=float(cfg["aug.scale_lo"]),
            scale_hi=float(cfg["aug.scale_hi"]),
            jitter_sigma=float(cfg["aug.jitter_sigma"]),
        ),
        sinkhorn=SinkhornConfig(
            iters=int(cfg["sk.iters"]),
            eps_start=float(cfg["sk.eps_start"]),
            eps_end=float(cfg["sk.eps_end"]),
        ),
        queue=QueueConfig(
            capacity=int(cfg["queue.capacity"]),
            insert_fraction=float(cfg["queue.insert_fraction"]),
            sample_per_class=int(cfg["queue.sample_per_class"]),
        ),
        train=TrainConfig(
            epochs=int(cfg["train.epochs"]),
            batch_size=int(cfg["train.batch_size"]),
            momentum=float(cfg["train.momentum"]),
            weight_decay=float(cfg["train.weight_decay"]),
            lr_max=float(cfg["train.lr_max"]),
            lr_min=float(cfg["train.lr_min"]),
            warmup_fraction=float(cfg["train.warmup_fraction"]),
            temperature=float(cfg["train.temperature"]),
            seed=int(cfg["train.seed"]),
        ),
        discovery=DiscoveryConfig(
            use_queue=_flag(cfg, "disc.use_queue"),
            phi_queue=_flag(cfg, "disc.phi_queue"),
            tau_train=_flag(cfg, "disc.tau_train"),
            overcluster=_flag(cfg, "disc.overcluster"),
            percentile=float(cfg["unc.p"]),
        ),
    )


def baseline_config(cfg: dict) -> BaselineConfig:
    return BaselineConfig(
        pretrain_epochs=int(cfg["offline.pretrain_epochs"]),
        finetune_epochs=int(cfg["offline.finetune_epochs"]),
        subsample=SubsampleSpec(ratio=float(cfg["offline.ratio"]), cap=int(cfg["offline.cap"])),
        overcluster=_flag(cfg, "offline.overcluster"),
        overcluster_factor=int(cfg["offline.overcluster_factor"]),
    )
