"""Run configuration: a single JSON document with strict key checking.

Top-level keys (all optional unless noted; defaults in parentheses):

    tasks (5)             number of continual tasks
    classes_per_task (2)
    epochs (5)            per-task fine-tuning epochs
    batch (16)
    lr (0.0005)           Adam learning rate
    beta1 (0.9), beta2 (0.999)
    rank (10)             adapter rank r
    epsilon (0.95)        energy threshold for basis extraction, in (0, 1]
    sample_m (null)       feature-extraction sample count; null picks
                          200/150/100 for <=5 / <=10 / more tasks, clipped
                          to the task's training-set size
    lambda (2.0)          confidence scaling factor
    mode ("duallora")     lora | lora_o | lora_o_r | duallora |
                          duallora_plus | oracle_id
    seed (0)
    layers (2), embed_dim (16), ffn_ratio (4), patch_side (4)
    pretext_epochs (2), pretext_lr (0.003)
    data (synthetic defaults)  see below
    out (null)            output directory (the CLI flag overrides)
    strict_paper (false)  FLOPs formulas exactly as printed

"data" is either {"kind": "synthetic", samples_per_class (32),
test_per_class (16), image_side (8), channels (1), separation (5.0),
noise (0.5), pretext_classes (4), pretext_samples_per_class (32)} or
{"kind": "file", "path": ..., pretext_classes (0), test_fraction (0.2)}.

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

from .data import SyntheticTaskSpec

__all__ = ["ConfigError", "DataConfig", "RunConfig", "MODES"]

MODES = ("lora", "lora_o", "lora_o_r", "duallora", "duallora_plus", "oracle_id")


class ConfigError(ValueError):
    """Malformed run configuration."""


@dataclass
class DataConfig:
    kind: str = "synthetic"
    samples_per_class: int = 32
    test_per_class: int = 16
    image_side: int = 8
    channels: int = 1
    separation: float = 5.0
    noise: float = 0.5
    pretext_classes: int = 4
    pretext_samples_per_class: int = 32
    path: Optional[str] = None
    test_fraction: float = 0.2


@dataclass
class RunConfig:
    tasks: int = 5
    classes_per_task: int = 2
    epochs: int = 5
    batch: int = 16
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    rank: int = 10
    epsilon: float = 0.95
    sample_m: Optional[int] = None
    lam: float = 2.0
    mode: str = "duallora"
    seed: int = 0
    layers: int = 2
    embed_dim: int = 16
    ffn_ratio: int = 4
    patch_side: int = 4
    pretext_epochs: int = 2
    pretext_lr: float = 3e-3
    data: DataConfig = field(default_factory=DataConfig)
    out: Optional[str] = None
    strict_paper: bool = False

    def effective_sample_m(self, train_size: int) -> int:
        if self.sample_m is not None:
            m = self.sample_m
        elif self.tasks <= 5:
            m = 200
        elif self.tasks <= 10:
            m = 150
        else:
            m = 100
        return min(m, train_size)

    def synthetic_spec(self) -> SyntheticTaskSpec:
        d = self.data
        return SyntheticTaskSpec(
            tasks=self.tasks, classes_per_task=self.classes_per_task,
            samples_per_class=d.samples_per_class, test_per_class=d.test_per_class,
            image_side=d.image_side, patch_side=self.patch_side,
            separation=d.separation, noise=d.noise, channels=d.channels,
            pretext_classes=d.pretext_classes,
            pretext_samples_per_class=d.pretext_samples_per_class)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


_TOP_TYPES = {
    "tasks": int, "classes_per_task": int, "epochs": int, "batch": int,
    "lr": float, "beta1": float, "beta2": float, "rank": int,
    "epsilon": float, "sample_m": (int, type(None)), "lambda": float,
    "mode": str, "seed": int, "layers": int, "embed_dim": int,
    "ffn_ratio": int, "patch_side": int, "pretext_epochs": int,
    "pretext_lr": float, "data": dict, "out": (str, type(None)),
    "strict_paper": bool,
}

_DATA_TYPES = {
    "kind": str, "samples_per_class": int, "test_per_class": int,
    "image_side": int, "channels": int, "separation": float, "noise": float,
    "pretext_classes": int, "pretext_samples_per_class": int,
    "path": (str, type(None)), "test_fraction": float,
}


def _check_types(doc: dict, types: dict, where: str):
    unknown = sorted(set(doc) - set(types))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    for key, val in doc.items():
        expected = types[key]
        if expected is float and isinstance(val, (int, float)) and not isinstance(val, bool):
            continue
        if expected is int and isinstance(val, bool):
            raise ConfigError(f"{where} key {key!r} must be an integer")
        if not isinstance(val, expected):
            raise ConfigError(f"{where} key {key!r} has wrong type {type(val).__name__}")


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_types(doc, _TOP_TYPES, "top-level")
    data_doc = doc.get("data", {})
    _check_types(data_doc, _DATA_TYPES, "data")
    kwargs = {k: v for k, v in doc.items() if k not in ("data", "lambda")}
    if "lambda" in doc:
        kwargs["lam"] = float(doc["lambda"])
    cfg = RunConfig(data=DataConfig(**data_doc), **kwargs)
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}")
    if not (0.0 < cfg.epsilon <= 1.0):
        raise ConfigError("epsilon must lie in (0, 1]")
    if cfg.batch < 1 or cfg.epochs < 1 or cfg.tasks < 1:
        raise ConfigError("batch, epochs and tasks must be positive")
    if cfg.data.kind not in ("synthetic", "file"):
        raise ConfigError("data.kind must be 'synthetic' or 'file'")
    if cfg.data.kind == "file" and not cfg.data.path:
        raise ConfigError("data.kind 'file' requires data.path")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return parse_config(doc)
