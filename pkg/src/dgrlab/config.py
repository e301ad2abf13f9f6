"""Run configuration: dataclass defaults plus INI-style config files.

Every field has a default, so an empty (or absent) config runs the
desk-scale pipeline. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # train
    seed: int = 0
    pretrain_steps: int = 2000
    finetune_steps: int = 500
    pretrain_lr: float = 1.5e-3
    finetune_lr: float = 1e-3
    level_weight: float = 0.25
    margin: float = 0.1

    # data
    types: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    patch_size: int = 32
    graph_size: int = 10
    jitter_std: float = 0.2

    # model
    feature_dim: int = 64
    edge_dim: int = 16
    code_dim: int = 32
    node_builder_layers: int = 3
    edge_builder_layers: int = 3
    tdn_layers: int = 3
    fpn_hidden: int = 32
    regressor_hidden: int = 32
    backbone_channels: tuple[int, ...] = (12, 24, 48, 96)
    finetune_inputs: str = "both"

    # eval
    eval_every: int = 500
    eval_samples_per_type: int = 50
    heldout_size: int = 200
    eval_triplets: int = 100
    infer_crops: int = 10

    def __post_init__(self):
        if self.pretrain_lr <= 0 or self.finetune_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.pretrain_steps <= 0 or self.finetune_steps <= 0:
            raise ConfigError("step counts must be positive")
        if self.graph_size < 2:
            raise ConfigError("graph_size must be at least 2")
        if not self.types:
            raise ConfigError("types must list at least one distortion type")
        if self.edge_dim >= self.feature_dim:
            raise ConfigError(
                f"edge_dim ({self.edge_dim}) must be smaller than feature_dim ({self.feature_dim})")
        if self.margin < 0 or self.level_weight < 0:
            raise ConfigError("margin and level_weight must be nonnegative")
        if self.finetune_inputs not in ("both", "nodes", "edges"):
            raise ConfigError(f"finetune_inputs must be both|nodes|edges, got {self.finetune_inputs!r}")

    def model_fingerprint(self, with_regressor: bool = False) -> dict:
        """The shape-determining fields a checkpoint must agree on.

        Regressor shape keys are pinned only when the checkpoint actually
        stores the regressor, so one pretrain checkpoint serves every
        finetune head variant.
        """
        out = {
            "feature_dim": self.feature_dim,
            "edge_dim": self.edge_dim,
            "code_dim": self.code_dim,
            "node_builder_layers": self.node_builder_layers,
            "edge_builder_layers": self.edge_builder_layers,
            "tdn_layers": self.tdn_layers,
            "fpn_hidden": self.fpn_hidden,
            "backbone_channels": list(self.backbone_channels),
        }
        if with_regressor:
            out["regressor_hidden"] = self.regressor_hidden
            out["finetune_inputs"] = self.finetune_inputs
        return out


_SECTIONS = {
    "train": ("seed", "pretrain_steps", "finetune_steps", "pretrain_lr",
              "finetune_lr", "level_weight", "margin"),
    "data": ("types", "patch_size", "graph_size", "jitter_std"),
    "model": ("feature_dim", "edge_dim", "code_dim", "node_builder_layers",
              "edge_builder_layers", "tdn_layers", "fpn_hidden",
              "regressor_hidden", "backbone_channels", "finetune_inputs"),
    "eval": ("eval_every", "eval_samples_per_type", "heldout_size",
             "eval_triplets", "infer_crops"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_int_tuple(key: str, raw: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"config key {key!r} must list comma-separated integers")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r} has a non-integer entry: {raw!r}") from exc


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if key in ("types", "backbone_channels"):
            return _parse_int_tuple(key, raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"config key {key!r} has invalid value {raw!r}") from exc


def load_config(path: str | Path | None, overrides: dict | None = None) -> TrainConfig:
    """Read an INI config (sections [train]/[data]/[model]/[eval]); None means
    all defaults. ``overrides`` wins over the file (CLI --seed)."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        text = Path(path).read_text(encoding="utf-8")
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            for key, raw in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown config key {key!r} in section [{section}]")
                values[key] = _parse_value(key, raw)
    if overrides:
        values.update(overrides)
    return TrainConfig(**values)


def config_hash(path: str | Path | None) -> str:
    """sha256 over the raw config bytes; the default (no file) hashes empty."""
    data = b"" if path is None else Path(path).read_bytes()
    return hashlib.sha256(data).hexdigest()
