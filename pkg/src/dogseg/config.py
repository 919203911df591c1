"""Flat ``key = value`` run configuration with a fixed, documented schema.

Resolution order: schema defaults, then the config file, then explicit
overrides (CLI flags), then the ``DOGSEG_SEED`` environment variable for
``episode.seed``. Unknown keys are rejected.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .datasets import SHAPES, TEXTURES, SynthConfig
from .encoder import EncoderConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _blocks(s: str) -> tuple[tuple[int, int], ...]:
    try:
        return tuple((int(c), int(st)) for c, st in (b.split(":") for b in str(s).split(",")))
    except ValueError as exc:
        raise ConfigError(f"blocks must look like '32:2,64:2', got {s!r}") from exc


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ConfigError(f"{s!r} not in {options}")
        return s
    return parse


def _optional_bbox(s: str) -> str | None:
    return None if s in ("none", "", None) else _choice("union", "component")(s)


def _fmt_blocks(b) -> str:
    return ",".join(f"{c}:{s}" for c, s in b)


def _fmt_seq(v) -> str:
    return ",".join(str(x) for x in v)


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str], Any]
    doc: str
    fmt: Callable[[Any], str] = str


SCHEMA: dict[str, Key] = {
    "encoder.blocks": Key(((32, 2), (64, 2), (128, 2), (128, 1), (128, 1)), _blocks,
                          "out_channels:stride per encoder stage", _fmt_blocks),
    "encoder.fused_blocks": Key((2, 3, 4), _ints, "stage indices fused into the embedding", _fmt_seq),
    "encoder.embed_dim": Key(128, int, "embedding channels M"),
    "encoder.freeze_norm_stats": Key(False, _bool, "keep encoder batch-norm statistics frozen while training"),
    "encoder.input_norm": Key("image", _choice("image", "none"), "per-image standardization of input pixels"),
    "dog.enabled": Key(True, _bool, "apply the DoG pyramid to support features (false = baseline)"),
    "dog.sigma0": Key(1.0, float, "smallest blur sigma, in feature cells"),
    "dog.ratio": Key(math.sqrt(2.0), float, "geometric ratio between successive sigmas"),
    "dog.levels": Key(4, int, "number of DoG levels L"),
    "dog.single": Key(False, _bool, "single DoG between sigma0 and sigma0*ratio^levels"),
    "ssr.combine": Key("hadamard", _choice("hadamard", "dot"), "prototype/query combination"),
    "fusion.strategy": Key("bconvlstm", _choice("average", "conv_layer", "bconvlstm"), "scale-space fusion"),
    "fusion.hidden_dim": Key(64, int, "ConvLSTM hidden channels D"),
    "head.width": Key(64, int, "channels of the first segmentation-head stage"),
    "episode.shots": Key(1, int, "supports per episode k"),
    "episode.kshot_mode": Key("parametric", _choice("parametric", "nonparametric"), "k-shot fusion"),
    "episode.fold": Key(0, int, "test fold index"),
    "episode.n_folds": Key(4, int, "number of class folds"),
    "episode.seed": Key(0, int, "master seed (DOGSEG_SEED overrides)"),
    "weak.bbox_mode": Key(None, _optional_bbox, "none|union|component: box-relax support masks at evaluation",
                          lambda v: "none" if v is None else v),
    "weak.train": Key(False, _bool, "also box-relax support masks during training"),
    "train.total_episodes": Key(2000, int, "training episodes"),
    "train.batch_episodes": Key(5, int, "episodes per optimizer update"),
    "train.lr_initial": Key(1e-3, float, "initial Adam learning rate"),
    "train.lr_decay": Key(0.1, float, "multiplicative learning-rate decay"),
    "train.lr_decay_every": Key(1500, int, "episodes between decays"),
    "train.checkpoint_every": Key(0, int, "episodes between periodic checkpoints (0 = off)"),
    "train.precision": Key("float32", _choice("float32", "float64"), "parameter precision"),
    "eval.episodes": Key(100, int, "test episodes per class"),
    "eval.include_background": Key(False, _bool, "add background IoU to the mIoU average"),
    "eval.per_episode_mean": Key(False, _bool, "average per-episode IoUs instead of accumulating I/U"),
    "synth.shape_classes": Key(SHAPES, _strs, "shape classes to generate", _fmt_seq),
    "synth.textures": Key(TEXTURES, _strs, "texture families", _fmt_seq),
    "synth.images_per_class": Key(50, int, "images per class"),
    "synth.image_size": Key((64, 64), _ints, "H,W in pixels", _fmt_seq),
    "synth.noise_std": Key(0.03, float, "Gaussian pixel noise (fraction of full scale)"),
    "synth.seed": Key(0, int, "generator seed"),
}

FULL_SCALE = {
    "train.total_episodes": 50_000,
    "train.batch_episodes": 5,
    "train.lr_initial": 1e-4,
    "train.lr_decay": 0.1,
    "train.lr_decay_every": 10_000,
    "eval.episodes": 1000,
}


class RunConfig:
    """Resolved configuration: a validated mapping of schema keys to typed values."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: key.default for k, key in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = SCHEMA[key].parse(value)
        elif isinstance(value, list):
            value = tuple(tuple(x) if isinstance(x, list) else x for x in value)
        self._values[key] = value

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for k, v in self._values.items():
            out[k] = [list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, tuple) else v
        return out

    def to_text(self) -> str:
        return "".join(f"# {SCHEMA[k].doc}\n{k} = {SCHEMA[k].fmt(v)}\n" for k, v in self._values.items())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            try:
                cfg.set(key, value)
            except (ConfigError, ValueError) as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from exc
        return cfg

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        for k, v in values.items():
            cfg.set(k, v)
        return cfg

    @classmethod
    def resolve(cls, path=None, overrides: dict[str, Any] | None = None, env=None) -> "RunConfig":
        env = os.environ if env is None else env
        cfg = cls.from_text(Path(path).read_text(), str(path)) if path else cls()
        for k, v in (overrides or {}).items():
            if v is not None:
                cfg.set(k, v)
        if env.get("DOGSEG_SEED"):
            cfg.set("episode.seed", env["DOGSEG_SEED"])
        return cfg

    def model_config(self, image_size: tuple[int, int]) -> ModelConfig:
        enc = EncoderConfig(input_size=tuple(image_size), blocks=self["encoder.blocks"],
                            fused_blocks=self["encoder.fused_blocks"], embed_dim=self["encoder.embed_dim"],
                            freeze_norm_stats=self["encoder.freeze_norm_stats"],
                            input_norm=self["encoder.input_norm"])
        return ModelConfig(encoder=enc, use_dog=self["dog.enabled"], dog_sigma0=self["dog.sigma0"],
                           dog_ratio=self["dog.ratio"], dog_levels=self["dog.levels"], dog_single=self["dog.single"],
                           combine=self["ssr.combine"], fusion=self["fusion.strategy"],
                           hidden_dim=self["fusion.hidden_dim"], shots=self["episode.shots"],
                           kshot_mode=self["episode.kshot_mode"], head_width=self["head.width"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(total_episodes=self["train.total_episodes"], batch_episodes=self["train.batch_episodes"],
                           lr_initial=self["train.lr_initial"], lr_decay=self["train.lr_decay"],
                           lr_decay_every=self["train.lr_decay_every"], shots=self["episode.shots"],
                           seed=self["episode.seed"], checkpoint_every=self["train.checkpoint_every"],
                           precision=self["train.precision"],
                           weak=self["weak.bbox_mode"] if self["weak.train"] else None)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(shape_classes=self["synth.shape_classes"], textures=self["synth.textures"],
                           images_per_class=self["synth.images_per_class"], image_size=self["synth.image_size"],
                           noise_std=self["synth.noise_std"], seed=self["synth.seed"])
