"""Episodic training, loss, learning-rate schedule and checkpoints."""
from __future__ import annotations

import copy
import io
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .episodes import FoldSplit, episode_rng, sample_episode
from .model import DoGLSTM, ModelConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BUFFER_NAMES = ("running_mean", "running_var", "num_batches_tracked")
EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_episodes: int = 2000
    batch_episodes: int = 5
    lr_initial: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_every: int = 1500
    shots: int = 1
    seed: int = 0
    checkpoint_every: int = 0  # episodes; 0 disables periodic checkpoints
    precision: str = "float32"
    weak: str | None = None

    def __post_init__(self):
        for name in ("total_episodes", "batch_episodes", "lr_decay_every", "shots"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr_initial > 0 or not self.lr_decay > 0:
            raise ValueError("learning rate and decay must be positive")
        if self.lr_decay_every > self.total_episodes:
            raise ValueError("lr_decay_every must not exceed total_episodes")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32


FULL_TRAIN = TrainConfig(total_episodes=50_000, batch_episodes=5, lr_initial=1e-4, lr_decay=0.1,
                          lr_decay_every=10_000)


def lr_at(config: TrainConfig, episode: int) -> float:
    """Stepped schedule: decay by ``lr_decay`` after every ``lr_decay_every`` episodes."""
    return config.lr_initial * config.lr_decay ** (episode // config.lr_decay_every)


def loss(pred_probs: torch.Tensor, truth, eps: float = EPS) -> torch.Tensor:
    """Mean binary cross-entropy over pixels, with probabilities clamped to [eps, 1-eps]."""
    truth = torch.as_tensor(truth, dtype=pred_probs.dtype)
    if truth.shape != pred_probs.shape:
        raise ValueError(f"prediction shape {tuple(pred_probs.shape)} != truth shape {tuple(truth.shape)}")
    p = pred_probs.clamp(eps, 1.0 - eps)
    return -(truth * torch.log(p) + (1.0 - truth) * torch.log1p(-p)).mean()


@dataclass
class Checkpoint:
    config: dict
    sections: dict[str, dict[str, torch.Tensor]]
    optimizer: dict = field(default_factory=dict)
    iteration: int = 0
    rng_state: torch.Tensor | None = None
    history: list[tuple[int, float]] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config["model"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config["train"])

    def build_model(self) -> DoGLSTM:
        cfg = self.model_config
        model = DoGLSTM(cfg).to(self.train_config.dtype)
        load_sections(model, self.sections)
        model.eval()
        return model


def model_sections(model: DoGLSTM) -> dict[str, dict[str, torch.Tensor]]:
    fusion_key = "bconvlstm" if model.config.fusion == "bconvlstm" else "fusion"
    parts = {"encoder": model.encoder, "ssr_bn": model.ssr_bn, fusion_key: model.fusion, "head": model.head}
    return {name: {k: v.detach().clone() for k, v in mod.state_dict().items()} for name, mod in parts.items()}


def load_sections(model: DoGLSTM, sections: dict):
    fusion = sections.get("bconvlstm", sections.get("fusion", {}))
    model.encoder.load_state_dict(sections["encoder"])
    model.ssr_bn.load_state_dict(sections["ssr_bn"])
    model.fusion.load_state_dict(fusion)
    model.head.load_state_dict(sections["head"])


def count_parameters(checkpoint) -> int:
    """Learnable scalars across all sections (normalization running statistics excluded)."""
    sections = checkpoint.sections if isinstance(checkpoint, Checkpoint) else checkpoint
    total = 0
    for params in sections.values():
        for key, value in params.items():
            if key.rsplit(".", 1)[-1] in BUFFER_NAMES:
                continue
            total += int(value.numel())
    return total


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename) as a single torch archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(asdict(checkpoint), buf)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    data = torch.load(path, map_location="cpu", weights_only=False)
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r} in {path}")
    return Checkpoint(**data)


def training_episode(dataset, fold: FoldSplit, config: TrainConfig, index: int):
    """Episode ``index`` of the training stream: class and images drawn from one counter-based RNG."""
    rng = episode_rng(config.seed, index)
    classes = sorted(fold.train_classes)
    cid = classes[int(rng.integers(len(classes)))]
    return sample_episode(dataset, cid, config.shots, rng, weak=config.weak)


def train(config: TrainConfig, dataset, fold: FoldSplit, model_config: ModelConfig | None = None,
          resume: Checkpoint | None = None, checkpoint_path=None, stop_at: int | None = None,
          on_step: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Run (or continue) episodic training and return the final checkpoint.

    ``stop_at`` halts after that many episodes without changing the
    schedule, which lets a run be split across a resume.
    """
    if model_config is None:
        model_config = resume.model_config if resume else ModelConfig()
    if model_config.shots != config.shots and model_config.kshot_mode == "parametric" \
            and model_config.fusion == "conv_layer":
        raise ValueError("conv_layer fusion needs model shots == training shots")
    torch.manual_seed(config.seed)
    model = DoGLSTM(model_config).to(config.dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_initial)
    start, history = 0, []
    if resume is not None:
        load_sections(model, resume.sections)
        opt.load_state_dict(resume.optimizer)
        start, history = resume.iteration, list(resume.history)
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
    end = config.total_episodes if stop_at is None else min(stop_at, config.total_episodes)
    cfg_snapshot = {"model": model_config.to_dict(), "train": asdict(config)}

    def snapshot(iteration):
        return Checkpoint(copy.deepcopy(cfg_snapshot), model_sections(model), copy.deepcopy(opt.state_dict()), iteration,
                          torch.get_rng_state(), list(history))

    model.train()
    it = start
    next_ckpt = (it // config.checkpoint_every + 1) * config.checkpoint_every if config.checkpoint_every else None
    while it < end:
        idx = range(it, min(it + config.batch_episodes, end))
        episodes = [training_episode(dataset, fold, config, j) for j in idx]
        for group in opt.param_groups:
            group["lr"] = lr_at(config, it)
        si, sm, qi = model.episode_tensors(episodes)
        truth = torch.as_tensor(np.stack([e.query_mask for e in episodes]), dtype=config.dtype)
        value = loss(model(si, sm, qi), truth)
        if not torch.isfinite(value):
            seeds = [(config.seed, j) for j in idx]
            raise TrainingDivergedError(f"non-finite loss {value.item()} at episode {it}; episode seeds {seeds}")
        opt.zero_grad()
        value.backward()
        opt.step()
        it = idx[-1] + 1
        history.append((it, float(value.item())))
        if on_step is not None:
            on_step(it, float(value.item()))
        if next_ckpt is not None and it >= next_ckpt:
            if checkpoint_path is not None:
                save_checkpoint(snapshot(it), checkpoint_path)
            next_ckpt += config.checkpoint_every
        if it % 500 < config.batch_episodes:
            log.info("episode %d loss %.4f lr %.2e", it, value.item(), lr_at(config, it - 1))
    final = snapshot(it)
    if checkpoint_path is not None:
        save_checkpoint(final, checkpoint_path)
    return final


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    return np.convolve(v, np.ones(window) / window, mode="valid")
