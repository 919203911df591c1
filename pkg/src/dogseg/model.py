"""The full few-shot segmenter: encoder -> DoG pyramid -> prototypes -> SSR -> fusion -> head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .encoder import Encoder, EncoderConfig
from .episodes import KSHOT_MODES, Episode, assemble_kshot_sequence
from .prototype import COMBINE_MODES, SSRNorm, downsample_mask, masked_average_pool
from .recurrent_fusion import FUSION_STRATEGIES, SegmentationHead, make_fusion
from .scale_space import ScaleSchedule, build_pyramid, schedule_from_config


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    use_dog: bool = True
    dog_sigma0: float = 1.0
    dog_ratio: float = math.sqrt(2.0)
    dog_levels: int = 4
    dog_single: bool = False
    combine: str = "hadamard"
    fusion: str = "bconvlstm"
    hidden_dim: int = 64
    shots: int = 1
    kshot_mode: str = "parametric"
    head_width: int = 64

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.fusion not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.fusion!r}")
        if self.combine not in COMBINE_MODES:
            raise ValueError(f"unknown combine mode {self.combine!r}")
        if self.kshot_mode not in KSHOT_MODES:
            raise ValueError(f"unknown k-shot mode {self.kshot_mode!r}")
        if self.shots < 1 or self.hidden_dim < 1:
            raise ValueError("shots and hidden_dim must be positive")

    @property
    def schedule(self) -> ScaleSchedule | None:
        if not self.use_dog:
            return None
        return schedule_from_config(self.dog_sigma0, self.dog_ratio, self.dog_levels, self.dog_single)

    @property
    def levels(self) -> int:
        return self.schedule.levels if self.use_dog else 1

    @property
    def step_channels(self) -> int:
        return self.encoder.embed_dim if self.combine == "hadamard" else 1

    @property
    def n_steps(self) -> int:
        k = self.shots if self.kshot_mode == "parametric" else 1
        return k * self.levels

    def to_dict(self) -> dict:
        return asdict(self)


class DoGLSTM(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.encoder = Encoder(cfg.encoder)
        self.ssr_bn = SSRNorm(cfg.levels, cfg.step_channels)
        self.fusion = make_fusion(cfg.fusion, cfg.n_steps, cfg.step_channels, cfg.hidden_dim)
        self.head = SegmentationHead(cfg.step_channels, cfg.encoder.feature_size, cfg.encoder.input_size,
                                     width=cfg.head_width)

    def support_levels(self, support_features: torch.Tensor) -> list[torch.Tensor]:
        schedule = self.config.schedule
        if schedule is None:
            return [support_features]
        return build_pyramid(support_features, schedule)

    def prototypes(self, support_features: torch.Tensor, support_masks: torch.Tensor) -> torch.Tensor:
        """(B, k, M, h, w) features and (B, k, H, W) masks -> (B, k, L, M) prototypes."""
        b, k, m, h, w = support_features.shape
        small = downsample_mask(support_masks, (h, w)).to(support_features.dtype)
        levels = self.support_levels(support_features.reshape(b * k, m, h, w))
        return torch.stack([masked_average_pool(g.reshape(b, k, m, h, w), small) for g in levels], dim=2)

    def forward(self, support_images: torch.Tensor, support_masks: torch.Tensor, query_images: torch.Tensor,
                kshot_mode: str | None = None) -> torch.Tensor:
        """Foreground probabilities (B, H, W) for a batch of episodes.

        support_images: (B, k, 3, H, W); support_masks: (B, k, H, W);
        query_images: (B, 3, H, W).
        """
        if support_images.dim() != 5 or query_images.dim() != 4:
            raise ValueError("expected support images (B,k,3,H,W) and query images (B,3,H,W)")
        b, k = support_images.shape[:2]
        feats = self.encoder(torch.cat([support_images.flatten(0, 1), query_images], dim=0))
        f_s = feats[: b * k].reshape(b, k, *feats.shape[1:])
        f_q = feats[b * k:]
        protos = self.prototypes(f_s, support_masks)
        seq = assemble_kshot_sequence(protos, f_q, self.ssr_bn, kshot_mode or self.config.kshot_mode,
                                      self.config.combine)
        fused = self.fusion(seq.steps)
        return self.head(fused)

    def episode_tensors(self, episodes: list[Episode]):
        dtype = next(self.parameters()).dtype
        si = torch.as_tensor(np.stack([e.support_images for e in episodes]), dtype=dtype)
        sm = torch.as_tensor(np.stack([e.support_masks for e in episodes]))
        qi = torch.as_tensor(np.stack([e.query_image for e in episodes]), dtype=dtype)
        return si, sm, qi

    def predict_proba(self, episodes: list[Episode], kshot_mode: str | None = None) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                probs = self(*self.episode_tensors(episodes), kshot_mode=kshot_mode)
        finally:
            self.train(was_training)
        return probs.numpy()

    def predict_episodes(self, episodes: list[Episode], kshot_mode: str | None = None) -> np.ndarray:
        return (self.predict_proba(episodes, kshot_mode) >= 0.5).astype(np.uint8)


class OracleModel:
    """Returns each episode's ground-truth query mask."""

    def predict_episodes(self, episodes: list[Episode]) -> np.ndarray:
        return np.stack([np.asarray(e.query_mask, dtype=np.uint8) for e in episodes])


class BackgroundModel:
    """Predicts background everywhere."""

    def predict_episodes(self, episodes: list[Episode]) -> np.ndarray:
        return np.stack([np.zeros(e.query_image.shape[-2:], dtype=np.uint8) for e in episodes])
