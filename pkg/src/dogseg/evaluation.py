"""mIoU / FB-IoU and the episodic test protocol."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .episodes import FoldSplit, episode_rng, sample_episode


def episode_iou(pred, truth) -> tuple[int, int]:
    """Foreground (intersection, union) pixel counts."""
    p = np.asarray(pred) > 0
    t = np.asarray(truth) > 0
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    return int(np.logical_and(p, t).sum()), int(np.logical_or(p, t).sum())


@dataclass
class ClassStats:
    intersection: int = 0
    union: int = 0
    episodes: int = 0
    iou_sum: float = 0.0  # per-episode IoUs, for the per-episode-mean mode
    iou_count: int = 0

    def add(self, inter: int, union: int):
        self.intersection += inter
        self.union += union
        self.episodes += 1
        if union > 0:
            self.iou_sum += inter / union
            self.iou_count += 1

    def merge(self, other: "ClassStats") -> "ClassStats":
        return ClassStats(self.intersection + other.intersection, self.union + other.union,
                          self.episodes + other.episodes, self.iou_sum + other.iou_sum,
                          self.iou_count + other.iou_count)

    def iou(self, per_episode_mean: bool = False) -> float:
        if per_episode_mean:
            return self.iou_sum / self.iou_count if self.iou_count else 0.0
        return self.intersection / self.union if self.union else 0.0


@dataclass
class EvalReport:
    per_class: dict[str, ClassStats]
    miou: float
    fb_iou: float
    foreground_iou: float
    background_iou: float
    protocol: dict
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "fb_iou": self.fb_iou,
            "foreground_iou": self.foreground_iou,
            "background_iou": self.background_iou,
            "per_class": {
                c: {"intersection": s.intersection, "union": s.union, "episodes": s.episodes,
                    "iou": s.iou(self.protocol.get("per_episode_mean", False))}
                for c, s in sorted(self.per_class.items())
            },
            "protocol": self.protocol,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def class_stream_id(class_id: str) -> int:
    return zlib.crc32(class_id.encode())


def run_protocol(model, dataset, fold: FoldSplit, episodes_per_class: int = 100, k: int = 1, seed: int = 0,
                 weak: str | None = None, kshot_mode: str | None = None, include_background: bool = False,
                 per_episode_mean: bool = False, batch_size: int = 20, config: dict | None = None) -> EvalReport:
    """Evaluate ``model`` on the fold's test classes.

    ``model`` exposes ``predict_episodes(list[Episode]) -> (B, H, W)`` binary
    masks. Intersections and unions are summed per class across episodes
    before dividing; mIoU averages those per-class ratios.
    """
    if episodes_per_class < 1:
        raise ValueError("episodes_per_class must be >= 1")
    per_class: dict[str, ClassStats] = {}
    fg, bg = ClassStats(), ClassStats()
    kwargs = {} if kshot_mode is None else {"kshot_mode": kshot_mode}
    for cid in sorted(fold.test_classes):
        stats = ClassStats()
        stream = class_stream_id(cid)
        episodes = [sample_episode(dataset, cid, k, episode_rng(seed, stream, j), weak=weak)
                    for j in range(episodes_per_class)]
        for start in range(0, len(episodes), batch_size):
            chunk = episodes[start:start + batch_size]
            preds = model.predict_episodes(chunk, **kwargs)
            for ep, pred in zip(chunk, preds):
                i, u = episode_iou(pred, ep.query_mask)
                stats.add(i, u)
                fg.add(i, u)
                bg.add(*episode_iou(pred == 0, ep.query_mask == 0))
        per_class[cid] = stats

    ious = [s.iou(per_episode_mean) for s in per_class.values()]
    if include_background:
        ious.append(bg.iou(per_episode_mean))
    fg_iou, bg_iou = fg.iou(per_episode_mean), bg.iou(per_episode_mean)
    protocol = {
        "fold": fold.fold_index,
        "test_classes": sorted(fold.test_classes),
        "episodes_per_class": episodes_per_class,
        "shots": k,
        "seed": seed,
        "weak": weak,
        "kshot_mode": kshot_mode,
        "include_background": include_background,
        "per_episode_mean": per_episode_mean,
    }
    return EvalReport(per_class, float(np.mean(ious)), (fg_iou + bg_iou) / 2.0, fg_iou, bg_iou, protocol,
                      dict(config or {}))
