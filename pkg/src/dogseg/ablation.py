"""Ablation matrix over fusion strategy, DoG schedule, shots and weak supervision.

Each variant is trained once per (seed, fold) and then evaluated under one
or more protocols. Evaluation episodes depend only on (seed, class), so
all variants see the same test episodes for a given seed.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .episodes import make_folds
from .evaluation import run_protocol
from .model import BackgroundModel
from .trainer import load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

VARIANTS: dict[str, dict] = {
    "baseline": {"dog.enabled": False, "fusion.strategy": "conv_layer"},
    "dog_conv": {"fusion.strategy": "conv_layer"},
    "dog_average": {"fusion.strategy": "average"},
    "full": {"fusion.strategy": "bconvlstm"},
    "single_dog": {"fusion.strategy": "bconvlstm", "dog.single": True},
    "full_5shot": {"fusion.strategy": "bconvlstm", "episode.shots": 5, "episode.kshot_mode": "parametric"},
}


@dataclass(frozen=True)
class EvalSpec:
    label: str
    variant: str | None  # None = the all-background predictor
    shots: int = 1
    kshot_mode: str | None = None
    weak: str | None = None


EVALS = {
    "baseline": EvalSpec("baseline", "baseline"),
    "dog_conv": EvalSpec("dog_conv", "dog_conv"),
    "dog_average": EvalSpec("dog_average", "dog_average"),
    "full": EvalSpec("full", "full"),
    "single_dog": EvalSpec("single_dog", "single_dog"),
    "full_bbox": EvalSpec("full_bbox", "full", weak="component"),
    "full_5shot_nonparam": EvalSpec("full_5shot_nonparam", "full", shots=5, kshot_mode="nonparametric"),
    "full_5shot_param": EvalSpec("full_5shot_param", "full_5shot", shots=5, kshot_mode="parametric"),
    "background": EvalSpec("background", None),
}

AXES = {
    "fusion": ("dog_average", "dog_conv", "full"),
    "dog": ("baseline", "dog_conv", "full", "single_dog"),
    "shots": ("full", "full_5shot_nonparam", "full_5shot_param"),
    "weak": ("full", "full_bbox", "background"),
}
AXES["all"] = tuple(dict.fromkeys(label for labels in AXES.values() for label in labels))


@dataclass
class AblationResult:
    axis: str
    seeds: list[int]
    folds: list[int]
    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def values(self, label: str) -> np.ndarray:
        """(seeds, folds) array of mIoU for one evaluation."""
        out = np.full((len(self.seeds), len(self.folds)), np.nan)
        for r in self.rows:
            if r["eval"] == label:
                out[self.seeds.index(r["seed"]), self.folds.index(r["fold"])] = r["miou"]
        return out

    def seed_means(self, label: str) -> np.ndarray:
        """Per-seed mIoU, averaged over folds."""
        return self.values(label).mean(axis=1)

    def mean(self, label: str) -> float:
        return float(self.seed_means(label).mean())

    def summary(self) -> dict:
        labels = list(dict.fromkeys(r["eval"] for r in self.rows))
        return {lab: {"miou_mean": self.mean(lab), "miou_per_seed": self.seed_means(lab).tolist()} for lab in labels}

    def to_dict(self) -> dict:
        return {"axis": self.axis, "seeds": self.seeds, "folds": self.folds, "summary": self.summary(),
                "rows": self.rows, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["eval", "variant", "seed", "fold", "shots", "miou", "fb_iou"],
                           lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: r[k] for k in w.fieldnames})
        return buf.getvalue()


def variant_config(base: RunConfig, variant: str, seed: int, fold: int) -> RunConfig:
    cfg = RunConfig.from_dict(base.to_dict())
    for k, v in VARIANTS[variant].items():
        cfg.set(k, v)
    cfg.set("episode.seed", seed)
    cfg.set("episode.fold", fold)
    return cfg


def dataset_fingerprint(dataset) -> str:
    """Digest of the dataset files, independent of where the dataset lives."""
    h = hashlib.sha256()
    root = Path(dataset.root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def cache_key(cfg: RunConfig, fingerprint: str) -> str:
    """Short digest of everything that determines a trained checkpoint."""
    blob = json.dumps({"config": cfg.to_dict(), "data": fingerprint}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def run_ablation(base: RunConfig, dataset, axis: str = "all", seeds=(0, 1, 2), folds=None,
                 cache_dir=None) -> AblationResult:
    """Train every variant the axis needs for each (seed, fold) and evaluate it."""
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; choose from {sorted(AXES)}")
    all_folds = make_folds(dataset.class_ids, base["episode.n_folds"])
    fold_ids = list(range(len(all_folds))) if folds is None else list(folds)
    specs = [EVALS[label] for label in AXES[axis]]
    variants = list(dict.fromkeys(s.variant for s in specs if s.variant is not None))
    result = AblationResult(axis, list(seeds), fold_ids, config=base.to_dict())
    cache = Path(cache_dir) if cache_dir else None
    fingerprint = dataset_fingerprint(dataset) if cache else None

    for seed in seeds:
        for fi in fold_ids:
            fold = all_folds[fi]
            models = {}
            for variant in variants:
                cfg = variant_config(base, variant, seed, fi)
                path = cache / f"{variant}_s{seed}_f{fi}_{cache_key(cfg, fingerprint)}.pt" if cache else None
                start = time.perf_counter()
                if path is not None and path.exists():
                    ckpt = load_checkpoint(path)
                else:
                    ckpt = train(cfg.train_config(), dataset, fold, cfg.model_config(dataset.image_size))
                    if path is not None:
                        save_checkpoint(ckpt, path)
                result.timings[f"{variant}_s{seed}_f{fi}"] = time.perf_counter() - start
                models[variant] = ckpt.build_model()
                log.info("trained %s seed=%d fold=%d in %.1fs", variant, seed, fi,
                         result.timings[f"{variant}_s{seed}_f{fi}"])
            for spec in specs:
                model = BackgroundModel() if spec.variant is None else models[spec.variant]
                report = run_protocol(model, dataset, fold, base["eval.episodes"], spec.shots, seed,
                                      weak=spec.weak, kshot_mode=spec.kshot_mode,
                                      include_background=base["eval.include_background"],
                                      per_episode_mean=base["eval.per_episode_mean"])
                result.rows.append({"eval": spec.label, "variant": spec.variant or "background", "seed": seed,
                                    "fold": fi, "shots": spec.shots, "miou": report.miou, "fb_iou": report.fb_iou})
                log.info("%s seed=%d fold=%d miou=%.4f", spec.label, seed, fi, report.miou)
    return result
