"""Episodic task sampling, class folds, k-shot assembly and bbox relaxation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .prototype import EmptyForegroundError, SSRNorm, SSRSequence, build_ssr

KSHOT_MODES = ("parametric", "nonparametric")
BBOX_MODES = ("union", "component")


class InsufficientDataError(ValueError):
    """A class does not hold enough usable images for the requested episode."""


def episode_rng(seed: int, *counters: int) -> np.random.Generator:
    """Counter-based stream: the same (seed, counters) gives the same draws anywhere."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, counters)])))


@dataclass
class Episode:
    class_id: str
    support_images: np.ndarray  # (k, 3, H, W) float32
    support_masks: np.ndarray  # (k, H, W) uint8
    query_image: np.ndarray  # (3, H, W) float32
    query_mask: np.ndarray | None = None  # (H, W) uint8
    support_ids: tuple[int, ...] = ()
    query_id: int = -1

    def __post_init__(self):
        if len(self.support_images) < 1:
            raise ValueError("an episode needs k >= 1 supports")
        if len(self.support_images) != len(self.support_masks):
            raise ValueError("support images and masks differ in count")
        if self.support_images.shape[-2:] != self.query_image.shape[-2:]:
            raise ValueError("support and query images must share size")
        if any(m.sum() == 0 for m in self.support_masks):
            raise EmptyForegroundError("support masks must be non-empty")

    @property
    def shots(self) -> int:
        return len(self.support_images)

    def with_support_masks(self, masks: np.ndarray) -> "Episode":
        return Episode(self.class_id, self.support_images, np.asarray(masks, dtype=np.uint8), self.query_image,
                       self.query_mask, self.support_ids, self.query_id)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_classes: tuple[str, ...]
    test_classes: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if set(self.train_classes) & set(self.test_classes):
            raise ValueError("train and test classes overlap")


def make_folds(class_ids: Sequence[str], n_folds: int) -> list[FoldSplit]:
    """Contiguous, near-equal partitions of the sorted class ids; fold i tests on part i."""
    classes = sorted(class_ids)
    if len(set(classes)) != len(classes):
        raise ValueError("duplicate class ids")
    if n_folds < 2 or n_folds > len(classes):
        raise ValueError(f"n_folds must be in [2, {len(classes)}], got {n_folds}")
    parts = np.array_split(np.arange(len(classes)), n_folds)
    folds = []
    for i, part in enumerate(parts):
        test = tuple(classes[j] for j in part)
        train = tuple(c for c in classes if c not in test)
        folds.append(FoldSplit(i, train, test))
    return folds


def sample_episode(dataset, class_id: str, k: int, rng_seed, weak: str | None = None) -> Episode:
    """Draw k supports and one query, all distinct, from ``class_id``.

    ``rng_seed`` is an int or a numpy Generator. ``weak`` relaxes support
    masks to boxes ("union" or "component").
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else episode_rng(rng_seed)
    usable = dataset.usable_indices(class_id)
    if len(usable) < k + 1:
        raise InsufficientDataError(f"class {class_id!r} has {len(usable)} usable images, need {k + 1}")
    picked = rng.choice(len(usable), size=k + 1, replace=False)
    ids = [usable[i] for i in picked]
    support_ids, query_id = sorted(ids[:k]), ids[k]
    sup = [dataset.load(class_id, i) for i in support_ids]
    q_img, q_mask = dataset.load(class_id, query_id)
    masks = np.stack([m for _, m in sup])
    if weak is not None:
        masks = np.stack([relax_mask_to_bbox(m, weak, rng) for m in masks])
    return Episode(class_id, np.stack([im for im, _ in sup]), masks, q_img, q_mask, tuple(support_ids), query_id)


def relax_mask_to_bbox(mask, mode: str = "union", rng=None) -> np.ndarray:
    """Fill the tight bounding box of the foreground.

    ``union`` boxes all foreground; ``component`` boxes one randomly chosen
    4-connected component (``rng`` is a seed or Generator).
    """
    m = np.asarray(mask) > 0
    if not m.any():
        raise EmptyForegroundError("cannot box an empty mask")
    if mode == "component":
        labels, n = ndimage.label(m)
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        m = labels == int(gen.integers(1, n + 1))
    elif mode != "union":
        raise ValueError(f"unknown bbox mode {mode!r}; choose from {BBOX_MODES}")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    out = np.zeros(m.shape, dtype=np.uint8)
    out[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = 1
    return out


def assemble_kshot_sequence(per_support_prototypes: torch.Tensor, query_features: torch.Tensor,
                            bn_params: SSRNorm | None, mode: str = "parametric",
                            combine_mode: str = "hadamard") -> SSRSequence:
    """Turn (B, k, L, M) prototypes into the SSR fed to the fusion stage.

    ``parametric`` keeps all k*L steps; ``nonparametric`` averages the
    supports' prototypes per level first, giving L steps.
    """
    if mode == "nonparametric":
        per_support_prototypes = per_support_prototypes.mean(dim=1, keepdim=True)
    elif mode != "parametric":
        raise ValueError(f"unknown k-shot mode {mode!r}; choose from {KSHOT_MODES}")
    return build_ssr(per_support_prototypes, query_features, bn_params, combine_mode)
