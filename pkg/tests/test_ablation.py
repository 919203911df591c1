import pytest

from dogseg.ablation import AXES, EVALS, VARIANTS, cache_key, dataset_fingerprint, run_ablation, variant_config
from dogseg.config import RunConfig

TINY = {"encoder.blocks": "8:2,8:2,8:1", "encoder.fused_blocks": "1,2", "encoder.embed_dim": 8,
        "fusion.hidden_dim": 4, "head.width": 8, "train.total_episodes": 4, "train.batch_episodes": 2,
        "train.lr_decay_every": 4, "eval.episodes": 2}


def test_axes_reference_known_evals():
    for labels in AXES.values():
        for label in labels:
            spec = EVALS[label]
            assert spec.variant is None or spec.variant in VARIANTS
    assert set(AXES["all"]) == set(EVALS)


def test_variant_config():
    base = RunConfig.from_dict(TINY)
    cfg = variant_config(base, "baseline", 2, 3)
    assert cfg["dog.enabled"] is False and cfg["fusion.strategy"] == "conv_layer"
    assert cfg["episode.seed"] == 2 and cfg["episode.fold"] == 3
    assert base["dog.enabled"] is True
    assert variant_config(base, "full_5shot", 0, 0)["episode.shots"] == 5


def test_run_and_cache(tiny_dataset, tmp_path):
    base = RunConfig.from_dict(TINY)
    r1 = run_ablation(base, tiny_dataset, "weak", seeds=(0,), folds=(2,), cache_dir=tmp_path)
    assert [row["eval"] for row in r1.rows] == ["full", "full_bbox", "background"]
    assert r1.values("background").shape == (1, 1) and r1.mean("background") == 0.0
    fp = dataset_fingerprint(tiny_dataset)
    assert (tmp_path / f"full_s0_f2_{cache_key(variant_config(base, 'full', 0, 2), fp)}.pt").exists()
    r2 = run_ablation(base, tiny_dataset, "weak", seeds=(0,), folds=(2,), cache_dir=tmp_path)
    assert r2.rows == r1.rows
    assert r1.to_json() == r2.to_json()
    with pytest.raises(ValueError):
        run_ablation(base, tiny_dataset, "depth")
