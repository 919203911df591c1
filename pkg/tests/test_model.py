import numpy as np
import pytest
import torch
from conftest import tiny_model_config

from dogseg.episodes import make_folds, sample_episode
from dogseg.model import BackgroundModel, DoGLSTM, ModelConfig, OracleModel
from dogseg.recurrent_fusion import AverageFusion, BConvLSTM, ConvLayerFusion


def _batch(b=2, k=1, size=32):
    si = torch.rand(b, k, 3, size, size)
    sm = torch.zeros(b, k, size, size, dtype=torch.uint8)
    sm[..., 8:20, 10:24] = 1
    return si, sm, torch.rand(b, 3, size, size)


@pytest.mark.parametrize("fusion,cls", [("average", AverageFusion), ("conv_layer", ConvLayerFusion),
                                        ("bconvlstm", BConvLSTM)])
def test_forward_all_fusions(fusion, cls):
    model = DoGLSTM(tiny_model_config(fusion=fusion))
    assert isinstance(model.fusion, cls)
    out = model(*_batch())
    assert out.shape == (2, 32, 32) and ((out >= 0) & (out <= 1)).all()


def test_step_counts():
    assert tiny_model_config().n_steps == 4
    assert tiny_model_config(use_dog=False).n_steps == 1
    assert tiny_model_config(dog_single=True).n_steps == 1
    assert tiny_model_config(shots=5).n_steps == 20
    assert tiny_model_config(shots=5, kshot_mode="nonparametric").n_steps == 4
    assert tiny_model_config(combine="dot").step_channels == 1


def test_prototypes_shape_and_no_dog():
    model = DoGLSTM(tiny_model_config())
    feats = torch.rand(2, 3, 8, 8, 8)
    masks = torch.ones(2, 3, 32, 32)
    assert model.prototypes(feats, masks).shape == (2, 3, 4, 8)
    raw = DoGLSTM(tiny_model_config(use_dog=False))
    torch.testing.assert_close(raw.prototypes(feats, masks)[:, :, 0], feats.mean(dim=(-2, -1)))


def test_kshot_forward_modes():
    par = DoGLSTM(tiny_model_config(shots=3))
    assert par(*_batch(k=3)).shape == (2, 32, 32)
    one = DoGLSTM(tiny_model_config())
    assert one(*_batch(k=3), kshot_mode="nonparametric").shape == (2, 32, 32)


def test_dot_combine_model():
    model = DoGLSTM(tiny_model_config(combine="dot"))
    assert model(*_batch()).shape == (2, 32, 32)


def test_forward_rejects_bad_shapes():
    model = DoGLSTM(tiny_model_config())
    si, sm, qi = _batch()
    with pytest.raises(ValueError):
        model(si[:, 0], sm, qi)


@pytest.mark.parametrize("kw", [dict(fusion="max"), dict(combine="cat"), dict(kshot_mode="vote"), dict(shots=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_config_dict_round_trip():
    cfg = tiny_model_config(fusion="average")
    assert ModelConfig(**cfg.to_dict()) == cfg


def test_predict_episodes(tiny_dataset):
    fold = make_folds(tiny_dataset.class_ids, 4)[0]
    eps = [sample_episode(tiny_dataset, c, 1, i) for i, c in enumerate(fold.test_classes)]
    model = DoGLSTM(tiny_model_config()).train()
    pred = model.predict_episodes(eps)
    assert pred.shape == (2, 32, 32) and pred.dtype == np.uint8
    assert model.training  # mode restored
    assert np.array_equal(OracleModel().predict_episodes(eps), np.stack([e.query_mask for e in eps]))
    assert BackgroundModel().predict_episodes(eps).sum() == 0
