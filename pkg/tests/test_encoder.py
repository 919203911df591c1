import pytest
import torch
import torch.nn as nn

from dogseg.encoder import ConvBlock, Encoder, EncoderConfig, fuse_blocks, standardize_images


def test_block_sizes_use_ceiling():
    cfg = EncoderConfig(input_size=(33, 20), blocks=((4, 2), (4, 2), (4, 1)), fused_blocks=(1, 2), embed_dim=5)
    assert cfg.block_sizes() == [(17, 10), (9, 5), (9, 5)]
    assert cfg.feature_size == (9, 5)


def test_encoder_output_shape():
    cfg = EncoderConfig(input_size=(32, 32), blocks=((4, 2), (6, 2), (8, 1)), fused_blocks=(0, 2), embed_dim=5)
    enc = Encoder(cfg)
    assert enc.fused_channels == 12
    assert enc(torch.rand(3, 3, 32, 32)).shape == (3, 5, 8, 8)
    assert enc(torch.rand(3, 32, 32)).shape == (5, 8, 8)


def test_stages_stop_at_deepest_fused_block():
    cfg = EncoderConfig(input_size=(16, 16), blocks=((4, 2), (4, 2), (4, 2)), fused_blocks=(0,), embed_dim=2)
    assert len(Encoder(cfg).stages) == 1


def test_encoder_rejects_wrong_input():
    enc = Encoder(EncoderConfig(input_size=(16, 16), blocks=((4, 2),), fused_blocks=(0,), embed_dim=2))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 15, 16))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 1, 16, 16))


@pytest.mark.parametrize("kw", [dict(blocks=()), dict(fused_blocks=()), dict(fused_blocks=(7,)),
                                dict(input_norm="batch"), dict(embed_dim=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EncoderConfig(**kw)


def test_standardize_images():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 5 + 2
    y = standardize_images(x)
    assert y.mean(dim=(-2, -1)).abs().max() < 1e-12
    assert (y.var(dim=(-2, -1), unbiased=False) - 1).abs().max() < 1e-3
    # a flat image stays finite
    assert torch.isfinite(standardize_images(torch.ones(1, 3, 4, 4))).all()


def test_input_norm_removes_brightness_offset():
    cfg = EncoderConfig(input_size=(16, 16), blocks=((4, 2),), fused_blocks=(0,), embed_dim=2)
    enc = Encoder(cfg).double().eval()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    torch.testing.assert_close(enc(x), enc(x + 0.3), atol=1e-10, rtol=0)


def test_freeze_norm_stats():
    cfg = EncoderConfig(input_size=(16, 16), blocks=((4, 2),), fused_blocks=(0,), embed_dim=2, freeze_norm_stats=True)
    enc = Encoder(cfg).train()
    bn = [m for m in enc.modules() if isinstance(m, nn.BatchNorm2d)][0]
    assert enc.training and not bn.training
    before = bn.running_mean.clone()
    enc(torch.rand(2, 3, 16, 16))
    assert torch.equal(before, bn.running_mean)


def test_fuse_blocks_resizes_and_checks():
    proj = nn.Conv2d(6, 3, 1)
    out = fuse_blocks([torch.rand(1, 2, 8, 8), torch.rand(1, 4, 4, 4)], proj)
    assert out.shape == (1, 3, 4, 4)
    with pytest.raises(ValueError):
        fuse_blocks([], proj)
    with pytest.raises(ValueError):
        fuse_blocks([torch.rand(1, 2, 4, 4)], proj)


def test_conv_block():
    b = ConvBlock(3, 4, 2)
    assert b(torch.rand(1, 3, 9, 9)).shape == (1, 4, 5, 5)
