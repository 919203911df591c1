import numpy as np
import pytest
import torch

from dogseg.datasets import SynthConfig, generate_synthetic_dataset
from dogseg.encoder import EncoderConfig
from dogseg.model import ModelConfig


def tiny_model_config(size=(32, 32), **kw) -> ModelConfig:
    enc = EncoderConfig(input_size=size, blocks=((8, 2), (8, 2), (8, 1)), fused_blocks=(1, 2), embed_dim=8)
    kw.setdefault("hidden_dim", 4)
    kw.setdefault("head_width", 8)
    return ModelConfig(encoder=enc, **kw)


class FakeDataset:
    """In-memory stand-in: every image of class c is filled with its index."""

    def __init__(self, n_per_class=10, classes=("a", "b"), size=(8, 8)):
        self.image_size = size
        self._n = n_per_class
        self._classes = classes

    @property
    def class_ids(self):
        return sorted(self._classes)

    def usable_indices(self, class_id):
        return list(range(self._n))

    def load(self, class_id, index):
        img = np.full((3, *self.image_size), index, dtype=np.float32)
        mask = np.zeros(self.image_size, dtype=np.uint8)
        mask[2:5, 1:4] = 1
        mask[6, 6] = 1
        return img, mask


@pytest.fixture
def fake_dataset():
    return FakeDataset()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    cfg = SynthConfig(images_per_class=8, image_size=(32, 32), seed=3)
    return generate_synthetic_dataset(cfg, tmp_path_factory.mktemp("tiny") / "data")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def gradient_error(loss_fn, tensors, epsilon=1e-5) -> float:
    """Norm-wise relative error between autograd and central differences over ``tensors``."""
    from dogseg.oracles import FiniteDiffSpec, finite_diff_gradient, relative_error

    tensors = list(tensors)
    analytic = torch.autograd.grad(loss_fn(), tensors)
    analytic = np.concatenate([g.detach().reshape(-1).numpy() for g in analytic])
    sizes = [t.numel() for t in tensors]

    def f(vec):
        with torch.no_grad():
            for t, chunk in zip(tensors, np.split(vec, np.cumsum(sizes)[:-1])):
                t.copy_(torch.from_numpy(chunk).reshape(t.shape))
            return loss_fn().item()

    start = np.concatenate([t.detach().reshape(-1).numpy() for t in tensors])
    numeric = finite_diff_gradient(f, start, FiniteDiffSpec(epsilon=epsilon))
    f(start)
    return relative_error(analytic, numeric)


def tiny_episode_problem(seed, size=16):
    """Float64 full model plus a fixed batch of two 1-shot episodes, for gradient checks."""
    from dogseg.encoder import EncoderConfig
    from dogseg.model import DoGLSTM, ModelConfig
    from dogseg.trainer import loss

    torch.manual_seed(seed)
    enc = EncoderConfig(input_size=(size, size), blocks=((3, 2), (3, 2)), fused_blocks=(0, 1), embed_dim=3)
    model = DoGLSTM(ModelConfig(encoder=enc, hidden_dim=2, head_width=4)).double().train()
    g = torch.Generator().manual_seed(seed)
    si = torch.rand(2, 1, 3, size, size, generator=g, dtype=torch.float64)
    sm = torch.zeros(2, 1, size, size, dtype=torch.uint8)
    sm[:, :, 3:11, 4:12] = 1
    qi = torch.rand(2, 3, size, size, generator=g, dtype=torch.float64)
    truth = torch.zeros(2, size, size, dtype=torch.float64)
    truth[:, 5:12, 2:9] = 1
    return model, (lambda: loss(model(si, sm, qi), truth))


# central differences straddle a ReLU kink for most random instances at eps=1e-5;
# this one stays clear of kinks at that step size
KINK_FREE_SEED = 4


# acceptance criteria record (number, passed, detail) here; printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
