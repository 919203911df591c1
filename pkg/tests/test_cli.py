import json

import numpy as np
import pytest
from PIL import Image

from dogseg import __version__
from dogseg.cli import main

TINY = """\
encoder.blocks = 8:2,8:2,8:1
encoder.fused_blocks = 1,2
encoder.embed_dim = 8
fusion.hidden_dim = 4
head.width = 8
train.total_episodes = 6
train.batch_episodes = 3
train.lr_decay_every = 6
eval.episodes = 2
synth.images_per_class = 6
synth.image_size = 32,32
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["gen-data", "--config", str(root / "tiny.cfg"), "--out", str(root / "data")]) == 0
    return root


def test_version(capsys):
    assert main(["version"]) == 0
    assert __version__ in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train"], ["eval", "--checkpoint", "x"], ["gen-data", "--out"]])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "usage:" in capsys.readouterr().err


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_bad_config_key_exits_1(workspace, capsys):
    assert main(["gen-data", "--out", str(workspace / "x"), "--set", "synth.colour=red"]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_runtime_error_exits_2(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m.pt")]) == 2
    assert "classes.json" in capsys.readouterr().err


def test_train_eval_predict(workspace, capsys):
    data, ck = str(workspace / "data"), str(workspace / "m.pt")
    assert main(["train", "--config", str(workspace / "tiny.cfg"), "--data", data, "--out", ck, "--fold", "1"]) == 0
    report = workspace / "r.json"
    assert main(["eval", "--checkpoint", ck, "--data", data, "--out", str(report), "--seed", "5"]) == 0
    d = json.loads(report.read_text())
    assert d["protocol"]["fold"] == 1 and d["protocol"]["seed"] == 5
    assert d["config"]["encoder.embed_dim"] == 8 and d["config"]["episode.seed"] == 5
    first = report.read_bytes()
    assert main(["eval", "--checkpoint", ck, "--data", data, "--out", str(report), "--seed", "5"]) == 0
    assert report.read_bytes() == first
    assert main(["eval", "--checkpoint", ck, "--data", data, "--shots", "3", "--kshot-mode", "nonparametric",
                 "--bbox", "component"]) == 0
    assert "mIoU" in capsys.readouterr().out

    img, mask = f"{data}/images/circle/0000.png", f"{data}/masks/circle/0000.png"
    out = workspace / "pred.png"
    assert main(["predict", "--checkpoint", ck, "--support", f"{img},{mask}", "--query",
                 f"{data}/images/circle/0001.png", "--out", str(out)]) == 0
    pred = np.asarray(Image.open(out))
    assert pred.shape == (32, 32) and set(np.unique(pred)) <= {0, 255}
    # a query of another size gets a mask of its own size
    big = workspace / "big.png"
    Image.open(f"{data}/images/circle/0001.png").resize((48, 40)).save(big)
    assert main(["predict", "--checkpoint", ck, "--support", f"{img},{mask}", "--query", str(big),
                 "--out", str(out)]) == 0
    assert np.asarray(Image.open(out)).shape == (40, 48)
    assert main(["predict", "--checkpoint", ck, "--support", img, "--query", img, "--out", str(out)]) == 1


def test_plots(workspace):
    pytest.importorskip("matplotlib")
    data, ck = str(workspace / "data"), str(workspace / "p.pt")
    assert main(["train", "--config", str(workspace / "tiny.cfg"), "--data", data, "--out", ck,
                 "--plot", str(workspace / "loss.png")]) == 0
    assert main(["eval", "--checkpoint", ck, "--data", data, "--plot", str(workspace / "iou.png"),
                 "--overlay", str(workspace / "overlay.png")]) == 0
    for name in ("loss.png", "iou.png", "overlay.png"):
        assert (workspace / name).stat().st_size > 0


def test_ablate(workspace, capsys):
    out = workspace / "abl.json"
    argv = ["ablate", "--config", str(workspace / "tiny.cfg"), "--data", str(workspace / "data"), "--axis", "fusion",
            "--seeds", "0", "--folds", "0", "--out", str(out), "--csv", str(workspace / "abl.csv"),
            "--cache", str(workspace / "cache")]
    assert main(argv) == 0
    d = json.loads(out.read_text())
    assert set(d["summary"]) == {"dog_average", "dog_conv", "full"}
    assert (workspace / "abl.csv").read_text().startswith("eval,variant,seed,fold,shots,miou,fb_iou")
    assert len(list((workspace / "cache").glob("*.pt"))) == 3
