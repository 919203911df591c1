import numpy as np
import pytest

from dogseg.episodes import make_folds
from dogseg.evaluation import ClassStats, episode_iou, run_protocol
from dogseg.model import BackgroundModel, OracleModel


def test_episode_iou_cases():
    t = np.array([[1, 1], [0, 0]])
    assert episode_iou(t, t) == (2, 2)
    assert episode_iou(np.zeros((2, 2)), t) == (0, 2)
    assert episode_iou(np.ones((2, 2)), t) == (2, 4)
    assert episode_iou(np.zeros((2, 2)), np.zeros((2, 2))) == (0, 0)
    with pytest.raises(ValueError):
        episode_iou(np.zeros((2, 3)), t)


def test_class_stats_accumulate_before_dividing():
    s = ClassStats()
    s.add(1, 1)
    s.add(0, 9)
    assert s.iou() == pytest.approx(0.1)
    assert s.iou(per_episode_mean=True) == pytest.approx(0.5)
    merged = s.merge(ClassStats(5, 10, 1, 0.5, 1))
    assert merged.intersection == 6 and merged.union == 20 and merged.episodes == 3
    assert ClassStats().iou() == 0.0


@pytest.fixture(scope="module")
def fold(tiny_dataset):
    return make_folds(tiny_dataset.class_ids, 4)[1]


def test_oracle_scores_one(tiny_dataset, fold):
    r = run_protocol(OracleModel(), tiny_dataset, fold, 5, 1, 0)
    assert r.miou == 1.0 and r.fb_iou == 1.0
    assert set(r.per_class) == set(fold.test_classes)
    assert all(s.episodes == 5 for s in r.per_class.values())


def test_background_model_fb_iou_exceeds_miou(tiny_dataset, fold):
    r = run_protocol(BackgroundModel(), tiny_dataset, fold, 5, 1, 0)
    assert r.miou == 0.0
    assert r.fb_iou > r.miou
    assert r.fb_iou == pytest.approx(r.background_iou / 2)
    with_bg = run_protocol(BackgroundModel(), tiny_dataset, fold, 5, 1, 0, include_background=True)
    assert with_bg.miou == pytest.approx(r.background_iou / 3)


def test_reports_are_byte_identical(tiny_dataset, fold):
    a = run_protocol(OracleModel(), tiny_dataset, fold, 4, 2, 7, config={"x": 1}).to_json()
    b = run_protocol(OracleModel(), tiny_dataset, fold, 4, 2, 7, config={"x": 1}).to_json()
    assert a == b
    d = __import__("json").loads(a)
    assert d["protocol"]["shots"] == 2 and d["config"] == {"x": 1}


def test_protocol_validation(tiny_dataset, fold):
    with pytest.raises(ValueError):
        run_protocol(OracleModel(), tiny_dataset, fold, 0)
