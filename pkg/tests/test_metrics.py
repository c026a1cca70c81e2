import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from lidarfuse.errors import ContractError
from lidarfuse.metrics import confusion, miou, panoptic_quality
from lidarfuse.panoptic import PanopticPrediction


@given(st.integers(0, 10_000))
def test_miou_matches_confusion_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 5, 200)
    pred = rng.integers(0, 5, 200)
    rep = miou(pred, gt, 5, ignore_index=0)
    ious, mean = oracles.confusion_miou(pred.tolist(), gt.tolist(), 5, 0)
    assert rep.miou == pytest.approx(mean, abs=1e-12)
    for c, v in ious.items():
        assert rep.iou[c] == pytest.approx(v, abs=1e-12)
    assert np.isnan(rep.iou[0])


def test_confusion_orientation():
    conf = confusion(np.array([1, 1]), np.array([0, 1]), 2)
    np.testing.assert_array_equal(conf, [[0, 1], [0, 1]])


def test_absent_class_excluded():
    rep = miou(np.array([1, 1]), np.array([1, 1]), 4)
    assert rep.miou == 1.0 and np.isnan(rep.iou[2])
    with pytest.raises(ContractError):
        miou(np.array([7]), np.array([1]), 4)


def random_panoptic(rng, n=60, num_classes=4, things=(2, 3)):
    sem = rng.integers(0, num_classes, n)
    inst = np.where(np.isin(sem, things), rng.integers(0, 4, n), 0)
    return sem, inst


@given(st.integers(0, 10_000))
def test_pq_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    gs, gi = random_panoptic(rng)
    # predictions that partially agree so that some segments match
    ps, pi = gs.copy(), gi.copy()
    flip = rng.random(len(gs)) < 0.25
    ps[flip], pi[flip] = random_panoptic(rng, flip.sum())
    rep = panoptic_quality(PanopticPrediction(ps, pi), PanopticPrediction(gs, gi), 4, (2, 3))
    ref = oracles.panoptic(ps.tolist(), pi.tolist(), gs.tolist(), gi.tolist(), 4, {2, 3}, 0)
    for key, value in ref.items():
        got = getattr(rep, key)
        assert (math.isnan(got) and math.isnan(value)) or got == pytest.approx(value, abs=1e-12)


def test_perfect_prediction_scores_one(rng):
    gs, gi = random_panoptic(rng)
    p = PanopticPrediction(gs, gi)
    rep = panoptic_quality(p, p, 4, (2, 3))
    assert rep.pq == rep.sq == rep.rq == rep.miou == 1.0
    assert rep.pq_dagger == 1.0


def test_thing_instance_zero_not_a_segment():
    sem = np.array([2, 2, 2])
    rep = panoptic_quality(PanopticPrediction(sem, np.array([0, 0, 0])),
                           PanopticPrediction(sem, np.array([1, 1, 1])), 3, (2,))
    assert rep.per_class_pq[2][3:] == (0, 0, 1)
