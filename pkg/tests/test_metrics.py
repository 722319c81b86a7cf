import itertools

import numpy as np
import pytest
import torch

from munet.loss import selective_dice
from munet.metrics import confusion_matrix, format_kv, format_table, is_undefined, parse_kv, per_class_metrics
from munet.types import UNLABELED, one_hot_expand


def brute_force(pred, truth, K):
    """Per-pixel counting loop, then metric definitions."""
    tp = [0] * K
    fp = [0] * K
    fn = [0] * K
    tn = [0] * K
    cm = [[0] * K for _ in range(K)]
    n = 0
    correct = 0
    for t, p in zip(truth.ravel().tolist(), pred.ravel().tolist()):
        if t == UNLABELED:
            continue
        n += 1
        cm[t][p] += 1
        correct += t == p
        for k in range(K):
            if t == k and p == k:
                tp[k] += 1
            elif t == k:
                fn[k] += 1
            elif p == k:
                fp[k] += 1
            else:
                tn[k] += 1

    def r(a, b):
        return a / b if b else None

    per = [
        dict(
            sensitivity=r(tp[k], tp[k] + fn[k]),
            specificity=r(tn[k], tn[k] + fp[k]),
            precision=r(tp[k], tp[k] + fp[k]),
            dice=r(2 * tp[k], 2 * tp[k] + fp[k] + fn[k]),
        )
        for k in range(K)
    ]
    return np.array(cm), per, r(correct, n)


def test_perfect_prediction_diagonal():
    truth = np.array([[0, 1], [2, 2]], np.uint8)
    cm = confusion_matrix(truth, truth, 3)
    np.testing.assert_array_equal(cm, np.diag([1, 1, 2]))
    rep = per_class_metrics(cm)
    assert rep.accuracy == 1.0
    for c in rep.per_class:
        assert c.sensitivity == c.specificity == c.precision == c.dice == 1.0


def test_all_unlabeled_truth_gives_zero_matrix():
    cm = confusion_matrix(np.zeros((3, 3), np.uint8), np.full((3, 3), UNLABELED, np.uint8), 4)
    assert cm.sum() == 0
    assert is_undefined(per_class_metrics(cm).accuracy)


def test_hand_case():
    truth = np.array([[0, 1], [1, UNLABELED]], np.uint8)
    pred = np.array([[0, 0], [1, 1]], np.uint8)
    cm = confusion_matrix(pred, truth, 2)
    assert cm.tolist() == [[1, 0], [1, 1]]


def test_absent_class_is_undefined_not_zero():
    truth = np.array([[0, 1]], np.uint8)
    rep = per_class_metrics(confusion_matrix(truth, truth, 3))
    absent = rep.per_class[2]
    assert is_undefined(absent.sensitivity)
    assert absent.specificity == 1.0
    mean, skipped = rep.mean("sensitivity")
    assert mean == 1.0 and skipped == 1


def test_errors():
    with pytest.raises(ValueError):
        confusion_matrix(np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.uint8), 2)
    with pytest.raises(ValueError):
        confusion_matrix(np.full((2, 2), UNLABELED, np.uint8), np.zeros((2, 2), np.uint8), 2)
    with pytest.raises(ValueError):
        per_class_metrics(np.array([[1, -1], [0, 1]]))


def _random_maps(rng, K=6, size=32):
    truth = rng.integers(0, K, (size, size)).astype(np.uint8)
    truth[rng.uniform(size=(size, size)) < 0.3] = UNLABELED
    pred = rng.integers(0, K, (size, size)).astype(np.uint8)
    return pred, truth


def _same(a, b):
    if b is None:
        return is_undefined(a)
    return a == b


def test_vectorized_equals_brute_force(rng):
    for _ in range(10):
        pred, truth = _random_maps(rng)
        cm = confusion_matrix(pred, truth, 6)
        cm_ref, per_ref, acc_ref = brute_force(pred, truth, 6)
        np.testing.assert_array_equal(cm, cm_ref)
        rep = per_class_metrics(cm)
        assert rep.accuracy == acc_ref
        assert cm.sum() == (truth != UNLABELED).sum()
        for c, ref in zip(rep.per_class, per_ref):
            for name, v in ref.items():
                assert _same(getattr(c, name), v)


def test_hard_dice_matches_selective_dice_with_factor_two(rng):
    pred, truth = _random_maps(rng, K=4, size=16)
    rep = per_class_metrics(confusion_matrix(pred, truth, 4))
    t, m = one_hot_expand(truth, 4)
    p_onehot, _ = one_hot_expand(pred, 4)
    for k in range(4):
        alpha = np.zeros(4)
        alpha[k] = 1.0
        soft = float(selective_dice(t, m, p_onehot, alpha, 1e-300, factor_two=True))
        assert soft == pytest.approx(rep.per_class[k].dice, abs=1e-9)


def test_permutation_invariance(rng):
    pred, truth = _random_maps(rng, K=4, size=20)
    rep = per_class_metrics(confusion_matrix(pred, truth, 4))
    for perm in itertools.permutations(range(4)):
        lut = np.array(list(perm) + [0] * (256 - 4), dtype=np.uint8)
        lut[UNLABELED] = UNLABELED
        rp = per_class_metrics(confusion_matrix(lut[pred], lut[truth], 4))
        assert rp.accuracy == rep.accuracy
        for k in range(4):
            assert rp.per_class[perm[k]] == rep.per_class[k] or all(
                _same(getattr(rp.per_class[perm[k]], f), getattr(rep.per_class[k], f))
                for f in ("sensitivity", "specificity", "precision", "dice")
            )


def test_report_formats():
    truth = np.array([[0, 1, 1, UNLABELED]], np.uint8)
    pred = np.array([[0, 1, 0, 2]], np.uint8)
    rep = per_class_metrics(confusion_matrix(pred, truth, 3))
    table = format_table(rep, ["a", "b", "c"])
    assert "undefined" in table and "labeled pixels: 3" in table
    kv = parse_kv(format_kv(rep, ["a", "b", "c"]))
    assert kv["labeled_pixels"] == "3"
    assert kv["c.sensitivity"] == "undefined"
    assert float(kv["a.dice"]) == pytest.approx(2 / 3)
