import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ritseg.metrics import (
    ScoreReport,
    class_scores,
    confusion_matrix,
    dataset_miou,
    global_miou,
    image_miou,
    overall_from_size,
    overall_score,
    score_predictions,
)


def counting_oracle(pred, truth, c=4):
    iou, f1 = [], []
    for k in range(c):
        tp = fp = fn = 0
        for p, t in zip(pred.ravel(), truth.ravel()):
            tp += p == k and t == k
            fp += p == k and t != k
            fn += p != k and t == k
        if tp + fp + fn == 0:
            iou.append(1.0)
            f1.append(1.0)
        else:
            iou.append(tp / (tp + fp + fn))
            f1.append(2 * tp / (2 * tp + fp + fn))
    return np.array(iou), np.array(f1)


def test_confusion_orientation():
    cm = confusion_matrix(np.array([1, 1, 0]), np.array([0, 1, 2]))
    assert cm[0, 1] == 1 and cm[1, 1] == 1 and cm[2, 0] == 1 and cm.sum() == 3


def test_worked_rates():
    cm = np.zeros((4, 4), int)
    cm[1, 1] = 3  # TP
    cm[0, 1] = 1  # FP for class 1
    cm[1, 2] = 2  # FN for class 1
    iou, f1 = class_scores(cm)
    assert iou[1] == pytest.approx(0.5)
    assert f1[1] == pytest.approx(6 / 9, abs=1e-4)


def test_absent_class_scores_one():
    p = np.zeros((4, 4), int)
    iou, f1 = class_scores(confusion_matrix(p, p))
    np.testing.assert_array_equal(iou, 1.0)
    np.testing.assert_array_equal(f1, 1.0)
    assert image_miou(p, p) == 1.0


def test_against_counting_oracle(rng):
    for _ in range(50):
        pred = rng.integers(0, 4, size=(16, 16))
        truth = rng.integers(0, rng.integers(1, 5), size=(16, 16))
        iou, f1 = class_scores(confusion_matrix(pred, truth))
        oi, of = counting_oracle(pred, truth)
        np.testing.assert_allclose(iou, oi, atol=1e-6)
        np.testing.assert_allclose(f1, of, atol=1e-6)


def test_dataset_miou_mean_of_images():
    perfect = np.zeros((2, 2), int)
    half_t = np.array([[0, 0], [1, 1]])
    half_p = np.array([[0, 0], [0, 0]])
    # classes: 0 IoU 0.5, 1 IoU 0, 2 and 3 absent -> 1, 1  => 2.5 / 4
    assert image_miou(half_p, half_t) == pytest.approx(0.625)
    custom = [np.array([[0, 1], [2, 3]]), np.array([[0, 1], [2, 3]])]
    assert dataset_miou([perfect, custom[0]], [perfect, custom[1]]) == 1.0
    a = [np.zeros((2, 2), int)]
    b = np.array([[0, 0], [2, 2]])
    pred_b = np.array([[0, 2], [2, 2]])  # class 0: 2/3, class 2: 2/3
    m = image_miou(pred_b, b)
    assert dataset_miou(a + [pred_b], a + [b]) == pytest.approx((1.0 + m) / 2)


def test_dataset_miou_two_images_example(monkeypatch):
    import ritseg.metrics as M

    values = iter([1.0, 0.5])
    monkeypatch.setattr(M, "image_miou", lambda p, t: next(values))
    assert M.dataset_miou([0, 0], [0, 0]) == 0.75


def test_dataset_miou_errors():
    with pytest.raises(ValueError):
        dataset_miou([], [])
    with pytest.raises(ValueError):
        dataset_miou([np.zeros(2)], [])
    with pytest.raises(ValueError):
        confusion_matrix(np.zeros(3, int), np.zeros(4, int))


def test_global_differs_from_per_image():
    t1, p1 = np.zeros((2, 2), int), np.zeros((2, 2), int)
    t2, p2 = np.array([[1, 1], [1, 1]]), np.array([[1, 1], [1, 0]])
    assert global_miou([p1, p2], [t1, t2]) != dataset_miou([p1, p2], [t1, t2])


def test_overall_table_rows():
    assert overall_score(0.953, 248_900).overall == pytest.approx(0.9765, abs=1e-9)
    assert overall_score(0.953, 248_900).overall == pytest.approx(0.976, abs=5e-4)
    assert overall_from_size(0.895, 1.6) == pytest.approx(0.76, abs=1e-9)
    assert overall_from_size(0.895, 1.6) == pytest.approx(0.762, abs=3e-3)
    assert overall_score(1.0, 1000).overall == 1.0


def test_overall_size_conventions():
    r = overall_score(0.9, 248_900)
    assert r.size_mb == pytest.approx(0.9956) and r.size_mib == pytest.approx(995_600 / 2**20)
    big = overall_score(0.9, 1_000_000)
    assert big.overall == pytest.approx((0.9 + 1 / 4.0) / 2)
    assert big.overall_mib == pytest.approx((0.9 + 2**20 / 4e6) / 2)
    with pytest.raises(ValueError):
        overall_score(0.9, 0)


def test_overall_monotone():
    ms = np.linspace(0, 1, 11)
    vals = [overall_from_size(m, 2.0) for m in ms]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    sizes = np.linspace(0.2, 10, 30)
    vals = [overall_from_size(0.8, s) for s in sizes]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_score_report(tmp_path, rng):
    truths = [rng.integers(0, 4, size=(8, 8)) for _ in range(3)]
    report = score_predictions(truths, truths, 248_900)
    assert report.miou == 1.0 and report.mean_f1 == 1.0 and report.images == 3
    assert report.overall == pytest.approx(1.0)
    assert "mIoU          1.0000" in report.to_text()
    report.write(tmp_path / "r.txt")
    kv = dict(line.split("=") for line in (tmp_path / "r.txt").read_text().splitlines())
    assert float(kv["miou"]) == 1.0 and int(kv["param_count"]) == 248_900
    assert isinstance(ScoreReport(), ScoreReport)


labels16 = arrays(np.int64, (16, 16), elements=st.integers(0, 3))


@settings(max_examples=60, deadline=None)
@given(labels16, labels16)
def test_transposition_symmetry(p, t):
    cm1, cm2 = confusion_matrix(p, t), confusion_matrix(t, p)
    np.testing.assert_array_equal(cm1, cm2.T)
    assert image_miou(p, t) == pytest.approx(image_miou(t, p))
    iou, f1 = class_scores(cm1)
    assert np.all((0 <= iou) & (iou <= 1) & (iou <= f1 + 1e-12) & (f1 <= 1))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(labels16, labels16), min_size=1, max_size=5), st.randoms())
def test_dataset_miou_permutation_invariant(pairs, rnd):
    preds, truths = zip(*pairs)
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    a = dataset_miou(list(preds), list(truths))
    b = dataset_miou([preds[i] for i in order], [truths[i] for i in order])
    assert a == pytest.approx(b, abs=1e-12)
