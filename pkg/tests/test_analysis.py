import math

import numpy as np
import pytest

from fedhet.analysis import (
    Clustering,
    TaskMetric,
    accuracy,
    adjusted_rand_index,
    ari_from_labels,
    cross_seed_aggregate,
    f_measure,
    mean_iou,
    permutation_p_value,
    psnr,
    rmse,
    similarity_heatmap,
    task_metric,
)
from fedhet.errors import InvalidParameterError
from fedhet.rng import RngStream


def clustering(labels, ids=None):
    ids = range(len(labels)) if ids is None else ids
    return Clustering.from_arrays(ids, labels)


def brute_force_ari(a, b):
    """Independent oracle: enumerate all point pairs and count agreements."""
    n = len(a)
    ss = aa = bb = 0
    for i in range(n):
        for j in range(i + 1, n):
            sa = a[i] == a[j]
            sb = b[i] == b[j]
            aa += sa
            bb += sb
            ss += sa and sb
    total = n * (n - 1) / 2
    expected = aa * bb / total
    maximum = (aa + bb) / 2
    if maximum == expected:
        return 1.0
    return (ss - expected) / (maximum - expected)


def test_ari_identical_and_relabeled():
    assert adjusted_rand_index(clustering([0, 0, 1, 2]), clustering([0, 0, 1, 2])) == 1.0
    assert adjusted_rand_index(clustering([0, 0, 1, 1]), clustering([1, 1, 0, 0])) == 1.0


def test_ari_hand_case():
    value = adjusted_rand_index(clustering([0, 0, 1, 1]), clustering([0, 1, 0, 1]))
    assert abs(value - (-0.5)) < 1e-12


def test_ari_degenerate_partitions():
    assert ari_from_labels(np.zeros(5, dtype=int), np.zeros(5, dtype=int)) == 1.0
    assert ari_from_labels(np.arange(5), np.arange(5)) == 1.0


def test_ari_id_alignment():
    a = Clustering.from_arrays([10, 20, 30, 40], [0, 0, 1, 1])
    b = Clustering.from_arrays([40, 30, 20, 10], [1, 1, 0, 0])
    assert adjusted_rand_index(a, b) == 1.0
    with pytest.raises(InvalidParameterError):
        adjusted_rand_index(a, Clustering.from_arrays([1, 2, 3, 4], [0, 0, 1, 1]))


def _restricted_growth(n, max_groups=3):
    """All canonical labelings of n points into <= max_groups groups."""
    out = []

    def rec(prefix, top):
        if len(prefix) == n:
            out.append(tuple(prefix))
            return
        for v in range(min(top + 1, max_groups - 1) + 1):
            rec(prefix + [v], max(top, v))

    rec([0], 0)
    return out


def test_ari_matches_bruteforce_exhaustive_small():
    for n in range(2, 7):
        labelings = _restricted_growth(n)
        arrays = [np.array(p) for p in labelings]
        for i, a in enumerate(arrays):
            for b in arrays[i:]:
                fast = ari_from_labels(a, b)
                slow = brute_force_ari(a.tolist(), b.tolist())
                assert abs(fast - slow) < 1e-12


def test_ari_relabel_invariance():
    rng = RngStream(1)
    for _ in range(50):
        a = rng.categorical_many([0.4, 0.4, 0.2], 12)
        b = rng.categorical_many([0.3, 0.3, 0.4], 12)
        relabel = {0: 2, 1: 0, 2: 1}
        a2 = np.array([relabel[v] for v in a])
        assert abs(ari_from_labels(a, b) - ari_from_labels(a2, b)) < 1e-12


def test_permutation_p_value_all_below():
    labels = [0] * 10 + [1] * 10
    a = clustering(labels)
    p = permutation_p_value(a, a, 100, RngStream(2))
    assert abs(p - 1 / 101) < 1e-12
    assert f"{p:.4f}" == "0.0099"


def test_permutation_p_value_extremes():
    a = clustering([0, 0, 1, 1])
    p = permutation_p_value(a, a, 1, RngStream(3))
    assert p in (0.5, 1.0)
    # Identical trivial labelings: every permutation matches, p = 1.
    t = clustering([0, 0, 0, 0])
    assert permutation_p_value(t, t, 10, RngStream(4)) == 1.0


def test_permutation_p_value_in_unit_interval():
    rng = RngStream(5)
    for trial in range(10):
        a = clustering(rng.categorical_many([0.5, 0.5], 12).tolist())
        b = clustering(rng.categorical_many([0.5, 0.5], 12).tolist())
        p = permutation_p_value(a, b, 19, rng.derive(trial))
        assert 0 < p <= 1


def test_similarity_heatmap_shape_and_symmetry():
    rng = RngStream(6)
    tasks = {
        "a": clustering([0, 0, 1, 1, 2, 2]),
        "b": clustering([0, 1, 0, 1, 2, 2]),
        "c": clustering([2, 2, 1, 1, 0, 0]),
    }
    cells = similarity_heatmap(tasks, 50, rng)
    assert len(cells) == 9
    for name in tasks:
        assert cells[(name, name)].ari == 1.0
        assert cells[(name, name)].p_value is None
    assert cells[("a", "b")].ari == cells[("b", "a")].ari
    assert cells[("a", "c")].ari == 1.0  # relabeled copy of a


def test_cross_seed_aggregate_hand_case():
    mean, std = cross_seed_aggregate([0.071, 0.072, 0.073])
    assert abs(mean - 0.072) < 1e-15
    assert abs(std - 0.001) < 1e-12
    same_mean, same_std = cross_seed_aggregate([0.5, 0.5, 0.5])
    assert same_std == 0.0
    with pytest.raises(InvalidParameterError):
        cross_seed_aggregate([0.5])


def test_cross_seed_matches_two_pass_oracle():
    rng = RngStream(7)
    values = rng.normals(20)
    mean, std = cross_seed_aggregate(values)
    oracle_mean = sum(float(v) for v in values) / 20
    oracle_std = math.sqrt(
        sum((float(v) - oracle_mean) ** 2 for v in values) / 19
    )
    assert abs(mean - oracle_mean) < 1e-12
    assert abs(std - oracle_std) < 1e-12


def test_rmse_and_perfect_predictions():
    preds = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert rmse(preds, preds) == 0.0
    assert accuracy(np.array([1, 2]), np.array([1, 2])) == 1.0
    assert mean_iou(np.array([0, 1]), np.array([0, 1]), 2) == 1.0


def test_psnr_formula_and_sentinel():
    preds = np.array([1.0, 0.0])
    targets = np.array([0.0, 1.0])  # MSE=1, peak=1
    assert psnr(preds, targets, peak=1.0) == 0.0
    assert psnr(targets, targets, peak=1.0) == math.inf
    # Default peak is the targets' max absolute value.
    assert abs(psnr(np.array([0.0]), np.array([2.0]), None) - 10 * math.log10(1.0)) < 1e-12


def test_miou_class_handling():
    pred = np.array([0, 0, 1, 1])
    tgt = np.array([0, 1, 1, 1])
    # class 0: inter 1, union 2; class 1: inter 2, union 3; class 2 absent.
    expected = (1 / 2 + 2 / 3) / 2
    assert abs(mean_iou(pred, tgt, 3) - expected) < 1e-12


def test_f_measure_hand_cases():
    # precision = recall = 0.5 => F = 0.5
    pred = np.array([1.0, 1.0, 0.0, 0.0])
    tgt = np.array([1.0, 0.0, 1.0, 0.0])
    assert f_measure(pred, tgt, threshold=0.5) == 0.5
    assert f_measure(np.zeros(4), np.zeros(4)) == 0.0


def test_task_metric_dispatch():
    preds = np.array([0.0, 1.0])
    tgts = np.array([0.0, 1.0])
    assert task_metric(TaskMetric.RMSE, preds, tgts) == 0.0
    assert task_metric(TaskMetric.ACCURACY, preds, tgts) == 1.0
    assert task_metric(TaskMetric.MIOU, preds, tgts, num_classes=2) == 1.0
    assert task_metric(TaskMetric.F_MEASURE, preds, tgts) == 1.0
    assert task_metric(TaskMetric.PSNR, preds, tgts) == math.inf
