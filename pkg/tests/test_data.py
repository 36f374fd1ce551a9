import numpy as np
import pytest

from fedhet.data import (
    GroupedDataset,
    LabelProbabilityTable,
    SyntheticConfig,
    TaskKind,
    argmax_label,
    filter_top_k_classes,
    generate_synthetic_grouped,
    load_dataset,
    load_label_table,
    save_dataset,
    save_label_table,
)
from fedhet.errors import InvalidParameterError, ParseError
from fedhet.rng import RngStream


def make_dataset(labels, groups=None):
    n = len(labels)
    return GroupedDataset(
        ids=np.arange(n, dtype=np.int64),
        features=np.arange(2 * n, dtype=float).reshape(n, 2),
        targets=np.zeros((n, 1)),
        class_labels=np.array(labels, dtype=np.int64),
        latent_groups=None if groups is None else np.array(groups, dtype=np.int64),
    )


def test_argmax_label():
    assert argmax_label([0.1, 0.7, 0.2]) == 1
    assert argmax_label([0.5, 0.5]) == 0  # tie to lowest index
    assert argmax_label([1.0]) == 0
    with pytest.raises(InvalidParameterError):
        argmax_label([])


def test_filter_top_k_counts_and_reindex():
    # counts: class 7 -> 5, class 2 -> 3, class 9 -> 1
    labels = [7] * 5 + [2] * 3 + [9]
    out = filter_top_k_classes(make_dataset(labels), 2)
    assert len(out) == 8
    assert out.num_classes == 2
    # class 7 (largest) -> 0, class 2 -> 1
    assert out.class_labels.tolist() == [0] * 5 + [1] * 3


def test_filter_top_k_preserves_order_and_tiebreak():
    # Equal counts: tie goes to the lower class index.
    labels = [5, 3, 5, 3, 8]
    out = filter_top_k_classes(make_dataset(labels), 2)
    assert out.ids.tolist() == [0, 1, 2, 3]
    assert out.class_labels.tolist() == [1, 0, 1, 0]


def test_filter_top_k_noop_and_error():
    labels = [0, 1, 1, 2]
    same = filter_top_k_classes(make_dataset(labels), 3)
    assert len(same) == 4
    with pytest.raises(InvalidParameterError):
        filter_top_k_classes(make_dataset(labels), 4)


def test_labels_from_probabilities():
    table = LabelProbabilityTable(
        ids=np.array([0, 1]), rows=np.array([[0.2, 0.8], [0.9, 0.1]])
    )
    from fedhet.data import labels_from_probabilities

    assert labels_from_probabilities(table).tolist() == [1, 0]


def test_synthetic_determinism():
    config = SyntheticConfig(num_groups=4, num_points=200)
    a = generate_synthetic_grouped(config, RngStream(1).derive("d"))
    b = generate_synthetic_grouped(config, RngStream(1).derive("d"))
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.targets, b.targets)
    assert np.array_equal(a.class_labels, b.class_labels)


def test_synthetic_rho_one_label_equals_group():
    config = SyntheticConfig(num_groups=4, num_points=300, label_correlation=1.0)
    ds = generate_synthetic_grouped(config, RngStream(2))
    assert np.array_equal(ds.class_labels, ds.latent_groups)


def test_synthetic_rho_zero_label_independent_of_group():
    # Chi-square independence test on the (label, group) contingency table.
    config = SyntheticConfig(num_groups=4, num_points=4000, label_correlation=0.0)
    ds = generate_synthetic_grouped(config, RngStream(3))
    table = np.zeros((4, 4))
    np.add.at(table, (ds.class_labels, ds.latent_groups), 1.0)
    expected = table.sum(axis=1)[:, None] * table.sum(axis=0)[None, :] / table.sum()
    chi2 = float(((table - expected) ** 2 / expected).sum())
    # dof = 9; chi-square 0.99 quantile is 21.67, so p > 0.01 <=> chi2 < 21.67
    assert chi2 < 21.67


def test_synthetic_noise_free_targets_are_deterministic_in_features():
    config = SyntheticConfig(
        num_groups=2, num_points=100, feature_noise=0.0, target_noise=0.0,
        label_correlation=1.0,
    )
    ds = generate_synthetic_grouped(config, RngStream(4))
    # Same group + zero noise => identical features => identical targets.
    for g in (0, 1):
        rows = np.nonzero(ds.latent_groups == g)[0]
        assert np.allclose(ds.features[rows], ds.features[rows[0]])
        assert np.allclose(ds.targets[rows], ds.targets[rows[0]])


def test_synthetic_group_feature_means():
    config = SyntheticConfig(num_groups=3, num_points=6000, feature_noise=0.5)
    ds = generate_synthetic_grouped(config, RngStream(5))
    for g in range(3):
        rows = ds.latent_groups == g
        n_g = rows.sum()
        spread = ds.features[rows] - ds.features[rows].mean(axis=0)
        # Per-coordinate sample mean is within 3 sigma / sqrt(n) of the center.
        assert np.all(np.abs(spread.mean(axis=0)) < 3 * 0.5 / np.sqrt(n_g) + 1e-9)


def test_synthetic_centers_are_separated():
    config = SyntheticConfig(num_groups=8, num_points=800, feature_noise=0.5)
    ds = generate_synthetic_grouped(config, RngStream(6))
    centers = np.stack(
        [ds.features[ds.latent_groups == g].mean(axis=0) for g in range(8)]
    )
    dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    # 4x noise separation, measured loosely through the empirical centers.
    assert dists.min() > 3 * 0.5


def test_synthetic_rejects_bad_config():
    with pytest.raises(InvalidParameterError):
        generate_synthetic_grouped(SyntheticConfig(num_groups=1), RngStream(0))
    with pytest.raises(InvalidParameterError):
        generate_synthetic_grouped(
            SyntheticConfig(num_groups=8, num_points=4), RngStream(0)
        )
    with pytest.raises(InvalidParameterError):
        generate_synthetic_grouped(
            SyntheticConfig(feature_noise=float("nan")), RngStream(0)
        )


def test_dataset_roundtrip(tmp_path):
    ds = generate_synthetic_grouped(SyntheticConfig(num_groups=3, num_points=50), RngStream(7))
    path = tmp_path / "ds.csv"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.ids, ds.ids)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.targets, ds.targets)
    assert np.array_equal(back.class_labels, ds.class_labels)
    assert np.array_equal(back.latent_groups, ds.latent_groups)
    assert back.task_kind == ds.task_kind


def test_dataset_roundtrip_without_optional_columns(tmp_path):
    ds = GroupedDataset(
        ids=np.array([3, 9]),
        features=np.array([[0.5], [1.5]]),
        targets=np.array([[2.0], [4.0]]),
    )
    path = tmp_path / "ds.csv"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.class_labels is None and back.latent_groups is None


def test_load_rejects_duplicate_id(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "id,feat0,tgt0,class,group\n1,0.0,0.0,,\n1,1.0,1.0,,\n", encoding="utf-8"
    )
    with pytest.raises(ParseError, match="line 3"):
        load_dataset(path)


def test_load_rejects_ragged_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,feat0,tgt0,class,group\n1,0.0,0.0,\n", encoding="utf-8")
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(path)


def test_load_rejects_bad_header_and_empty(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("ident,feat0,tgt0,class,group\n", encoding="utf-8")
    with pytest.raises(ParseError, match="header"):
        load_dataset(path)
    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(ParseError):
        load_dataset(empty)
    headeronly = tmp_path / "headeronly.csv"
    headeronly.write_text("id,feat0,tgt0,class,group\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_dataset(headeronly)


def test_label_table_roundtrip(tmp_path):
    table = LabelProbabilityTable(
        ids=np.array([5, 6]), rows=np.array([[0.25, 0.75], [1.0, 0.0]])
    )
    path = tmp_path / "probs.csv"
    save_label_table(table, path)
    back = load_label_table(path)
    assert np.array_equal(back.ids, table.ids)
    assert np.array_equal(back.rows, table.rows)
