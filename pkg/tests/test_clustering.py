import numpy as np
import pytest

from fedhet.analysis import ari_from_labels
from fedhet.clustering import (
    EmbeddingMatrix,
    extract_embeddings,
    kmeans_assign,
    kmeans_fit,
    load_clusters,
    load_embeddings,
    save_clusters,
    save_embeddings,
    silhouette_score,
    silhouette_sweep,
)
from fedhet.data import SyntheticConfig, generate_synthetic_grouped
from fedhet.errors import InvalidParameterError, ShapeError
from fedhet.nn import Architecture, ModelParams, build_layout, init_params
from fedhet.rng import RngStream


def blobs(k, per, spread=0.05, seed=0, dim=2):
    rng = RngStream(seed)
    centers = 10.0 * rng.normals((k, dim))
    points = np.concatenate(
        [centers[i] + spread * rng.normals((per, dim)) for i in range(k)]
    )
    labels = np.repeat(np.arange(k), per)
    return EmbeddingMatrix(np.arange(k * per, dtype=np.int64), points), labels


def test_extract_embeddings_shape_and_order():
    ds = generate_synthetic_grouped(SyntheticConfig(num_groups=3, num_points=40), RngStream(1))
    arch = Architecture(ds.feature_dim, (6, 5), "tanh", ds.target_dim)
    params = init_params(arch, RngStream(2))
    em = extract_embeddings(params, arch, ds)
    assert em.vectors.shape == (40, 5)
    assert np.array_equal(em.ids, ds.ids)
    # Identical inputs produce identical rows.
    ds.features[1] = ds.features[0]
    em2 = extract_embeddings(params, arch, ds)
    assert np.array_equal(em2.vectors[0], em2.vectors[1])


def test_extract_embeddings_zero_net():
    ds = generate_synthetic_grouped(SyntheticConfig(num_groups=2, num_points=10), RngStream(3))
    arch = Architecture(ds.feature_dim, (4,), "tanh", ds.target_dim)
    params = ModelParams(np.zeros_like(init_params(arch, RngStream(0)).values), build_layout(arch))
    em = extract_embeddings(params, arch, ds)
    assert np.all(em.vectors == 0.0)


def test_kmeans_exact_two_clusters():
    em = EmbeddingMatrix(np.arange(4), np.array([[0., 0.], [0., 0.], [4., 4.], [4., 4.]]))
    model = kmeans_fit(em, k=2, seed=0)
    assert model.inertia == 0.0
    assert sorted(model.centroids.tolist()) == [[0.0, 0.0], [4.0, 4.0]]
    assert len(set(model.assignments.tolist())) == 2


def test_kmeans_k1_is_global_mean():
    em, _ = blobs(3, 10, seed=4)
    model = kmeans_fit(em, k=1, seed=0)
    assert np.allclose(model.centroids[0], em.vectors.mean(axis=0))
    expected = ((em.vectors - em.vectors.mean(axis=0)) ** 2).sum()
    assert abs(model.inertia - expected) < 1e-8


def test_kmeans_k_equals_n():
    em, _ = blobs(2, 3, seed=5)
    model = kmeans_fit(em, k=6, seed=1)
    assert model.inertia < 1e-18
    assert sorted(model.assignments.tolist()) == list(range(6))


def test_kmeans_rejects_k_larger_than_n():
    em, _ = blobs(2, 2, seed=6)
    with pytest.raises(InvalidParameterError):
        kmeans_fit(em, k=5, seed=0)


def test_kmeans_recovers_separated_blobs():
    em, truth = blobs(4, 25, seed=7)
    model = kmeans_fit(em, k=4, seed=3)
    assert ari_from_labels(model.assignments, truth) == 1.0


def test_kmeans_permutation_invariance_up_to_relabeling():
    em, truth = blobs(4, 25, seed=8)
    perm = RngStream(9).permutation(len(em))
    em_perm = EmbeddingMatrix(em.ids[perm], em.vectors[perm])
    a = kmeans_fit(em, k=4, seed=5)
    b = kmeans_fit(em_perm, k=4, seed=5)
    assert ari_from_labels(a.assignments[perm], b.assignments) == 1.0


def test_kmeans_assign_ties_and_fixpoint():
    em, _ = blobs(3, 15, seed=10)
    model = kmeans_fit(em, k=3, seed=2)
    again = kmeans_assign(model, em)
    assert np.array_equal(again, model.assignments)
    # Exact centroid point goes to its own cluster; equidistant to lowest.
    model.centroids = np.array([[0.0, 0.0], [2.0, 0.0]])
    probe = EmbeddingMatrix(np.arange(2), np.array([[2.0, 0.0], [1.0, 0.0]]))
    out = kmeans_assign(model, probe)
    assert out.tolist() == [1, 0]


def test_kmeans_every_cluster_nonempty():
    # Duplicated points force potential empty clusters; repair must fill them.
    pts = np.array([[0.0, 0.0]] * 8 + [[5.0, 5.0]] * 8 + [[9.0, 0.0]])
    em = EmbeddingMatrix(np.arange(len(pts)), pts)
    for seed in range(6):
        model = kmeans_fit(em, k=3, seed=seed)
        assert len(set(model.assignments.tolist())) == 3


def test_silhouette_hand_case():
    em = EmbeddingMatrix(np.arange(4), np.array([[0.0], [0.1], [10.0], [10.1]]))
    s = silhouette_score(em, np.array([0, 0, 1, 1]))
    assert abs(s - 0.9900) < 1e-4


def test_silhouette_random_split_near_zero():
    rng = RngStream(11)
    points = rng.normals((500, 3))
    em = EmbeddingMatrix(np.arange(500), points)
    labels = (rng.uniforms(500) > 0.5).astype(int)
    assert abs(silhouette_score(em, labels)) < 0.1


def test_silhouette_coincident_clusters_nonpositive():
    pts = np.array([[1.0, 1.0]] * 6)
    em = EmbeddingMatrix(np.arange(6), pts)
    s = silhouette_score(em, np.array([0, 1, 0, 1, 0, 1]))
    assert s <= 0.0


def test_silhouette_single_cluster_rejected():
    em, _ = blobs(2, 5, seed=12)
    with pytest.raises(InvalidParameterError):
        silhouette_score(em, np.zeros(len(em), dtype=int))


def brute_silhouette(points, labels):
    n = len(points)
    scores = []
    for i in range(n):
        same = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not same:
            scores.append(0.0)
            continue
        a = np.mean([np.linalg.norm(points[i] - points[j]) for j in same])
        b = min(
            np.mean([np.linalg.norm(points[i] - points[j]) for j in range(n) if labels[j] == c])
            for c in set(labels) if c != labels[i]
        )
        scores.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
    return float(np.mean(scores))


def test_silhouette_matches_bruteforce():
    rng = RngStream(13)
    for trial in range(5):
        points = rng.normals((30, 2))
        labels = rng.categorical_many([0.4, 0.35, 0.25], 30)
        em = EmbeddingMatrix(np.arange(30), points)
        fast = silhouette_score(em, labels)
        slow = brute_silhouette(points, labels)
        assert abs(fast - slow) < 1e-9


def test_silhouette_sweep_defaults_and_peak():
    em, _ = blobs(4, 20, seed=14)
    results = silhouette_sweep(em, k_values=(2, 3, 4, 6, 8), seed=0)
    assert len(results) == 5
    best_k = max(results, key=lambda kv: kv[1])[0]
    assert best_k == 4


def test_inertia_nonincreasing_checked_internally():
    # A moderately hard instance exercises several Lloyd iterations; the fit
    # itself asserts monotonicity and raises on violation.
    rng = RngStream(15)
    em = EmbeddingMatrix(np.arange(300), rng.normals((300, 4)))
    model = kmeans_fit(em, k=10, seed=3)
    assert model.inertia >= 0.0


def test_embedding_and_cluster_files_roundtrip(tmp_path):
    em, labels = blobs(3, 5, seed=16)
    epath = tmp_path / "emb.csv"
    save_embeddings(em, epath)
    back = load_embeddings(epath)
    assert np.array_equal(back.ids, em.ids)
    assert np.array_equal(back.vectors, em.vectors)
    cpath = tmp_path / "clusters.csv"
    save_clusters(em.ids, labels, cpath)
    ids, clusters = load_clusters(cpath)
    assert np.array_equal(ids, em.ids)
    assert np.array_equal(clusters, labels)


def test_kmeans_assign_width_mismatch():
    em, _ = blobs(2, 5, seed=17)
    model = kmeans_fit(em, k=2, seed=0)
    bad = EmbeddingMatrix(np.arange(3), np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        kmeans_assign(model, bad)
