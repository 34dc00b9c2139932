import functools
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score

from reportgen import hdbscan as H
from reportgen.umap import pairwise_distances

from conftest import make_blobs


def test_core_distances_collinear():
    x = np.array([[0.0], [1.0], [3.0]])
    np.testing.assert_array_equal(H.core_distances(x, 2), [3.0, 2.0, 3.0])
    np.testing.assert_array_equal(H.core_distances(x, 1), [1.0, 1.0, 2.0])


def test_core_distances_duplicates_and_too_few():
    x = np.array([[0.0], [0.0], [0.0], [9.0]])
    assert H.core_distances(x, 2)[:3].tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        H.core_distances(x, 4)


def test_mutual_reachability_cases():
    assert H.mutual_reachability(1.0, 3.0, 2.0) == 3.0
    assert H.mutual_reachability(1.5, 0.0, 0.0) == 1.5
    assert H.mutual_reachability(5.0, 1.0, 2.0) == 5.0
    x = np.array([[0.0], [1.0], [3.0]])
    m = H.mutual_reachability_matrix(pairwise_distances(x), H.core_distances(x, 2))
    assert m[0, 1] == 3.0 and m[1, 2] == 3.0 and m[0, 2] == 3.0


def test_mst_small_cases():
    mst = H.minimum_spanning_tree(np.array([[0.0, 4.0], [4.0, 0.0]]))
    assert mst.tolist() == [[0.0, 1.0, 4.0]]
    m = np.array([[0, 3, 3], [3, 0, 2], [3, 2, 0]], dtype=float)
    mst = H.minimum_spanning_tree(m)
    assert sorted(map(tuple, mst[:, :2].astype(int).tolist())) == [(0, 1), (1, 2)]
    assert mst[:, 2].sum() == 5.0


def test_mst_tie_break_is_deterministic():
    m = np.ones((4, 4)) - np.eye(4)
    mst = H.minimum_spanning_tree(m)
    assert sorted(map(tuple, mst[:, :2].astype(int).tolist())) == [(0, 1), (0, 2), (0, 3)]


def _prufer_decode(seq, n):
    degree = [1] * n
    for v in seq:
        degree[v] += 1
    edges = []
    for v in seq:
        leaf = min(i for i in range(n) if degree[i] == 1)
        edges.append((leaf, v))
        degree[leaf] -= 1
        degree[v] -= 1
    u, w = [i for i in range(n) if degree[i] == 1]
    edges.append((u, w))
    return edges


@functools.lru_cache(maxsize=None)
def _all_trees(n):
    return np.array([_prufer_decode(seq, n) for seq in itertools.product(range(n), repeat=n - 2)])


def exhaustive_mst_weight(m):
    """Minimum total weight over all n^(n-2) labelled spanning trees, exactly rounded."""
    n = len(m)
    if n == 2:
        return m[0, 1]
    trees = _all_trees(n)
    w = m[trees[..., 0], trees[..., 1]]
    rough = w.sum(axis=1)
    near = w[rough <= rough.min() + 1e-9]
    return min(math.fsum(row) for row in near)


def test_prufer_enumerates_all_trees():
    trees = {frozenset(frozenset(e) for e in _prufer_decode(s, 5))
             for s in itertools.product(range(5), repeat=3)}
    assert len(trees) == 5 ** 3


def test_mst_matches_exhaustive_oracle_100_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        x = rng.normal(size=(n, 2))
        ms = int(rng.integers(1, n)) if n > 2 else 1
        m = H.mutual_reachability_matrix(pairwise_distances(x), H.core_distances(x, ms))
        mst = H.minimum_spanning_tree(m)
        assert len(mst) == n - 1
        assert math.fsum(mst[:, 2]) == exhaustive_mst_weight(m), seed


def test_two_blobs_recovered():
    x, y = make_blobs(n_per=50, n_blobs=2, seed=3)
    a, _ = H.hdbscan(x, H.HdbscanConfig(min_cluster_size=15))
    assert a.k == 2
    assert adjusted_rand_score(y, a.labels) >= 0.99


def test_too_few_points_all_noise():
    x = np.random.default_rng(0).normal(size=(10, 3))
    a, _ = H.hdbscan(x, H.HdbscanConfig(min_cluster_size=15))
    assert a.k == 0 and (a.labels == -1).all() and (a.strengths == 0).all()


def _check_tree(tree, a, mcs):
    birth = tree.birth_lambdas()
    assert (tree.lambda_val >= 0).all()
    for p, c, lam in zip(tree.parent, tree.child, tree.lambda_val):
        assert lam >= birth[p] - 1e-12
        if c in birth:
            assert birth[c] == pytest.approx(lam)
    clusters = tree.child_size[tree.child >= tree.n_points]
    assert (clusters >= mcs).all()
    # selected clusters are mutually non-nested
    parent_of = {int(c): int(p) for p, c in zip(tree.parent, tree.child) if c >= tree.n_points}
    sel = set(a.selected)
    for c in sel:
        node = c
        while node in parent_of:
            node = parent_of[node]
            assert node not in sel
    labels = a.labels
    assert set(labels[labels >= 0].tolist()) == set(range(a.k))
    assert ((a.strengths >= 0) & (a.strengths <= 1)).all()
    assert (a.strengths[labels == -1] == 0).all()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(5, 20))
def test_tree_invariants(seed, n_blobs, mcs):
    x, _ = make_blobs(n_per=40, n_blobs=n_blobs, sep=6.0, seed=seed, dim=4)
    a, tree = H.hdbscan(x, H.HdbscanConfig(min_cluster_size=mcs))
    _check_tree(tree, a, mcs)


def test_permuted_input_same_partition():
    x, _ = make_blobs(n_per=60, n_blobs=3, seed=5)
    a, _ = H.hdbscan(x, H.HdbscanConfig(min_cluster_size=15))
    perm = np.random.default_rng(1).permutation(len(x))
    b, _ = H.hdbscan(x[perm], H.HdbscanConfig(min_cluster_size=15))
    assert adjusted_rand_score(a.labels[perm], b.labels) == 1.0


def test_agrees_with_reference_library():
    pytest.importorskip("sklearn.cluster", reason="scikit-learn HDBSCAN unavailable")
    from sklearn.cluster import HDBSCAN

    scores = []
    for seed in range(5):
        x, _ = make_blobs(n_per=50, n_blobs=4, sep=5.0, seed=seed, dim=4)
        ours, _ = H.hdbscan(x, H.HdbscanConfig(min_cluster_size=10))
        # the library counts the point itself among its min_samples neighbours
        ref = HDBSCAN(min_cluster_size=10, min_samples=11).fit(x)
        scores.append(adjusted_rand_score(ref.labels_, ours.labels))
    # equal-weight merges may be ordered differently, which can move a point or two
    assert min(scores) >= 0.95


def test_similarity_matrix_properties():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(30, 8))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    labels = np.repeat([0, 1, 2], 10)
    labels[0] = -1
    s = H.topic_similarity_matrix(labels, emb)
    assert s.shape == (3, 3)
    assert (np.diag(s) == 1.0).all()
    assert np.array_equal(s, s.T)


def test_topics_csv_roundtrip(tmp_path):
    x, _ = make_blobs(n_per=30, n_blobs=2, seed=0)
    a, _ = H.hdbscan(x, H.HdbscanConfig(min_cluster_size=10))
    ids = [f"r{i}" for i in range(len(x))]
    H.write_topics_csv(tmp_path / "t.csv", ids, a)
    back = H.read_topics_csv(tmp_path / "t.csv")
    assert [back[i] for i in ids] == a.labels.tolist()
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "id,label,strength"
