import numpy as np
import pytest

from spade.errors import ParameterError
from spade.kdtree import KDTree
from spade.retrieval import sq_distances


def _scan(data, q, k):
    dists = sq_distances(data, q)
    order = np.argsort(dists, kind="stable")[:k]
    return order.astype(np.int64), dists[order]


def test_tree_matches_scan_on_random_data():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(500, 8)).astype(np.float32)
    tree = KDTree(data)
    for _ in range(100):
        q = rng.normal(size=8)
        for k in (1, 3, 17):
            ti, td = tree.query(q, k)
            si, sd = _scan(data, q, k)
            np.testing.assert_array_equal(ti, si)
            assert td.tobytes() == sd.tobytes()  # bit-identical scores


def test_tree_handles_heavy_ties():
    rng = np.random.default_rng(1)
    # many duplicated rows force tie-breaking through the heap
    base = rng.integers(0, 3, size=(40, 4)).astype(np.float64)
    data = np.vstack([base, base, base])
    tree = KDTree(data)
    for _ in range(50):
        q = rng.integers(0, 3, size=4).astype(np.float64)
        ti, td = tree.query(q, 9)
        si, sd = _scan(data, q, 9)
        np.testing.assert_array_equal(ti, si)
        assert td.tobytes() == sd.tobytes()


def test_tree_all_identical_points():
    data = np.ones((25, 6))
    tree = KDTree(data)
    idx, dists = tree.query(np.ones(6), 5)
    np.testing.assert_array_equal(idx, np.arange(5))
    np.testing.assert_array_equal(dists, np.zeros(5))


def test_tree_query_errors():
    tree = KDTree(np.zeros((3, 2)))
    with pytest.raises(ParameterError):
        tree.query(np.zeros(2), 4)
    with pytest.raises(ParameterError):
        tree.query(np.zeros(2), 0)


def test_tree_single_row():
    tree = KDTree(np.array([[2.0, 3.0]]))
    idx, dists = tree.query(np.array([0.0, 0.0]), 1)
    assert idx.tolist() == [0]
    assert dists.tolist() == [13.0]
