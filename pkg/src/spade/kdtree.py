"""Exact k-nearest-neighbor search over a space-partitioning tree.

Guarantees the same results as an exhaustive scan, bit for bit: leaf
candidates are scored with the identical distance primitive (same float64
accumulation order), ties break by lowest insertion index, and a subtree
is pruned only when its bounding-box distance strictly exceeds the current
worst kept distance. Box distances are computed with the same length-D
reduction as point distances and are elementwise lower bounds, so pruning
can never drop a point the scan would keep.
"""
from __future__ import annotations

import heapq

import numpy as np

from .errors import ParameterError

_LEAF_SIZE = 16


class _Node:
    __slots__ = ("lo", "hi", "axis", "indices", "left", "right")

    def __init__(self, lo, hi, axis=-1, indices=None, left=None, right=None):
        self.lo = lo
        self.hi = hi
        self.axis = axis
        self.indices = indices
        self.left = left
        self.right = right


class KDTree:
    def __init__(self, data: np.ndarray, leaf_size: int = _LEAF_SIZE):
        data = np.asarray(data)
        if data.ndim != 2 or data.shape[0] == 0:
            raise ParameterError(f"tree needs a nonempty 2-D array, got shape {data.shape}")
        self._data = data
        self._f64 = data.astype(np.float64, copy=False)
        self._leaf_size = max(1, int(leaf_size))
        self._root = self._build(np.arange(data.shape[0]))

    def __len__(self) -> int:
        return self._data.shape[0]

    def _build(self, indices: np.ndarray) -> _Node:
        pts = self._f64[indices]
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        spread = hi - lo
        if indices.size <= self._leaf_size or not spread.any():
            return _Node(lo, hi, indices=indices)
        axis = int(np.argmax(spread))
        order = np.argsort(pts[:, axis], kind="stable")
        mid = indices.size // 2
        node = _Node(lo, hi, axis=axis)
        node.left = self._build(indices[order[:mid]])
        node.right = self._build(indices[order[mid:]])
        return node

    def query(self, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest rows to ``query``: (indices, squared distances), both
        sorted ascending by (distance, insertion index)."""
        n = len(self)
        if k > n:
            raise ParameterError(f"requested {k} neighbors from {n} rows")
        if k < 1:
            raise ParameterError(f"k must be >= 1, got {k}")
        q = np.asarray(query, dtype=np.float64)
        heap: list[tuple[float, int]] = []  # (-dist, -index): max-heap on (dist, index)

        def box_distance(node: _Node) -> float:
            clamped = np.clip(q, node.lo, node.hi)
            diff = q - clamped
            return float((diff * diff).sum())

        def visit(node: _Node) -> None:
            if len(heap) == k and box_distance(node) > -heap[0][0]:
                return
            if node.indices is not None:
                dists = _leaf_distances(self._f64[node.indices], q)
                for dist, idx in zip(dists.tolist(), node.indices.tolist()):
                    if len(heap) < k:
                        heapq.heappush(heap, (-dist, -idx))
                    elif (dist, idx) < (-heap[0][0], -heap[0][1]):
                        heapq.heapreplace(heap, (-dist, -idx))
                return
            near, far = node.left, node.right
            if q[node.axis] > node.left.hi[node.axis]:
                near, far = node.right, node.left
            visit(near)
            visit(far)

        visit(self._root)
        ordered = sorted((-nd, -ni) for nd, ni in heap)
        idx = np.array([i for _, i in ordered], dtype=np.int64)
        dists = np.array([d for d, _ in ordered], dtype=np.float64)
        return idx, dists


def _leaf_distances(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Same expression as the exhaustive scan so values match bit for bit.
    diff = rows - q
    return (diff * diff).sum(axis=1)
