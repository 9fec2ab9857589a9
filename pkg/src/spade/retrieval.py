"""kNN machinery: image-level index over global embeddings and pixel-level
gallery search.

All squared distances accumulate in float64 regardless of storage dtype;
a 156800-row reduction loses too much in float32. The exhaustive scan is
the default backend; the tree backend is opt-in and returns identical
results (see kdtree). Ties always break by lowest insertion index.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import archive
from .errors import ConfigError, ParameterError, ShapeMismatchError
from .kdtree import KDTree
from .types import FeaturePyramid

_BLOCK_FLOATS = 1 << 23  # cap broadcast temporaries at 64 MiB of float64


def pairwise_sq_distances(queries: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """(Q, N) squared Euclidean distances, float64 accumulation.

    Blocked over queries and rows to bound memory; blocking never splits
    the per-pair reduction, so results do not depend on block sizes.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    rows_f = np.asarray(rows, dtype=np.float64)
    q_n, dim = queries.shape
    n = rows_f.shape[0]
    if rows_f.ndim != 2 or rows_f.shape[1] != dim:
        raise ShapeMismatchError(f"queries have dim {dim}, rows have shape {rows_f.shape}")
    out = np.empty((q_n, n), dtype=np.float64)
    row_block = max(1, min(n, _BLOCK_FLOATS // max(dim, 1)))
    q_block = max(1, _BLOCK_FLOATS // max(row_block * dim, 1))
    for qi in range(0, q_n, q_block):
        q_chunk = queries[qi : qi + q_block]
        for ri in range(0, n, row_block):
            diff = q_chunk[:, None, :] - rows_f[None, ri : ri + row_block, :]
            out[qi : qi + q_block, ri : ri + row_block] = (diff * diff).sum(axis=2)
    return out


def sq_distances(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared distance from one query vector to every row."""
    return pairwise_sq_distances(np.asarray(query)[None, :], rows)[0]


class PyramidStore(Protocol):
    def get(self, image_id: str) -> FeaturePyramid: ...


class InMemoryPyramidStore:
    def __init__(self, pyramids: Sequence[FeaturePyramid]):
        self._by_id = {p.image_id: p for p in pyramids}

    def get(self, image_id: str) -> FeaturePyramid:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise KeyError(f"no pyramid stored for image {image_id!r}") from None


class ArchivePyramidStore:
    """Resolves pyramids from a feature archive, with a small read cache."""

    def __init__(self, root, cache_size: int = 64):
        self._root = root
        self._cached = lru_cache(maxsize=cache_size)(self._load)

    def _load(self, image_id: str) -> FeaturePyramid:
        return archive.read_pyramid(self._root, image_id)

    def get(self, image_id: str) -> FeaturePyramid:
        return self._cached(image_id)


class GalleryIndex:
    """Immutable searchable store of normal-image embeddings.

    Iteration order equals construction order; duplicates are retained.
    """

    def __init__(self, embeddings: np.ndarray, image_ids: Sequence[str], pyramid_store: PyramidStore):
        embeddings = np.ascontiguousarray(embeddings, dtype=np.float32)
        if embeddings.ndim != 2 or embeddings.shape[0] == 0:
            raise ConfigError(f"index needs a nonempty N x D embedding matrix, got shape {embeddings.shape}")
        if not np.all(np.isfinite(embeddings)):
            raise ConfigError("index embeddings must be finite")
        if len(image_ids) != embeddings.shape[0]:
            raise ShapeMismatchError(f"{len(image_ids)} ids for {embeddings.shape[0]} embedding rows")
        embeddings.flags.writeable = False
        self.embeddings = embeddings
        self.image_ids = tuple(image_ids)
        self.pyramid_store = pyramid_store
        self._tree: KDTree | None = None

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def tree(self) -> KDTree:
        if self._tree is None:
            self._tree = KDTree(self.embeddings)
        return self._tree


def build_image_index(pyramids: Sequence[FeaturePyramid]) -> GalleryIndex:
    """Index the global embeddings of the given pyramids, in input order."""
    pyramids = list(pyramids)
    if not pyramids:
        raise ConfigError("cannot build an index from zero pyramids")
    dims = {p.global_embedding.size for p in pyramids}
    if len(dims) > 1:
        raise ShapeMismatchError(f"embedding dimensions differ across pyramids: {sorted(dims)}")
    embeddings = np.stack([p.global_embedding for p in pyramids])
    ids = [p.image_id for p in pyramids]
    return GalleryIndex(embeddings, ids, InMemoryPyramidStore(pyramids))


def _knn_indices(index: GalleryIndex, query: np.ndarray, k: int, backend: str) -> tuple[np.ndarray, np.ndarray]:
    if k > len(index):
        raise ParameterError(f"K={k} exceeds index size {len(index)}")
    if k < 1:
        raise ParameterError(f"K must be >= 1, got {k}")
    query = np.asarray(query)
    if query.shape != (index.dim,):
        raise ShapeMismatchError(f"query has shape {query.shape}, index dim is {index.dim}")
    if backend == "kdtree":
        return index.tree().query(query, k)
    if backend != "exact":
        raise ConfigError(f"unknown search backend {backend!r}")
    dists = sq_distances(index.embeddings, query)
    order = np.argsort(dists, kind="stable")[:k]
    return order.astype(np.int64), dists[order]


def query_image_knn(
    index: GalleryIndex, query: np.ndarray, k: int, backend: str = "exact"
) -> tuple[float, list[str]]:
    """Mean squared distance to the k nearest stored embeddings, plus the
    neighbor ids sorted by ascending (distance, insertion index)."""
    idx, dists = _knn_indices(index, query, k, backend)
    score = float(np.mean(dists))
    return score, [index.image_ids[i] for i in idx]


def select_neighbors(
    index: GalleryIndex,
    query: np.ndarray,
    k: int,
    mode: str = "knn",
    seed: int = 0,
    backend: str = "exact",
) -> list[str]:
    """Neighbor ids for gallery construction: true kNN or a seeded uniform
    random draw of k distinct images (for retrieval ablations)."""
    if mode == "knn":
        return query_image_knn(index, query, k, backend)[1]
    if mode != "random":
        raise ConfigError(f"unknown retrieval mode {mode!r}")
    if k > len(index):
        raise ParameterError(f"K={k} exceeds index size {len(index)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(index), size=k, replace=False)
    return [index.image_ids[i] for i in picks]


@dataclass(frozen=True, eq=False)
class GalleryLevel:
    """All gallery feature vectors of one pyramid level, with provenance."""

    layer_name: str
    features: np.ndarray  # (neighbors * H * W, C) float32
    source_ids: tuple[str, ...]
    source_index: np.ndarray  # (rows,) index into source_ids
    grid_row: np.ndarray
    grid_col: np.ndarray
    grid_shape: tuple[int, int]

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    def provenance(self, row: int) -> tuple[str, int, int]:
        return (
            self.source_ids[int(self.source_index[row])],
            int(self.grid_row[row]),
            int(self.grid_col[row]),
        )


class PixelGallery:
    """Per-level feature matrices gathered from the retrieved neighbors."""

    def __init__(self, levels: Mapping[str, GalleryLevel]):
        self._levels = dict(levels)

    def level(self, layer_name: str) -> GalleryLevel:
        try:
            return self._levels[layer_name]
        except KeyError:
            raise ConfigError(f"gallery has no level {layer_name!r}") from None

    def level_names(self) -> tuple[str, ...]:
        return tuple(self._levels)


def build_pixel_gallery(
    neighbor_ids: Sequence[str],
    pyramid_store: PyramidStore,
    levels_selected: Sequence[str],
) -> PixelGallery:
    """Gather every pixel location of every neighbor into per-level row
    matrices: neighbors in the given order, row-major within each grid."""
    neighbor_ids = list(neighbor_ids)
    if not neighbor_ids:
        raise ConfigError("gallery needs at least one neighbor")
    pyramids = [pyramid_store.get(image_id) for image_id in neighbor_ids]
    levels: dict[str, GalleryLevel] = {}
    for name in levels_selected:
        maps = [p.level(name) for p in pyramids]
        shapes = {m.data.shape for m in maps}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"level {name!r} shapes differ across neighbors: {sorted(shapes)}")
        c, h, w = maps[0].data.shape
        stacked = np.concatenate([m.data.reshape(c, h * w).T for m in maps], axis=0)
        cells = h * w
        rows_grid, cols_grid = np.divmod(np.arange(cells), w)
        levels[name] = GalleryLevel(
            layer_name=name,
            features=np.ascontiguousarray(stacked),
            source_ids=tuple(neighbor_ids),
            source_index=np.repeat(np.arange(len(neighbor_ids)), cells),
            grid_row=np.tile(rows_grid, len(neighbor_ids)),
            grid_col=np.tile(cols_grid, len(neighbor_ids)),
            grid_shape=(h, w),
        )
    return PixelGallery(levels)


def query_pixel_knn(gallery_rows: np.ndarray, query_vector: np.ndarray, kappa: int) -> float:
    """Mean squared distance from one feature vector to its kappa nearest
    gallery rows (ties by insertion index, as at the image level)."""
    return float(query_pixel_knn_batch(gallery_rows, np.asarray(query_vector)[None, :], kappa)[0])


def query_pixel_knn_batch(gallery_rows: np.ndarray, queries: np.ndarray, kappa: int) -> np.ndarray:
    """Vectorized query_pixel_knn over many query vectors; one score each.

    Two phases: candidates are selected with expansion-form distances
    (|q|^2 + |g|^2 - 2 q.g, a float64 GEMM - galleries reach 156800 rows,
    where materializing difference tensors is ~50x slower), then the
    selected rows are rescored with the same difference-form accumulation
    used everywhere else. Rescoring keeps scores exactly nonnegative and
    keeps self-matches exactly zero, which the expansion alone would lose
    to cancellation. Query rows are independent, so callers may split
    them across threads.
    """
    gallery = np.asarray(gallery_rows, dtype=np.float64)
    queries64 = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n, dim = gallery.shape if gallery.ndim == 2 else (gallery.shape[0], -1)
    if gallery.ndim != 2 or queries64.shape[1] != dim:
        raise ShapeMismatchError(f"queries have shape {queries64.shape}, gallery rows {gallery.shape}")
    if kappa > n:
        raise ParameterError(f"kappa={kappa} exceeds gallery rows {n}")
    if kappa < 1:
        raise ParameterError(f"kappa must be >= 1, got {kappa}")
    q_n = queries64.shape[0]
    g_sq = np.einsum("nd,nd->n", gallery, gallery)
    q_sq = np.einsum("qd,qd->q", queries64, queries64)

    best_vals = np.full((q_n, kappa), np.inf)
    best_idx = np.zeros((q_n, kappa), dtype=np.int64)
    row_block = max(kappa, min(n, _BLOCK_FLOATS // max(q_n, 1)))
    for ri in range(0, n, row_block):
        block = gallery[ri : ri + row_block]
        approx = q_sq[:, None] + g_sq[ri : ri + row_block][None, :] - 2.0 * (queries64 @ block.T)
        idx_block = np.broadcast_to(np.arange(ri, ri + block.shape[0]), approx.shape)
        merged_vals = np.concatenate([best_vals, approx], axis=1)
        merged_idx = np.concatenate([best_idx, idx_block], axis=1)
        sel = np.argpartition(merged_vals, kappa - 1, axis=1)[:, :kappa]
        best_vals = np.take_along_axis(merged_vals, sel, axis=1)
        best_idx = np.take_along_axis(merged_idx, sel, axis=1)

    diff = gallery[best_idx] - queries64[:, None, :]
    exact = (diff * diff).sum(axis=2)
    exact.sort(axis=1)
    return exact.mean(axis=1) if kappa > 1 else exact[:, 0]
