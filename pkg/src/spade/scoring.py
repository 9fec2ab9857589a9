"""Assemble per-pixel anomaly maps.

Per selected level, every feature cell is scored by its kappa-nearest
squared distance into the pixel gallery; level maps are bilinearly
upsampled (receptive-field-center alignment, i.e. half-pixel convention)
to the output grid, combined as a weighted mean, then smoothed with a
normalized Gaussian (reflect borders, radius ceil(4*sigma)).

Two fusion semantics are shipped: "average" (default) averages per-level
distance maps with the configured weights; "concat" upsamples features to
the finest selected level, concatenates channels, and runs a single kNN.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, NumericError, ShapeMismatchError
from .retrieval import (
    GalleryIndex,
    PixelGallery,
    build_pixel_gallery,
    query_image_knn,
    query_pixel_knn_batch,
    select_neighbors,
)
from .types import AnomalyMap, FeaturePyramid, PipelineConfig, ThresholdConfig


@dataclass(frozen=True, eq=False)
class LevelDistanceMap:
    """kNN distances of one level's feature grid."""

    layer_name: str
    data: np.ndarray  # (H, W) float64, nonnegative

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeMismatchError(f"level map must be HxW, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NumericError(f"level map {self.layer_name!r} has non-finite values")
        if data.size and data.min() < 0:
            raise NumericError(f"level map {self.layer_name!r} has negative distances")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes, half-pixel center alignment.

    Cell (i, j) of a grid with stride s sits at input pixel (i*s + s/2);
    mapping output pixel centers back through that anchor gives the
    half-pixel convention used here. Borders clamp (edge replication).
    """
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape[-2:]
    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = xs - x0
    r0 = np.take(src, y0, axis=-2)
    r1 = np.take(src, y1, axis=-2)
    rows = r0 * (1.0 - wy) + r1 * wy
    c0 = np.take(rows, x0, axis=-1)
    c1 = np.take(rows, x1, axis=-1)
    return c0 * (1.0 - wx) + c1 * wx


def score_level(
    query_pyramid: FeaturePyramid, gallery: PixelGallery, level: str, kappa: int
) -> LevelDistanceMap:
    """kNN distance of every feature cell of one level into the gallery."""
    try:
        fmap = query_pyramid.level(level)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    glevel = gallery.level(level)
    c, h, w = fmap.data.shape
    if glevel.features.shape[1] != c:
        raise ShapeMismatchError(
            f"level {level!r}: query has {c} channels, gallery rows have {glevel.features.shape[1]}"
        )
    queries = fmap.data.reshape(c, h * w).T
    scores = query_pixel_knn_batch(glevel.features, queries, kappa)
    return LevelDistanceMap(layer_name=level, data=scores.reshape(h, w))


def fuse_levels(
    maps: Sequence[LevelDistanceMap],
    weights: Sequence[float],
    target_shape: tuple[int, int],
) -> np.ndarray:
    """Upsample every level map to target_shape and take the weighted mean."""
    maps = list(maps)
    if not maps:
        raise ConfigError("fuse_levels needs at least one map")
    weights = [float(w) for w in weights]
    if len(weights) != len(maps):
        raise ConfigError(f"{len(weights)} weights for {len(maps)} maps")
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ConfigError("weights must be nonnegative with positive sum")
    th, tw = int(target_shape[0]), int(target_shape[1])
    for m in maps:
        if m.data.shape[0] > th or m.data.shape[1] > tw:
            raise ConfigError(f"target shape {(th, tw)} smaller than map {m.layer_name!r} {m.data.shape}")
    acc = np.zeros((th, tw), dtype=np.float64)
    for m, w in zip(maps, weights):
        if w == 0.0:
            continue
        acc += w * bilinear_resize(m.data, th, tw)
    return acc / sum(weights)


def smooth(score_map: np.ndarray, sigma: float) -> np.ndarray:
    """Normalized Gaussian smoothing, kernel truncated at radius ceil(4*sigma),
    reflect border handling. sigma 0 is the identity."""
    score_map = np.asarray(score_map, dtype=np.float64)
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return score_map.copy()
    radius = math.ceil(4.0 * sigma)
    return gaussian_filter(score_map, sigma=sigma, mode="reflect", radius=radius)


def _concat_features(pyramid: FeaturePyramid, levels: Sequence[str]) -> tuple[np.ndarray, tuple[int, int]]:
    """Upsample the selected levels' features to the finest grid and stack channels."""
    fmaps = [pyramid.level(name) for name in levels]
    finest = min(fmaps, key=lambda m: m.stride)
    h, w = finest.grid_shape
    parts = [
        fmap.data.astype(np.float64) if fmap.grid_shape == (h, w) else bilinear_resize(fmap.data, h, w)
        for fmap in fmaps
    ]
    return np.concatenate(parts, axis=0).astype(np.float32), (h, w)


def _concat_distance_map(
    pyramid: FeaturePyramid,
    neighbor_ids: Sequence[str],
    store,
    levels: Sequence[str],
    kappa: int,
) -> LevelDistanceMap:
    query_feats, (h, w) = _concat_features(pyramid, levels)
    gallery_rows = []
    for image_id in neighbor_ids:
        feats, shape = _concat_features(store.get(image_id), levels)
        if shape != (h, w):
            raise ShapeMismatchError(f"neighbor {image_id!r} grid {shape} differs from query grid {(h, w)}")
        gallery_rows.append(feats.reshape(feats.shape[0], h * w).T)
    rows = np.concatenate(gallery_rows, axis=0)
    queries = query_feats.reshape(query_feats.shape[0], h * w).T
    scores = query_pixel_knn_batch(rows, queries, kappa)
    return LevelDistanceMap(layer_name="+".join(levels), data=scores.reshape(h, w))


def score_image(
    pyramid: FeaturePyramid,
    index: GalleryIndex,
    config: PipelineConfig,
    seed: Optional[int] = None,
) -> AnomalyMap:
    """Full per-image scoring: image-level kNN score, neighbor retrieval,
    per-pixel gallery distances fused and smoothed onto the eval grid.

    With crop_to set, the map is computed on the crop grid and placed back
    into the eval frame with edge-replicated borders.
    """
    embedding = pyramid.global_embedding
    image_score, _ = query_image_knn(index, embedding, config.K, backend=config.search_backend)
    neighbor_ids = select_neighbors(
        index,
        embedding,
        config.K,
        mode=config.retrieval_mode,
        seed=config.random_seed if seed is None else seed,
        backend=config.search_backend,
    )
    levels = tuple(config.levels_selected) if config.levels_selected else pyramid.level_names()
    for name in levels:
        try:
            pyramid.level(name)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc

    map_shape = config.crop_to if config.crop_to is not None else config.eval_resolution
    if config.fusion_mode == "concat":
        fused = fuse_levels(
            [_concat_distance_map(pyramid, neighbor_ids, index.pyramid_store, levels, config.kappa)],
            [1.0],
            map_shape,
        )
    else:
        gallery = build_pixel_gallery(neighbor_ids, index.pyramid_store, levels)
        level_maps = [score_level(pyramid, gallery, name, config.kappa) for name in levels]
        fused = fuse_levels(level_maps, config.weights_for(levels), map_shape)
    smoothed = smooth(fused, config.sigma)

    if config.crop_to is not None:
        eh, ew = config.eval_resolution
        ch, cw = config.crop_to
        if ch > eh or cw > ew:
            raise ConfigError(f"crop_to {config.crop_to} larger than eval_resolution {config.eval_resolution}")
        top = (eh - ch) // 2
        left = (ew - cw) // 2
        smoothed = np.pad(
            smoothed, ((top, eh - ch - top), (left, ew - cw - left)), mode="edge"
        )
    # Squared distances smoothed by a nonnegative kernel; clip fp dust only.
    smoothed = np.maximum(smoothed, 0.0)
    return AnomalyMap(image_id=pyramid.image_id, scores=smoothed, image_score=image_score)


def classify(amap: AnomalyMap, thresholds: ThresholdConfig) -> tuple[bool, np.ndarray]:
    """Image label and pixel mask by strict threshold comparison."""
    label = bool(amap.image_score > thresholds.tau)
    mask = (amap.scores > thresholds.theta).astype(np.uint8)
    return label, mask


def export_heatmap(out_dir: str | Path, amap: AnomalyMap) -> tuple[Path, Path]:
    """Write a 16-bit grayscale PNG of min-max-normalized scores plus a JSON
    sidecar with the raw range and the image score."""
    out_dir = Path(out_dir)
    base = out_dir / amap.image_id
    base.parent.mkdir(parents=True, exist_ok=True)
    raw_min = float(amap.scores.min())
    raw_max = float(amap.scores.max())
    if raw_max > raw_min:
        norm = (amap.scores - raw_min) / (raw_max - raw_min)
    else:
        norm = np.zeros_like(amap.scores)
    png_path = base.parent / (base.name + ".png")
    ok = cv2.imwrite(str(png_path), np.round(norm * 65535.0).astype(np.uint16))
    if not ok:
        raise IOError(f"failed to write heatmap {png_path}")
    sidecar = {
        "image_id": amap.image_id,
        "image_score": amap.image_score,
        "raw_min": raw_min,
        "raw_max": raw_max,
    }
    json_path = base.parent / (base.name + ".json")
    json_path.write_text(json.dumps(sidecar, sort_keys=True))
    return png_path, json_path
