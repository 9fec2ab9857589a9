"""Core data model: image tensors, feature pyramids, masks, score maps, config.

All types are immutable after construction (frozen dataclasses, read-only
numpy buffers) and safe to share across threads. No algorithmic logic here.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeMismatchError

RETRIEVAL_MODES = ("knn", "random")
FUSION_MODES = ("average", "concat")
SEARCH_BACKENDS = ("exact", "kdtree")


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.flags.writeable = False
    return out


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """A decoded image as channels x height x width intensities in [0, 1]."""

    data: np.ndarray
    id: str
    source_path: Optional[str] = None

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ShapeMismatchError(f"image data must be CxHxW, got shape {data.shape}")
        c, h, w = data.shape
        if c not in (1, 3):
            raise ShapeMismatchError(f"image must have 1 or 3 channels, got {c}")
        if h <= 0 or w <= 0:
            raise ShapeMismatchError(f"image has empty spatial extent: {data.shape}")
        _require_finite(data, f"image {self.id!r}")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ImageTensor)
            and self.id == other.id
            and self.source_path == other.source_path
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """One layer's activation grid (channels x height x width) for one image.

    ``stride`` is the number of input pixels per feature cell; cell (i, j)
    is anchored at input pixel (i*stride + stride/2, j*stride + stride/2).
    """

    layer_name: str
    data: np.ndarray
    stride: int

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ShapeMismatchError(
                f"feature map {self.layer_name!r} must be CxHxW, got shape {data.shape}"
            )
        if int(self.stride) <= 0:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        _require_finite(data, f"feature map {self.layer_name!r}")
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "data", _freeze(data))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, FeatureMap)
            and self.layer_name == other.layer_name
            and self.stride == other.stride
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Ordered feature maps for one image (coarsest stride last) plus the
    globally pooled embedding used for whole-image retrieval."""

    image_id: str
    levels: tuple[FeatureMap, ...]
    global_embedding: np.ndarray

    def __post_init__(self) -> None:
        levels = tuple(self.levels)
        if not levels:
            raise ShapeMismatchError("a pyramid needs at least one level")
        strides = [lvl.stride for lvl in levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ShapeMismatchError(f"level strides must strictly increase, got {strides}")
        emb = np.asarray(self.global_embedding, dtype=np.float32)
        if emb.ndim != 1 or emb.size == 0:
            raise ShapeMismatchError(f"global embedding must be a nonempty vector, got shape {emb.shape}")
        _require_finite(emb, f"global embedding of {self.image_id!r}")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "global_embedding", _freeze(emb))

    def level(self, layer_name: str) -> FeatureMap:
        for lvl in self.levels:
            if lvl.layer_name == layer_name:
                return lvl
        raise KeyError(f"pyramid {self.image_id!r} has no level {layer_name!r}")

    def level_names(self) -> tuple[str, ...]:
        return tuple(lvl.layer_name for lvl in self.levels)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, FeaturePyramid)
            and self.image_id == other.image_id
            and self.levels == other.levels
            and np.array_equal(self.global_embedding, other.global_embedding)
        )


@dataclass(frozen=True, eq=False)
class GroundTruthMask:
    """Binary defect mask at evaluation resolution."""

    data: np.ndarray
    image_id: str

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeMismatchError(f"mask must be HxW, got shape {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise ShapeMismatchError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _freeze(data.astype(np.uint8)))

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, GroundTruthMask)
            and self.image_id == other.image_id
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class AnomalyMap:
    """Per-pixel anomaly scores at evaluation resolution plus the image score.

    Scores are squared-distance based, so they are finite and nonnegative.
    """

    image_id: str
    scores: np.ndarray
    image_score: float

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise ShapeMismatchError(f"score map must be HxW, got shape {scores.shape}")
        _require_finite(scores, f"anomaly map {self.image_id!r}")
        if scores.size and scores.min() < 0:
            raise NumericError(f"anomaly map {self.image_id!r} has negative scores")
        score = float(self.image_score)
        if not np.isfinite(score) or score < 0:
            raise NumericError(f"image score must be finite and >= 0, got {score}")
        object.__setattr__(self, "scores", _freeze(scores))
        object.__setattr__(self, "image_score", score)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, AnomalyMap)
            and self.image_id == other.image_id
            and self.image_score == other.image_score
            and np.array_equal(self.scores, other.scores)
        )


@dataclass(frozen=True)
class ThresholdConfig:
    """Image-level (tau) and pixel-level (theta) decision thresholds.

    Any real value is legal; classification is monotone in each threshold.
    """

    tau: float
    theta: float


@dataclass(frozen=True)
class PipelineConfig:
    """Hyperparameters of the full pipeline.

    Defaults match the reference setting for MVTec-style data: 50 image
    neighbors, 1 pixel neighbor, all pyramid levels fused with equal
    weights, Gaussian sigma 4 on a 256x256 evaluation grid.
    """

    K: int = 50
    kappa: int = 1
    levels_selected: Optional[tuple[str, ...]] = None
    level_weights: Optional[tuple[float, ...]] = None
    sigma: float = 4.0
    eval_resolution: tuple[int, int] = (256, 256)
    crop_to: Optional[tuple[int, int]] = None
    retrieval_mode: str = "knn"
    random_seed: int = 0
    fusion_mode: str = "average"
    search_backend: str = "exact"

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ConfigError(f"K must be a positive integer, got {self.K}")
        if self.kappa < 1:
            raise ConfigError(f"kappa must be a positive integer, got {self.kappa}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.retrieval_mode not in RETRIEVAL_MODES:
            raise ConfigError(f"retrieval_mode must be one of {RETRIEVAL_MODES}, got {self.retrieval_mode!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.search_backend not in SEARCH_BACKENDS:
            raise ConfigError(f"search_backend must be one of {SEARCH_BACKENDS}, got {self.search_backend!r}")
        if self.levels_selected is not None:
            object.__setattr__(self, "levels_selected", tuple(self.levels_selected))
        if self.level_weights is not None:
            weights = tuple(float(w) for w in self.level_weights)
            if self.levels_selected is None:
                raise ConfigError("level_weights given without levels_selected")
            if len(weights) != len(self.levels_selected):
                raise ConfigError(
                    f"{len(weights)} weights for {len(self.levels_selected)} selected levels"
                )
            if any(w < 0 for w in weights):
                raise ConfigError("level weights must be nonnegative")
            if sum(weights) <= 0:
                raise ConfigError("level weights must sum to a positive value")
            object.__setattr__(self, "level_weights", weights)
        for name in ("eval_resolution", "crop_to"):
            value = getattr(self, name)
            if value is None:
                continue
            value = (int(value[0]), int(value[1]))
            if value[0] <= 0 or value[1] <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
            object.__setattr__(self, name, value)

    def weights_for(self, level_names: Sequence[str]) -> tuple[float, ...]:
        """Resolve fusion weights for the given levels (equal when unset)."""
        if self.level_weights is None:
            return tuple(1.0 for _ in level_names)
        lookup = dict(zip(self.levels_selected or (), self.level_weights))
        return tuple(lookup[name] for name in level_names)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        for key in ("levels_selected", "level_weights", "eval_resolution", "crop_to"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)
