"""Sub-image anomaly detection by k-nearest-neighbor retrieval over deep
feature pyramids, with an evaluation harness (ROCAUC, PRO) and a CLI."""

from .errors import (
    ArchiveError,
    ConfigError,
    DatasetError,
    ModelLoadError,
    NumericError,
    ParameterError,
    ShapeMismatchError,
    SpadeError,
    UndefinedMetricError,
)
from .evaluation import EvalReport, connected_components, evaluate, pro_at_threshold, pro_curve, roc_auc
from .extractor import ExtractorSpec, extract, extract_precomputed
from .retrieval import (
    GalleryIndex,
    PixelGallery,
    build_image_index,
    build_pixel_gallery,
    query_image_knn,
    query_pixel_knn,
    select_neighbors,
)
from .scoring import LevelDistanceMap, classify, fuse_levels, score_image, score_level, smooth
from .types import (
    AnomalyMap,
    FeatureMap,
    FeaturePyramid,
    GroundTruthMask,
    ImageTensor,
    PipelineConfig,
    ThresholdConfig,
)

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap",
    "ArchiveError",
    "ConfigError",
    "DatasetError",
    "EvalReport",
    "ExtractorSpec",
    "FeatureMap",
    "FeaturePyramid",
    "GalleryIndex",
    "GroundTruthMask",
    "ImageTensor",
    "LevelDistanceMap",
    "ModelLoadError",
    "NumericError",
    "ParameterError",
    "PipelineConfig",
    "PixelGallery",
    "ShapeMismatchError",
    "SpadeError",
    "ThresholdConfig",
    "UndefinedMetricError",
    "build_image_index",
    "build_pixel_gallery",
    "classify",
    "connected_components",
    "evaluate",
    "extract",
    "extract_precomputed",
    "fuse_levels",
    "pro_at_threshold",
    "pro_curve",
    "query_image_knn",
    "query_pixel_knn",
    "roc_auc",
    "score_image",
    "score_level",
    "select_neighbors",
    "smooth",
]
