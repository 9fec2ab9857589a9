"""Turn images into feature pyramids via pluggable backends.

Backends:
  * ``toy`` — the built-in fixed-weight conv stack (no assets needed).
  * ``portable_model`` — a portable graph file with named tap outputs,
    executed by the bundled runtime. The file already bakes in any input
    normalization, so it is fed raw [0,1] intensities.
  * ``precomputed`` — read pyramids back from a feature archive.

The global embedding is always the spatial average of the pooled tap.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from . import archive, toynet
from .errors import ConfigError, ModelLoadError, NumericError, ShapeMismatchError
from .onnxlite import ModelRuntime
from .types import FeatureMap, FeaturePyramid, ImageTensor

BACKENDS = ("portable_model", "precomputed", "toy")


@dataclass(frozen=True)
class ExtractorSpec:
    backend: str
    model_path: Optional[str] = None
    tap_names: tuple[str, ...] = ()
    pooled_name: Optional[str] = None
    archive_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.backend == "portable_model" and not self.model_path:
            raise ConfigError("portable_model backend requires model_path")
        if self.backend == "precomputed" and not self.archive_dir:
            raise ConfigError("precomputed backend requires archive_dir")
        taps = tuple(self.tap_names)
        if not taps:
            if self.backend == "toy":
                taps = toynet.TAP_NAMES
            elif self.backend == "portable_model":
                raise ConfigError("portable_model backend requires tap_names")
        object.__setattr__(self, "tap_names", taps)
        if self.pooled_name is None and taps:
            object.__setattr__(self, "pooled_name", taps[-1])


@lru_cache(maxsize=4)
def _cached_runtime(model_path: str, mtime_ns: int, size: int) -> ModelRuntime:
    return ModelRuntime.from_file(model_path)


def _runtime_for(model_path: str) -> ModelRuntime:
    try:
        stat = Path(model_path).stat()
    except OSError as exc:
        raise ModelLoadError(f"model file not found: {model_path}") from exc
    return _cached_runtime(model_path, stat.st_mtime_ns, stat.st_size)


def _infer_stride(in_hw: tuple[int, int], out_hw: tuple[int, int], layer: str) -> int:
    sh = round(in_hw[0] / out_hw[0])
    sw = round(in_hw[1] / out_hw[1])
    if sh != sw or sh < 1:
        raise ConfigError(f"tap {layer!r}: non-uniform stride {sh}x{sw} for input {in_hw}, output {out_hw}")
    for axis in (0, 1):
        if sh * out_hw[axis] > in_hw[axis] + sh:
            raise ShapeMismatchError(f"tap {layer!r} does not cover the input: {out_hw} at stride {sh} vs {in_hw}")
    return sh


def _pool(activation: np.ndarray, layer: str) -> np.ndarray:
    """Spatial arithmetic mean over all HxW positions of a CxHxW tensor."""
    if activation.ndim != 3:
        raise ShapeMismatchError(f"pooled tap {layer!r} must be CxHxW, got {activation.shape}")
    return activation.astype(np.float64).mean(axis=(1, 2)).astype(np.float32)


def _build_pyramid(
    image: ImageTensor, taps: dict[str, np.ndarray], spec: ExtractorSpec
) -> FeaturePyramid:
    in_hw = (image.height, image.width)
    levels = []
    for name in spec.tap_names:
        if name not in taps:
            raise ConfigError(f"tap {name!r} not among model outputs {sorted(taps)}")
        data = np.asarray(taps[name])
        if data.ndim == 4:
            data = data[0]
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite activation in layer {name!r}")
        stride = _infer_stride(in_hw, (data.shape[1], data.shape[2]), name)
        levels.append(FeatureMap(layer_name=name, data=data, stride=stride))
    pooled_key = spec.pooled_name
    if pooled_key not in taps:
        raise ConfigError(f"pooled tap {pooled_key!r} not among model outputs {sorted(taps)}")
    pooled = np.asarray(taps[pooled_key])
    if pooled.ndim == 4:
        pooled = pooled[0]
    if not np.all(np.isfinite(pooled)):
        raise NumericError(f"non-finite activation in layer {pooled_key!r}")
    return FeaturePyramid(
        image_id=image.id,
        levels=tuple(levels),
        global_embedding=_pool(pooled, pooled_key),
    )


def extract(image: ImageTensor, spec: ExtractorSpec) -> FeaturePyramid:
    """Compute the feature pyramid of one image. Deterministic in (image, spec, model)."""
    if spec.backend == "toy":
        taps = toynet.forward(image.data)
        return _build_pyramid(image, taps, spec)
    if spec.backend == "portable_model":
        runtime = _runtime_for(str(Path(spec.model_path).resolve()))
        if not runtime.input_names:
            raise ModelLoadError(f"{spec.model_path} declares no graph inputs")
        wanted = list(dict.fromkeys(list(spec.tap_names) + [spec.pooled_name]))
        feed = {runtime.input_names[0]: image.data[np.newaxis]}
        taps = runtime.run(feed, wanted)
        return _build_pyramid(image, taps, spec)
    if spec.backend == "precomputed":
        return extract_precomputed(spec.archive_dir, image.id)
    raise ConfigError(f"unknown backend {spec.backend!r}")


def extract_precomputed(archive_dir: str | Path, image_id: str) -> FeaturePyramid:
    """Load a pyramid previously serialized to a feature archive."""
    return archive.read_pyramid(archive_dir, image_id)
