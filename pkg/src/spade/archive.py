"""On-disk formats.

Feature archive: one directory per image holding raw little-endian float32
tensors (one file per layer plus the pooled embedding) and a ``pyramid.json``
sidecar listing ``{image_id, layer_name, shape [C,H,W], stride, file}`` per
layer. Round-trips are bit-exact.

The same module holds the flat save/load helpers for the remaining data
types (image tensors, masks, anomaly maps) so every type can round-trip
through files.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ArchiveError, ShapeMismatchError
from .types import AnomalyMap, FeatureMap, FeaturePyramid, GroundTruthMask, ImageTensor

SIDECAR_NAME = "pyramid.json"
_EMBEDDING_FILE = "embedding.f32"


def _write_f32(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path: Path, shape: tuple[int, ...], what: str) -> np.ndarray:
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise ShapeMismatchError(
            f"{what}: sidecar shape {list(shape)} needs {expected} floats, file holds {raw.size}"
        )
    return raw.reshape(shape)


def _image_dir(root: Path, image_id: str) -> Path:
    rel = Path(image_id)
    if rel.is_absolute() or ".." in rel.parts:
        raise ArchiveError(f"image id {image_id!r} is not a safe relative path")
    return root / rel


def write_pyramid(root: str | Path, pyramid: FeaturePyramid) -> Path:
    """Serialize one pyramid into the archive rooted at ``root``."""
    out = _image_dir(Path(root), pyramid.image_id)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for level in pyramid.levels:
        if "/" in level.layer_name:
            raise ArchiveError(f"layer name {level.layer_name!r} may not contain '/'")
        fname = f"{level.layer_name}.f32"
        _write_f32(out / fname, level.data)
        entries.append(
            {
                "image_id": pyramid.image_id,
                "layer_name": level.layer_name,
                "shape": list(level.data.shape),
                "stride": level.stride,
                "file": fname,
            }
        )
    _write_f32(out / _EMBEDDING_FILE, pyramid.global_embedding)
    sidecar = {
        "image_id": pyramid.image_id,
        "layers": entries,
        "embedding": {"file": _EMBEDDING_FILE, "dim": int(pyramid.global_embedding.size)},
    }
    (out / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return out


def read_pyramid(root: str | Path, image_id: str) -> FeaturePyramid:
    """Load one pyramid back; identical to what was written."""
    root = Path(root)
    image_dir = _image_dir(root, image_id)
    sidecar_path = image_dir / SIDECAR_NAME
    if not sidecar_path.is_file():
        if not image_dir.is_dir():
            raise ArchiveError(f"archive {root} holds no image {image_id!r}")
        raise ArchiveError(f"missing sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar.get("image_id") != image_id:
        raise ArchiveError(
            f"sidecar at {sidecar_path} belongs to {sidecar.get('image_id')!r}, not {image_id!r}"
        )
    levels = []
    for entry in sidecar["layers"]:
        data = _read_f32(
            image_dir / entry["file"],
            tuple(entry["shape"]),
            f"{image_id}/{entry['layer_name']}",
        )
        levels.append(FeatureMap(layer_name=entry["layer_name"], data=data, stride=entry["stride"]))
    emb = _read_f32(
        image_dir / sidecar["embedding"]["file"],
        (int(sidecar["embedding"]["dim"]),),
        f"{image_id}/embedding",
    )
    return FeaturePyramid(image_id=image_id, levels=tuple(levels), global_embedding=emb)


def has_pyramid(root: str | Path, image_id: str) -> bool:
    try:
        return (_image_dir(Path(root), image_id) / SIDECAR_NAME).is_file()
    except ArchiveError:
        return False


def iter_image_ids(root: str | Path) -> Iterator[str]:
    """All image ids in the archive, in sorted order."""
    root = Path(root)
    if not root.is_dir():
        return
    for sidecar in sorted(root.rglob(SIDECAR_NAME)):
        yield str(sidecar.parent.relative_to(root))


def _sibling(base: Path, ext: str) -> Path:
    # Not with_suffix: image ids may contain dots.
    return base.parent / (base.name + ext)


def save_image_tensor(base: str | Path, tensor: ImageTensor) -> None:
    """Write ``base.f32`` + ``base.json`` for one image tensor."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    _write_f32(_sibling(base, ".f32"), tensor.data)
    meta = {"id": tensor.id, "source_path": tensor.source_path, "shape": list(tensor.data.shape)}
    _sibling(base, ".json").write_text(json.dumps(meta, sort_keys=True))


def load_image_tensor(base: str | Path) -> ImageTensor:
    base = Path(base)
    meta = json.loads(_sibling(base, ".json").read_text())
    data = _read_f32(_sibling(base, ".f32"), tuple(meta["shape"]), meta["id"])
    return ImageTensor(data=data, id=meta["id"], source_path=meta["source_path"])


def save_mask(base: str | Path, mask: GroundTruthMask) -> None:
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    np.save(_sibling(base, ".npy"), mask.data)
    _sibling(base, ".json").write_text(json.dumps({"image_id": mask.image_id}))


def load_mask_file(base: str | Path) -> GroundTruthMask:
    base = Path(base)
    meta = json.loads(_sibling(base, ".json").read_text())
    return GroundTruthMask(data=np.load(_sibling(base, ".npy")), image_id=meta["image_id"])


def save_anomaly_map(base: str | Path, amap: AnomalyMap) -> None:
    """Write ``base.npy`` (float64 scores) + ``base.json`` (id and score)."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    np.save(_sibling(base, ".npy"), amap.scores)
    meta = {"image_id": amap.image_id, "image_score": amap.image_score}
    _sibling(base, ".json").write_text(json.dumps(meta, sort_keys=True))


def load_anomaly_map(base: str | Path) -> AnomalyMap:
    base = Path(base)
    meta = json.loads(_sibling(base, ".json").read_text())
    scores = np.load(_sibling(base, ".npy"))
    return AnomalyMap(image_id=meta["image_id"], scores=scores, image_score=meta["image_score"])
