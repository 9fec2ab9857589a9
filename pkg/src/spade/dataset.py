"""Dataset ingestion for MVTec-style directory trees.

Layout: ``<root>/<class>/train/good/*.png``, ``<root>/<class>/test/<defect>/*``,
``<root>/<class>/ground_truth/<defect>/<stem>_mask.png``. Enumeration is
lexicographic, so manifests are pure functions of the directory listing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import cv2
import numpy as np

from .errors import DatasetError
from .types import GroundTruthMask, ImageTensor, PipelineConfig

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
GOOD = "good"


class TrainItem(NamedTuple):
    image_id: str
    path: str


class TestItem(NamedTuple):
    image_id: str
    path: str
    defect_type: str
    mask_path: Optional[str]

    @property
    def is_anomalous(self) -> bool:
        return self.defect_type != GOOD


@dataclass(frozen=True)
class DatasetManifest:
    class_name: str
    train_items: tuple[TrainItem, ...]
    test_items: tuple[TestItem, ...]

    def __post_init__(self) -> None:
        ids = [i.image_id for i in self.train_items] + [i.image_id for i in self.test_items]
        if len(ids) != len(set(ids)):
            raise DatasetError(f"duplicate image ids in manifest for {self.class_name!r}")
        for item in self.test_items:
            if item.is_anomalous and not item.mask_path:
                raise DatasetError(f"anomalous test item {item.image_id!r} lacks a mask")
            if not item.is_anomalous and item.mask_path:
                raise DatasetError(f"good test item {item.image_id!r} must not carry a mask")

    def to_dict(self) -> dict:
        return {
            "class_name": self.class_name,
            "train_items": [list(i) for i in self.train_items],
            "test_items": [list(i) for i in self.test_items],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetManifest":
        return cls(
            class_name=raw["class_name"],
            train_items=tuple(TrainItem(*i) for i in raw["train_items"]),
            test_items=tuple(TestItem(*i) for i in raw["test_items"]),
        )

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def _find_mask(gt_dir: Path, defect: str, stem: str) -> Optional[Path]:
    for candidate in (f"{stem}_mask.png", f"{stem}.png"):
        path = gt_dir / defect / candidate
        if path.is_file():
            return path
    return None


def scan_dataset(root: str | Path, class_name: str) -> DatasetManifest:
    """Enumerate one class deterministically. The subdirectory name under
    test/ becomes the defect type; "good" means normal (and has no mask)."""
    class_dir = Path(root) / class_name
    train_good = class_dir / "train" / GOOD
    if not train_good.is_dir():
        raise DatasetError(f"missing train/good directory: {train_good}")
    train_items = tuple(
        TrainItem(image_id=f"train/{GOOD}/{p.stem}", path=str(p)) for p in _list_images(train_good)
    )

    test_dir = class_dir / "test"
    gt_dir = class_dir / "ground_truth"
    test_items: list[TestItem] = []
    if test_dir.is_dir():
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect = defect_dir.name
            for img in _list_images(defect_dir):
                image_id = f"test/{defect}/{img.stem}"
                if defect == GOOD:
                    test_items.append(TestItem(image_id, str(img), defect, None))
                    continue
                mask = _find_mask(gt_dir, defect, img.stem)
                if mask is None:
                    raise DatasetError(f"anomalous image {image_id!r} has no ground-truth mask under {gt_dir}")
                test_items.append(TestItem(image_id, str(img), defect, str(mask)))
    return DatasetManifest(class_name=class_name, train_items=train_items, test_items=tuple(test_items))


def preprocess(image_path: str | Path, config: PipelineConfig, image_id: Optional[str] = None) -> ImageTensor:
    """Decode, resize with area interpolation to the eval resolution,
    optionally center-crop, and scale to [0, 1] RGB CxHxW."""
    path = Path(image_path)
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DatasetError(f"cannot decode image file {path}")
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    eh, ew = config.eval_resolution
    # Resize in float32: integer area averages would quantize (e.g. a 0/255
    # checkerboard must average to exactly 127.5, not 128).
    resized = cv2.resize(rgb.astype(np.float32), (ew, eh), interpolation=cv2.INTER_AREA)
    if config.crop_to is not None:
        ch, cw = config.crop_to
        if ch > eh or cw > ew:
            raise DatasetError(f"crop {config.crop_to} larger than resized image {config.eval_resolution}")
        top = (eh - ch) // 2
        left = (ew - cw) // 2
        resized = resized[top : top + ch, left : left + cw]
    data = resized.astype(np.float32).transpose(2, 0, 1) / 255.0
    return ImageTensor(data=data, id=image_id or path.stem, source_path=str(path))


def load_mask(
    mask_path: str | Path, eval_resolution: tuple[int, int], image_id: Optional[str] = None
) -> GroundTruthMask:
    """Nearest-neighbor resize to the eval grid, then binarize at value > 0."""
    path = Path(mask_path)
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise DatasetError(f"cannot decode mask file {path}")
    eh, ew = eval_resolution
    resized = cv2.resize(raw, (ew, eh), interpolation=cv2.INTER_NEAREST)
    return GroundTruthMask(data=(resized > 0).astype(np.uint8), image_id=image_id or path.stem)


def empty_mask(image_id: str, eval_resolution: tuple[int, int]) -> GroundTruthMask:
    return GroundTruthMask(data=np.zeros(eval_resolution, dtype=np.uint8), image_id=image_id)


def subsample(items: Sequence, max_count: Optional[int] = None, seed: int = 0, stride: Optional[int] = None):
    """Deterministic subsampling: either every ``stride``-th item, or a
    seeded uniform draw without replacement keeping the original order."""
    items = list(items)
    if stride is not None:
        if stride < 1:
            raise DatasetError(f"stride must be >= 1, got {stride}")
        return items[::stride]
    if max_count is None or max_count >= len(items):
        return items
    if max_count < 1:
        raise DatasetError(f"max_count must be >= 1, got {max_count}")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(items), size=max_count, replace=False))
    return [items[i] for i in picks]
