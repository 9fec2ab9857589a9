import cv2
import numpy as np
import pytest

from synth import build_dataset_tree
from spade.dataset import DatasetManifest, empty_mask, load_mask, preprocess, scan_dataset, subsample
from spade.errors import DatasetError
from spade.types import PipelineConfig


@pytest.fixture()
def tree(tmp_path):
    build_dataset_tree(tmp_path, "widget", n_train=2, n_good_test=1, n_defect_test=2)
    return tmp_path


def test_scan_counts_and_layout(tree):
    manifest = scan_dataset(tree, "widget")
    assert len(manifest.train_items) == 2
    assert len(manifest.test_items) == 3
    good = [t for t in manifest.test_items if t.defect_type == "good"]
    assert len(good) == 1 and good[0].mask_path is None
    defects = [t for t in manifest.test_items if t.defect_type == "blot"]
    assert all(t.mask_path for t in defects)
    assert manifest.train_items[0].image_id == "train/good/000"


def test_scan_is_deterministic(tree):
    assert scan_dataset(tree, "widget") == scan_dataset(tree, "widget")


def test_scan_missing_train_good(tmp_path):
    (tmp_path / "thing" / "train").mkdir(parents=True)
    with pytest.raises(DatasetError, match="train"):
        scan_dataset(tmp_path, "thing")


def test_scan_anomalous_without_mask(tmp_path):
    build_dataset_tree(tmp_path, "widget", n_train=1, n_good_test=0, n_defect_test=1)
    mask = next((tmp_path / "widget" / "ground_truth" / "blot").iterdir())
    mask.unlink()
    with pytest.raises(DatasetError, match="mask"):
        scan_dataset(tmp_path, "widget")


def test_manifest_json_round_trip(tree, tmp_path):
    manifest = scan_dataset(tree, "widget")
    manifest.save_json(tmp_path / "manifest.json")
    assert DatasetManifest.load_json(tmp_path / "manifest.json") == manifest


def test_preprocess_identity_resize(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    path = tmp_path / "img.png"
    cv2.imwrite(str(path), img)
    cfg = PipelineConfig(eval_resolution=(16, 16))
    tensor = preprocess(path, cfg)
    rgb = cv2.cvtColor(img, cv2.COLOR_BGR2RGB).transpose(2, 0, 1)
    np.testing.assert_allclose(tensor.data, rgb / 255.0, rtol=0, atol=1e-7)


def test_preprocess_constant_image_stays_constant(tmp_path):
    img = np.full((512, 512, 3), 77, dtype=np.uint8)
    path = tmp_path / "const.png"
    cv2.imwrite(str(path), img)
    tensor = preprocess(path, PipelineConfig(eval_resolution=(256, 256)))
    np.testing.assert_allclose(tensor.data, np.full((3, 256, 256), 77 / 255.0), rtol=0, atol=1e-7)


def test_preprocess_checkerboard_area_average(tmp_path):
    board = np.zeros((4, 4), dtype=np.uint8)
    board[::2, 1::2] = 255
    board[1::2, ::2] = 255
    img = np.stack([board] * 3, axis=-1)
    path = tmp_path / "board.png"
    cv2.imwrite(str(path), img)
    tensor = preprocess(path, PipelineConfig(eval_resolution=(2, 2)))
    np.testing.assert_allclose(tensor.data, np.full((3, 2, 2), 0.5), rtol=0, atol=1e-7)


def test_preprocess_center_crop(tmp_path):
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    img[2:6, 2:6] = 200
    path = tmp_path / "crop.png"
    cv2.imwrite(str(path), img)
    cfg = PipelineConfig(eval_resolution=(8, 8), crop_to=(4, 4))
    tensor = preprocess(path, cfg)
    assert tensor.data.shape == (3, 4, 4)
    np.testing.assert_allclose(tensor.data, np.full((3, 4, 4), 200 / 255.0), rtol=0, atol=1e-7)


def test_preprocess_undecodable(tmp_path):
    path = tmp_path / "noise.png"
    path.write_bytes(b"not an image")
    with pytest.raises(DatasetError):
        preprocess(path, PipelineConfig())


def test_load_mask_zero_and_binarize(tmp_path):
    path = tmp_path / "mask.png"
    cv2.imwrite(str(path), np.zeros((16, 16), dtype=np.uint8))
    mask = load_mask(path, (16, 16))
    assert mask.data.sum() == 0
    values = np.zeros((16, 16), dtype=np.uint8)
    values[4:8, 4:8] = 255
    cv2.imwrite(str(path), values)
    mask = load_mask(path, (16, 16))
    assert set(np.unique(mask.data)) == {0, 1}
    assert mask.data.sum() == 16


def test_load_mask_nearest_downscale_aligned_square(tmp_path):
    big = np.zeros((512, 512), dtype=np.uint8)
    big[128:192, 256:320] = 255  # 64x64 square on the aligned grid
    path = tmp_path / "big_mask.png"
    cv2.imwrite(str(path), big)
    mask = load_mask(path, (256, 256))
    expected = np.zeros((256, 256), dtype=np.uint8)
    expected[64:96, 128:160] = 1
    np.testing.assert_array_equal(mask.data, expected)


def test_empty_mask_matches_resolution():
    mask = empty_mask("x", (16, 24))
    assert mask.data.shape == (16, 24)
    assert mask.data.sum() == 0


@pytest.mark.skipif("SPADE_MVTEC_ROOT" not in __import__("os").environ, reason="dataset assets absent")
def test_mvtec_hazelnut_train_count():
    import os

    manifest = scan_dataset(os.environ["SPADE_MVTEC_ROOT"], "hazelnut")
    assert len(manifest.train_items) == 391


def test_subsample_identity_and_stride():
    items = list(range(10))
    assert subsample(items, max_count=20) == items
    assert subsample(items, stride=5) == [0, 5]
    assert subsample(items, max_count=4, seed=3) == subsample(items, max_count=4, seed=3)
    picked = subsample(items, max_count=4, seed=3)
    assert picked == sorted(picked)  # original order preserved
    assert len(set(picked)) == 4
