import math

import cv2
import numpy as np
import pytest

from oracles import naive_gaussian_smooth, scalar_bilinear_resize
from spade.errors import ConfigError
from spade.extractor import ExtractorSpec, extract
from spade.retrieval import InMemoryPyramidStore, build_image_index, build_pixel_gallery
from spade.scoring import (
    LevelDistanceMap,
    bilinear_resize,
    classify,
    export_heatmap,
    fuse_levels,
    score_image,
    score_level,
    smooth,
)
from spade.types import AnomalyMap, FeatureMap, FeaturePyramid, ImageTensor, PipelineConfig, ThresholdConfig

TOY = ExtractorSpec(backend="toy")


def _single_level_pyramid(image_id, grid, stride=2):
    grid = np.asarray(grid, dtype=np.float32)
    fmap = FeatureMap(layer_name="lv", data=grid[np.newaxis] if grid.ndim == 2 else grid, stride=stride)
    return FeaturePyramid(image_id=image_id, levels=(fmap,), global_embedding=np.zeros(2, dtype=np.float32))


def test_score_level_self_match_is_zero():
    pyr = _single_level_pyramid("q", np.random.default_rng(0).normal(size=(4, 4)))
    store = InMemoryPyramidStore([pyr])
    gallery = build_pixel_gallery(["q"], store, ["lv"])
    level_map = score_level(pyr, gallery, "lv", kappa=1)
    np.testing.assert_array_equal(level_map.data, np.zeros((4, 4)))


def test_score_level_hand_case_2x2():
    # neighbor grid [[0,0],[0,10]], query all zeros: the nearest gallery
    # feature to 0 is 0 (present at three locations), so the map is zero.
    neighbor = _single_level_pyramid("n", [[0.0, 0.0], [0.0, 10.0]])
    query = _single_level_pyramid("q", [[0.0, 0.0], [0.0, 0.0]])
    gallery = build_pixel_gallery(["n"], InMemoryPyramidStore([neighbor]), ["lv"])
    level_map = score_level(query, gallery, "lv", kappa=1)
    np.testing.assert_array_equal(level_map.data, np.zeros((2, 2)))


def test_score_level_nonnegative():
    rng = np.random.default_rng(3)
    neighbor = _single_level_pyramid("n", rng.normal(size=(5, 5)))
    query = _single_level_pyramid("q", rng.normal(size=(5, 5)))
    gallery = build_pixel_gallery(["n"], InMemoryPyramidStore([neighbor]), ["lv"])
    assert score_level(query, gallery, "lv", kappa=2).data.min() >= 0


def test_score_level_missing_level():
    pyr = _single_level_pyramid("q", np.zeros((2, 2)))
    gallery = build_pixel_gallery(["q"], InMemoryPyramidStore([pyr]), ["lv"])
    with pytest.raises(ConfigError):
        score_level(pyr, gallery, "other", kappa=1)


def test_fuse_single_map_identity():
    data = np.random.default_rng(1).uniform(size=(6, 6))
    fused = fuse_levels([LevelDistanceMap("a", data)], [1.0], (6, 6))
    np.testing.assert_allclose(fused, data, rtol=0, atol=1e-15)


def test_fuse_constant_maps_convexity():
    two = LevelDistanceMap("a", np.full((3, 3), 2.0))
    four = LevelDistanceMap("b", np.full((2, 2), 4.0))
    fused = fuse_levels([two, four], [1.0, 1.0], (6, 6))
    np.testing.assert_allclose(fused, np.full((6, 6), 3.0), rtol=0, atol=1e-12)


def test_fuse_upsample_matches_scalar_oracle_fixture():
    # 2x2 map [[0,1],[0,1]] upsampled to 4x4: columns interpolate at
    # quarter-pixel offsets. Frozen from the scalar bilinear oracle.
    src = np.array([[0.0, 1.0], [0.0, 1.0]])
    expected = np.array(
        [
            [0.0, 0.25, 0.75, 1.0],
            [0.0, 0.25, 0.75, 1.0],
            [0.0, 0.25, 0.75, 1.0],
            [0.0, 0.25, 0.75, 1.0],
        ]
    )
    fused = fuse_levels([LevelDistanceMap("a", src)], [1.0], (4, 4))
    np.testing.assert_allclose(fused, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(scalar_bilinear_resize(src, 4, 4), expected, rtol=0, atol=1e-15)


def test_bilinear_matches_scalar_oracle_random():
    rng = np.random.default_rng(7)
    src = rng.uniform(size=(5, 7))
    ours = bilinear_resize(src, 13, 11)
    ref = scalar_bilinear_resize(src, 13, 11)
    np.testing.assert_allclose(ours, ref, rtol=1e-12, atol=1e-14)


def test_fuse_validations():
    with pytest.raises(ConfigError):
        fuse_levels([], [], (4, 4))
    m = LevelDistanceMap("a", np.zeros((8, 8)))
    with pytest.raises(ConfigError):
        fuse_levels([m], [1.0], (4, 4))  # target smaller than map
    with pytest.raises(ConfigError):
        fuse_levels([m], [0.0], (8, 8))  # weights sum to zero


def test_fuse_range_preservation():
    rng = np.random.default_rng(9)
    maps = [LevelDistanceMap(f"m{i}", rng.uniform(1, 5, size=(4, 4))) for i in range(3)]
    fused = fuse_levels(maps, [1.0, 2.0, 0.5], (9, 9))
    lo = min(m.data.min() for m in maps)
    hi = max(m.data.max() for m in maps)
    assert fused.min() >= lo - 1e-12 and fused.max() <= hi + 1e-12


def test_smooth_constant_unchanged():
    const = np.full((20, 20), 3.5)
    np.testing.assert_allclose(smooth(const, 4.0), const, rtol=0, atol=1e-12)


def test_smooth_sigma_zero_identity():
    data = np.random.default_rng(2).uniform(size=(10, 10))
    np.testing.assert_array_equal(smooth(data, 0.0), data)


def test_smooth_impulse_matches_naive_convolution():
    impulse = np.zeros((33, 33))
    impulse[16, 16] = 1.0
    sigma = 4.0
    ours = smooth(impulse, sigma)
    ref = naive_gaussian_smooth(impulse, sigma)
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-12)
    # center output equals the kernel's center weight
    radius = math.ceil(4 * sigma)
    xs = np.arange(-radius, radius + 1)
    k1 = np.exp(-(xs**2) / (2 * sigma**2))
    k1 /= k1.sum()
    assert ours[16, 16] == pytest.approx(k1[radius] ** 2, rel=1e-12)


def test_smooth_reflect_borders_match_naive():
    rng = np.random.default_rng(21)
    data = rng.uniform(size=(9, 9))
    np.testing.assert_allclose(smooth(data, 1.5), naive_gaussian_smooth(data, 1.5), rtol=0, atol=1e-12)


def test_smooth_range_preservation():
    rng = np.random.default_rng(4)
    data = rng.uniform(2, 7, size=(15, 15))
    out = smooth(data, 2.0)
    assert out.min() >= data.min() - 1e-12 and out.max() <= data.max() + 1e-12


def _toy_setup(n_train=6, size=32, seed=0):
    rng = np.random.default_rng(seed)
    images = [
        ImageTensor(data=rng.uniform(0.3, 0.7, (3, size, size)).astype(np.float32), id=f"train/{i}")
        for i in range(n_train)
    ]
    pyramids = [extract(img, TOY) for img in images]
    return images, build_image_index(pyramids)


def test_score_image_self_match_is_exactly_zero():
    images, index = _toy_setup()
    cfg = PipelineConfig(K=1, kappa=1, sigma=4.0, eval_resolution=(32, 32))
    test = ImageTensor(data=images[2].data, id="test/copy")
    amap = score_image(extract(test, TOY), index, cfg)
    assert amap.image_score == 0.0
    np.testing.assert_array_equal(amap.scores, np.zeros((32, 32)))


def test_score_image_localizes_patch_within_smoothing_radius():
    images, index = _toy_setup(n_train=10, size=64, seed=5)
    cfg = PipelineConfig(K=1, kappa=1, sigma=2.0, eval_resolution=(64, 64))
    data = images[0].data.copy()
    data[:, 16:48, 16:48] = 10.0
    amap = score_image(extract(ImageTensor(data=data, id="test/patched"), TOY), index, cfg)
    peak = np.unravel_index(amap.scores.argmax(), amap.scores.shape)
    radius = math.ceil(4 * cfg.sigma)
    assert 16 - radius <= peak[0] < 48 + radius
    assert 16 - radius <= peak[1] < 48 + radius


def test_score_image_order_preserved_under_monotone_transform_single_level():
    images, index = _toy_setup(n_train=5, size=32, seed=8)
    cfg = PipelineConfig(
        K=2, kappa=1, sigma=0.0, eval_resolution=(32, 32), levels_selected=("tap2",)
    )
    test = ImageTensor(
        data=np.random.default_rng(10).uniform(0.3, 0.7, (3, 32, 32)).astype(np.float32),
        id="t",
    )
    amap = score_image(extract(test, TOY), index, cfg)
    transformed = np.sqrt(amap.scores + 1.0)
    assert np.array_equal(np.argsort(amap.scores.ravel()), np.argsort(transformed.ravel()))


def test_score_image_concat_mode_self_match_zero():
    images, index = _toy_setup()
    cfg = PipelineConfig(K=1, kappa=1, sigma=1.0, eval_resolution=(32, 32), fusion_mode="concat")
    test = ImageTensor(data=images[1].data, id="t")
    amap = score_image(extract(test, TOY), index, cfg)
    np.testing.assert_array_equal(amap.scores, np.zeros((32, 32)))


def test_score_image_crop_reinsertion_replicates_edges():
    images, index = _toy_setup(n_train=4, size=24, seed=3)
    cfg = PipelineConfig(K=1, kappa=1, sigma=1.0, eval_resolution=(32, 32), crop_to=(24, 24))
    test = ImageTensor(
        data=np.random.default_rng(30).uniform(0.3, 0.7, (3, 24, 24)).astype(np.float32), id="t"
    )
    amap = score_image(extract(test, TOY), index, cfg)
    assert amap.scores.shape == (32, 32)
    inner = amap.scores[4:28, 4:28]
    # border rows replicate the nearest crop row
    np.testing.assert_array_equal(amap.scores[0, 4:28], inner[0])
    np.testing.assert_array_equal(amap.scores[31, 4:28], inner[-1])
    np.testing.assert_array_equal(amap.scores[4:28, 0], inner[:, 0])
    np.testing.assert_array_equal(amap.scores[0, 0], inner[0, 0])


def test_score_image_kdtree_backend_matches_exact():
    images, index = _toy_setup(n_train=8, size=32, seed=14)
    test = ImageTensor(
        data=np.random.default_rng(15).uniform(0.3, 0.7, (3, 32, 32)).astype(np.float32), id="t"
    )
    pyramid = extract(test, TOY)
    exact_cfg = PipelineConfig(K=3, kappa=1, sigma=1.0, eval_resolution=(32, 32))
    tree_cfg = PipelineConfig(K=3, kappa=1, sigma=1.0, eval_resolution=(32, 32), search_backend="kdtree")
    a = score_image(pyramid, index, exact_cfg)
    b = score_image(pyramid, index, tree_cfg)
    assert a.image_score == b.image_score
    np.testing.assert_array_equal(a.scores, b.scores)


def test_classify_thresholds():
    amap = AnomalyMap(image_id="x", scores=np.arange(9.0).reshape(3, 3), image_score=2.0)
    label, mask = classify(amap, ThresholdConfig(tau=np.inf, theta=-1.0))
    assert label is False
    assert mask.all()  # scores are >= 0 > -1
    label, _ = classify(amap, ThresholdConfig(tau=1.0, theta=0.0))
    assert label is True


def test_classify_monotone_in_theta():
    amap = AnomalyMap(image_id="x", scores=np.random.default_rng(0).uniform(0, 5, (6, 6)), image_score=0.0)
    flagged = [classify(amap, ThresholdConfig(tau=0, theta=t))[1].sum() for t in (0.5, 1.5, 2.5, 3.5)]
    assert flagged == sorted(flagged, reverse=True)


def test_export_heatmap_writes_png16_and_sidecar(tmp_path):
    import json

    scores = np.random.default_rng(6).uniform(0, 3, (16, 16))
    amap = AnomalyMap(image_id="test/blot/000", scores=scores, image_score=1.5)
    png_path, json_path = export_heatmap(tmp_path, amap)
    img = cv2.imread(str(png_path), cv2.IMREAD_UNCHANGED)
    assert img.dtype == np.uint16
    assert img.shape == (16, 16)
    assert img.max() == 65535 and img.min() == 0
    sidecar = json.loads(json_path.read_text())
    assert sidecar["image_id"] == "test/blot/000"
    assert sidecar["raw_min"] == pytest.approx(scores.min())
    assert sidecar["raw_max"] == pytest.approx(scores.max())
    assert sidecar["image_score"] == 1.5
