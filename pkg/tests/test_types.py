import numpy as np
import pytest

from spade.errors import ConfigError, NumericError, ShapeMismatchError
from spade.types import (
    AnomalyMap,
    FeatureMap,
    FeaturePyramid,
    GroundTruthMask,
    ImageTensor,
    PipelineConfig,
)


def _pyramid(image_id="img", dims=(4, 8)):
    levels = (
        FeatureMap(layer_name="l0", data=np.zeros((2, dims[1], dims[1])), stride=2),
        FeatureMap(layer_name="l1", data=np.zeros((2, dims[0], dims[0])), stride=4),
    )
    return FeaturePyramid(image_id=image_id, levels=levels, global_embedding=np.arange(3.0))


def test_image_tensor_validates_channels():
    with pytest.raises(ShapeMismatchError):
        ImageTensor(data=np.zeros((2, 4, 4)), id="x")
    t = ImageTensor(data=np.zeros((1, 4, 4)), id="x")
    assert t.height == 4 and t.width == 4


def test_image_tensor_rejects_nonfinite():
    data = np.zeros((3, 4, 4))
    data[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        ImageTensor(data=data, id="x")


def test_tensors_are_immutable():
    t = ImageTensor(data=np.zeros((3, 4, 4)), id="x")
    with pytest.raises(ValueError):
        t.data[0, 0, 0] = 1.0


def test_pyramid_requires_increasing_strides():
    a = FeatureMap(layer_name="a", data=np.zeros((1, 8, 8)), stride=4)
    b = FeatureMap(layer_name="b", data=np.zeros((1, 4, 4)), stride=4)
    with pytest.raises(ShapeMismatchError):
        FeaturePyramid(image_id="x", levels=(a, b), global_embedding=np.ones(2))


def test_pyramid_level_lookup():
    pyr = _pyramid()
    assert pyr.level("l1").stride == 4
    with pytest.raises(KeyError):
        pyr.level("nope")


def test_mask_values_binary():
    with pytest.raises(ShapeMismatchError):
        GroundTruthMask(data=np.full((4, 4), 255), image_id="m")
    mask = GroundTruthMask(data=np.eye(4, dtype=int), image_id="m")
    assert mask.data.dtype == np.uint8


def test_anomaly_map_rejects_negative_scores():
    with pytest.raises(NumericError):
        AnomalyMap(image_id="a", scores=np.full((2, 2), -1.0), image_score=0.0)


def test_config_defaults_match_reference_setting():
    cfg = PipelineConfig()
    assert cfg.K == 50
    assert cfg.kappa == 1
    assert cfg.sigma == 4.0
    assert cfg.eval_resolution == (256, 256)
    assert cfg.retrieval_mode == "knn"
    assert cfg.crop_to is None


def test_config_weight_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(levels_selected=("a", "b"), level_weights=(1.0,))
    with pytest.raises(ConfigError):
        PipelineConfig(levels_selected=("a",), level_weights=(0.0,))
    with pytest.raises(ConfigError):
        PipelineConfig(levels_selected=("a",), level_weights=(-1.0,))
    cfg = PipelineConfig(levels_selected=("a", "b"), level_weights=(1.0, 3.0))
    assert cfg.weights_for(("b", "a")) == (3.0, 1.0)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        PipelineConfig.from_dict({"K": 3, "bogus": 1})


def test_config_dict_round_trip():
    cfg = PipelineConfig(K=7, kappa=2, levels_selected=("a",), level_weights=(2.0,), crop_to=(4, 4))
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


def test_threshold_config_round_trip():
    import dataclasses
    import json

    from spade.types import ThresholdConfig

    thresholds = ThresholdConfig(tau=1.5, theta=-0.25)
    payload = json.dumps(dataclasses.asdict(thresholds))
    assert ThresholdConfig(**json.loads(payload)) == thresholds


def test_pyramid_equality_field_for_field():
    assert _pyramid() == _pyramid()
    assert _pyramid("one") != _pyramid("two")
