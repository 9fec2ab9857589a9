import numpy as np
import pytest

import onnx_mini
from oracles import scalar_conv2d
from spade.errors import ConfigError, ModelLoadError
from spade.extractor import ExtractorSpec, extract
from spade.onnxlite import ModelRuntime, load_model
from spade.types import ImageTensor


@pytest.fixture()
def small_model(tmp_path):
    rng = np.random.default_rng(42)
    blob, weights = onnx_mini.two_conv_model(rng)
    path = tmp_path / "model.onnx"
    path.write_bytes(blob)
    return path, weights


def test_loader_reads_structure(small_model):
    path, _ = small_model
    graph = load_model(path)
    assert [n.op_type for n in graph.nodes] == ["Conv", "Relu", "Conv"]
    assert graph.inputs == ["image"]
    assert graph.outputs == ["t1", "t2"]
    assert set(graph.initializers) == {"w1", "b1", "w2", "b2"}
    assert graph.initializers["w1"].shape == (4, 3, 3, 3)
    conv = graph.nodes[0]
    assert conv.attrs["strides"] == [2, 2]
    assert conv.attrs["pads"] == [1, 1, 1, 1]


def test_runtime_matches_scalar_conv_oracle(small_model):
    path, weights = small_model
    runtime = ModelRuntime.from_file(path)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (1, 3, 12, 12)).astype(np.float32)
    out = runtime.run({"image": x}, ["t1", "t2"])
    ref1 = np.maximum(scalar_conv2d(x[0], weights["w1"], weights["b1"], stride=2, pad=1), 0.0)
    ref2 = scalar_conv2d(ref1, weights["w2"], weights["b2"], stride=2, pad=1)
    np.testing.assert_allclose(out["t1"][0], ref1, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(out["t2"][0], ref2, rtol=1e-5, atol=1e-6)


def test_runtime_requesting_subset_stops_early(small_model):
    path, _ = small_model
    runtime = ModelRuntime.from_file(path)
    x = np.zeros((1, 3, 8, 8), dtype=np.float32)
    out = runtime.run({"image": x}, ["t1"])
    assert set(out) == {"t1"}


def test_unknown_output_is_config_error(small_model):
    path, _ = small_model
    runtime = ModelRuntime.from_file(path)
    with pytest.raises(ConfigError):
        runtime.run({"image": np.zeros((1, 3, 8, 8), dtype=np.float32)}, ["nope"])


def test_malformed_file_is_load_error(tmp_path):
    bad = tmp_path / "garbage.onnx"
    bad.write_bytes(b"\xff" * 64)
    with pytest.raises(ModelLoadError):
        load_model(bad)
    empty = tmp_path / "empty.onnx"
    empty.write_bytes(b"")
    with pytest.raises(ModelLoadError):
        load_model(empty)


def test_missing_file_is_load_error(tmp_path):
    with pytest.raises(ModelLoadError):
        load_model(tmp_path / "not-there.onnx")


def test_extract_via_portable_model(small_model):
    path, weights = small_model
    spec = ExtractorSpec(backend="portable_model", model_path=str(path), tap_names=("t1", "t2"))
    img = ImageTensor(
        data=np.random.default_rng(3).uniform(0, 1, (3, 16, 16)).astype(np.float32), id="x"
    )
    pyr = extract(img, spec)
    assert pyr.level_names() == ("t1", "t2")
    assert [lvl.stride for lvl in pyr.levels] == [2, 4]
    # pooled output defaults to the last tap
    ref1 = np.maximum(scalar_conv2d(img.data, weights["w1"], weights["b1"], 2, 1), 0.0)
    ref2 = scalar_conv2d(ref1, weights["w2"], weights["b2"], 2, 1)
    np.testing.assert_allclose(pyr.global_embedding, ref2.mean(axis=(1, 2)), rtol=1e-4, atol=1e-5)


def test_division_blowup_becomes_numeric_error(tmp_path):
    # A Div by a zero constant produces inf activations; the extractor must
    # report the offending layer instead of propagating silently.
    import onnx_mini as m

    zero = m.tensor_proto("denom", np.zeros((1,), dtype=np.float32))
    nodes = [m.node("Div", ["image", "denom"], ["bad"])]
    blob = m.model(m.graph(nodes, [zero], ["image"], ["bad"]))
    path = tmp_path / "div.onnx"
    path.write_bytes(blob)
    spec = ExtractorSpec(backend="portable_model", model_path=str(path), tap_names=("bad",))
    img = ImageTensor(data=np.ones((3, 4, 4), dtype=np.float32), id="x")
    from spade.errors import NumericError

    with pytest.raises(NumericError, match="bad"):
        with np.errstate(divide="ignore"):
            extract(img, spec)
