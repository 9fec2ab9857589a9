"""ONNX model structure decoded into plain Python objects."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ModelLoadError
from .proto import WireError, as_signed64, decode_float32, decode_packed_varints, iter_fields

# TensorProto.DataType values we understand.
_DTYPES = {
    1: np.dtype("<f4"),  # FLOAT
    6: np.dtype("<i4"),  # INT32
    7: np.dtype("<i8"),  # INT64
    11: np.dtype("<f8"),  # DOUBLE
}


@dataclass
class OnnxNode:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    name: str = ""
    attrs: dict[str, object] = field(default_factory=dict)


@dataclass
class OnnxGraph:
    name: str
    nodes: list[OnnxNode]
    initializers: dict[str, np.ndarray]
    inputs: list[str]
    outputs: list[str]

    def tensor_names(self) -> set[str]:
        names = set(self.initializers) | set(self.inputs)
        for node in self.nodes:
            names.update(node.outputs)
        return names


def _parse_tensor(buf: bytes) -> tuple[str, np.ndarray]:
    dims: list[int] = []
    data_type = 1
    name = ""
    raw = b""
    float_data: list[float] = []
    int64_data: list[int] = []
    for fnum, wire, value in iter_fields(buf):
        if fnum == 1:
            if wire == 0:
                dims.append(as_signed64(value))
            else:
                dims.extend(decode_packed_varints(value))
        elif fnum == 2 and wire == 0:
            data_type = value
        elif fnum == 4:
            if wire == 5:
                float_data.append(decode_float32(value))
            else:
                float_data.extend(np.frombuffer(value, dtype="<f4").tolist())
        elif fnum == 7:
            if wire == 0:
                int64_data.append(as_signed64(value))
            else:
                int64_data.extend(decode_packed_varints(value))
        elif fnum == 8:
            name = value.decode("utf-8")
        elif fnum == 9:
            raw = value
    dtype = _DTYPES.get(data_type)
    if dtype is None:
        raise ModelLoadError(f"tensor {name!r}: unsupported data type {data_type}")
    if raw:
        arr = np.frombuffer(raw, dtype=dtype)
    elif float_data:
        arr = np.asarray(float_data, dtype=dtype)
    elif int64_data:
        arr = np.asarray(int64_data, dtype=dtype)
    else:
        arr = np.zeros(0, dtype=dtype)
    expected = int(np.prod(dims)) if dims else arr.size
    if arr.size != expected:
        raise ModelLoadError(f"tensor {name!r}: {arr.size} values for shape {dims}")
    return name, arr.reshape(dims)


def _parse_attribute(buf: bytes) -> tuple[str, object]:
    name = ""
    value: object = None
    ints: list[int] = []
    floats: list[float] = []
    for fnum, wire, raw in iter_fields(buf):
        if fnum == 1:
            name = raw.decode("utf-8")
        elif fnum == 2:
            value = decode_float32(raw)
        elif fnum == 3:
            value = as_signed64(raw)
        elif fnum == 4:
            value = raw  # bytes attribute
        elif fnum == 5:
            value = _parse_tensor(raw)[1]
        elif fnum == 7:
            if wire == 5:
                floats.append(decode_float32(raw))
            else:
                floats.extend(np.frombuffer(raw, dtype="<f4").tolist())
        elif fnum == 8:
            if wire == 0:
                ints.append(as_signed64(raw))
            else:
                ints.extend(decode_packed_varints(raw))
    if ints:
        value = ints
    elif floats:
        value = floats
    return name, value


def _parse_node(buf: bytes) -> OnnxNode:
    node = OnnxNode(op_type="", inputs=[], outputs=[])
    for fnum, _wire, value in iter_fields(buf):
        if fnum == 1:
            node.inputs.append(value.decode("utf-8"))
        elif fnum == 2:
            node.outputs.append(value.decode("utf-8"))
        elif fnum == 3:
            node.name = value.decode("utf-8")
        elif fnum == 4:
            node.op_type = value.decode("utf-8")
        elif fnum == 5:
            key, attr = _parse_attribute(value)
            node.attrs[key] = attr
    return node


def _parse_value_info_name(buf: bytes) -> str:
    for fnum, _wire, value in iter_fields(buf):
        if fnum == 1:
            return value.decode("utf-8")
    return ""


def _parse_graph(buf: bytes) -> OnnxGraph:
    graph = OnnxGraph(name="", nodes=[], initializers={}, inputs=[], outputs=[])
    for fnum, _wire, value in iter_fields(buf):
        if fnum == 1:
            graph.nodes.append(_parse_node(value))
        elif fnum == 2:
            graph.name = value.decode("utf-8")
        elif fnum == 5:
            name, arr = _parse_tensor(value)
            graph.initializers[name] = arr
        elif fnum == 11:
            graph.inputs.append(_parse_value_info_name(value))
        elif fnum == 12:
            graph.outputs.append(_parse_value_info_name(value))
    # Graph "inputs" in ONNX may redundantly list initializers; keep real ones.
    graph.inputs = [n for n in graph.inputs if n not in graph.initializers]
    return graph


def load_model(path: str | Path) -> OnnxGraph:
    """Parse an ONNX file into an OnnxGraph.

    Raises ModelLoadError when the file is missing or not a valid model.
    """
    path = Path(path)
    if not path.is_file():
        raise ModelLoadError(f"model file not found: {path}")
    buf = path.read_bytes()
    graph: OnnxGraph | None = None
    try:
        for fnum, _wire, value in iter_fields(buf):
            if fnum == 7:
                graph = _parse_graph(value)
    except (WireError, UnicodeDecodeError, ValueError) as exc:
        raise ModelLoadError(f"malformed model file {path}: {exc}") from exc
    if graph is None or not graph.nodes:
        raise ModelLoadError(f"{path} contains no graph")
    return graph
