"""A deliberately tiny ONNX writer, independent of the package's reader,
used to build model-file fixtures for the loader/runtime tests."""
from __future__ import annotations

import struct

import numpy as np


def _varint(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _tag(field: int, wire: int) -> bytes:
    return _varint((field << 3) | wire)


def _len_field(field: int, payload: bytes) -> bytes:
    return _tag(field, 2) + _varint(len(payload)) + payload


def _varint_field(field: int, value: int) -> bytes:
    return _tag(field, 0) + _varint(value)


def _string_field(field: int, text: str) -> bytes:
    return _len_field(field, text.encode("utf-8"))


def tensor_proto(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dtype_code = {np.dtype("float32"): 1, np.dtype("int64"): 7, np.dtype("float64"): 11}[arr.dtype]
    out = b""
    for d in arr.shape:
        out += _varint_field(1, d)
    out += _varint_field(2, dtype_code)
    out += _string_field(8, name)
    out += _len_field(9, np.ascontiguousarray(arr).tobytes())
    return out


def attr_ints(name: str, values) -> bytes:
    packed = b"".join(_varint(int(v)) for v in values)
    return _string_field(1, name) + _len_field(8, packed) + _varint_field(20, 7)


def attr_int(name: str, value: int) -> bytes:
    return _string_field(1, name) + _varint_field(3, int(value)) + _varint_field(20, 2)


def attr_float(name: str, value: float) -> bytes:
    return _string_field(1, name) + _tag(2, 5) + struct.pack("<f", value) + _varint_field(20, 1)


def node(op_type: str, inputs, outputs, attrs=()) -> bytes:
    out = b""
    for i in inputs:
        out += _string_field(1, i)
    for o in outputs:
        out += _string_field(2, o)
    out += _string_field(4, op_type)
    for attr in attrs:
        out += _len_field(5, attr)
    return out


def value_info(name: str) -> bytes:
    return _string_field(1, name)


def graph(nodes, initializers, inputs, outputs, name="g") -> bytes:
    out = b""
    for n in nodes:
        out += _len_field(1, n)
    out += _string_field(2, name)
    for t in initializers:
        out += _len_field(5, t)
    for i in inputs:
        out += _len_field(11, value_info(i))
    for o in outputs:
        out += _len_field(12, value_info(o))
    return out


def model(graph_bytes: bytes) -> bytes:
    opset = _string_field(1, "") + _varint_field(2, 17)
    return _varint_field(1, 8) + _string_field(2, "onnx-mini-test") + _len_field(7, graph_bytes) + _len_field(8, opset)


def two_conv_model(rng: np.random.Generator) -> tuple[bytes, dict]:
    """Conv(3->4,s2,p1) -> Relu -> Conv(4->6,s2,p1) with outputs t1, t2."""
    w1 = rng.normal(0, 0.5, (4, 3, 3, 3)).astype(np.float32)
    b1 = rng.normal(0, 0.1, (4,)).astype(np.float32)
    w2 = rng.normal(0, 0.5, (6, 4, 3, 3)).astype(np.float32)
    b2 = rng.normal(0, 0.1, (6,)).astype(np.float32)
    conv_attrs = [attr_ints("strides", [2, 2]), attr_ints("pads", [1, 1, 1, 1]), attr_ints("kernel_shape", [3, 3])]
    nodes = [
        node("Conv", ["image", "w1", "b1"], ["c1"], conv_attrs),
        node("Relu", ["c1"], ["t1"]),
        node("Conv", ["t1", "w2", "b2"], ["t2"], conv_attrs),
    ]
    inits = [tensor_proto("w1", w1), tensor_proto("b1", b1), tensor_proto("w2", w2), tensor_proto("b2", b2)]
    g = graph(nodes, inits, ["image"], ["t1", "t2"])
    return model(g), {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
