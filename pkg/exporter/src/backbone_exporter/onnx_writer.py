"""Hand-rolled ONNX serialization.

The target environment has no onnx package, so the protobuf wire format is
encoded directly. Only the message subset needed for inference graphs is
supported: ModelProto/GraphProto/NodeProto/AttributeProto/TensorProto and
ValueInfoProto with static-or-dynamic tensor shapes. Output is a standard
ONNX file (ir_version 8, opset 17) readable by any ONNX tool.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

_DTYPE_CODES = {
    np.dtype("float32"): 1,
    np.dtype("uint8"): 2,
    np.dtype("int32"): 6,
    np.dtype("int64"): 7,
    np.dtype("float64"): 11,
}


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


def _tag(field_num: int, wire: int) -> bytes:
    return _varint((field_num << 3) | wire)


def _scalar(field_num: int, value: int) -> bytes:
    return _tag(field_num, 0) + _varint(int(value))


def _blob(field_num: int, payload: bytes) -> bytes:
    return _tag(field_num, 2) + _varint(len(payload)) + payload


def _string(field_num: int, text: str) -> bytes:
    return _blob(field_num, text.encode("utf-8"))


def _float32(field_num: int, value: float) -> bytes:
    return _tag(field_num, 5) + struct.pack("<f", float(value))


def tensor(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"unsupported tensor dtype {array.dtype}")
    out = b"".join(_scalar(1, d) for d in array.shape)
    out += _scalar(2, code)
    out += _string(8, name)
    out += _blob(9, array.tobytes())
    return out


@dataclass
class Attr:
    name: str
    payload: bytes


def attr_int(name: str, value: int) -> Attr:
    return Attr(name, _string(1, name) + _scalar(3, value) + _scalar(20, 2))


def attr_float(name: str, value: float) -> Attr:
    return Attr(name, _string(1, name) + _float32(2, value) + _scalar(20, 1))


def attr_ints(name: str, values: Iterable[int]) -> Attr:
    packed = b"".join(_varint(int(v)) for v in values)
    return Attr(name, _string(1, name) + _blob(8, packed) + _scalar(20, 7))


@dataclass
class Node:
    op_type: str
    inputs: Sequence[str]
    outputs: Sequence[str]
    name: str = ""
    attrs: Sequence[Attr] = field(default_factory=tuple)

    def encode(self) -> bytes:
        out = b"".join(_string(1, i) for i in self.inputs)
        out += b"".join(_string(2, o) for o in self.outputs)
        if self.name:
            out += _string(3, self.name)
        out += _string(4, self.op_type)
        out += b"".join(_blob(5, a.payload) for a in self.attrs)
        return out


def _dim(value) -> bytes:
    if isinstance(value, str):
        return _string(2, value)  # symbolic (e.g. dynamic batch)
    return _scalar(1, int(value))


def value_info(name: str, shape: Sequence, elem_type: int = 1) -> bytes:
    shape_proto = b"".join(_blob(1, _dim(d)) for d in shape)
    tensor_type = _scalar(1, elem_type) + _blob(2, shape_proto)
    type_proto = _blob(1, tensor_type)
    return _string(1, name) + _blob(2, type_proto)


def graph(
    nodes: Sequence[Node],
    initializers: Sequence[bytes],
    inputs: Sequence[bytes],
    outputs: Sequence[bytes],
    name: str = "backbone",
) -> bytes:
    out = b"".join(_blob(1, n.encode()) for n in nodes)
    out += _string(2, name)
    out += b"".join(_blob(5, t) for t in initializers)
    out += b"".join(_blob(11, vi) for vi in inputs)
    out += b"".join(_blob(12, vi) for vi in outputs)
    return out


def model(graph_bytes: bytes, producer: str = "backbone-exporter", opset: int = 17) -> bytes:
    opset_id = _string(1, "") + _scalar(2, opset)
    out = _scalar(1, 8)  # ir_version
    out += _string(2, producer)
    out += _blob(7, graph_bytes)
    out += _blob(8, opset_id)
    return out
