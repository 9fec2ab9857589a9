"""Bare-bones protobuf wire-format reader.

Only what decoding ONNX model files requires: varints, length-delimited
fields, 32/64-bit scalars, and packed repeated scalars.
"""
from __future__ import annotations

import struct
from typing import Iterator


class WireError(ValueError):
    pass


def read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise WireError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise WireError("varint too long")


def iter_fields(buf: bytes) -> Iterator[tuple[int, int, object]]:
    """Yield (field_number, wire_type, value) for each field in a message.

    Values are ints for wire type 0, bytes for 1/2/5 (caller decodes).
    """
    pos = 0
    n = len(buf)
    while pos < n:
        tag, pos = read_varint(buf, pos)
        field, wire = tag >> 3, tag & 7
        if wire == 0:
            value, pos = read_varint(buf, pos)
        elif wire == 1:
            value, pos = buf[pos : pos + 8], pos + 8
        elif wire == 2:
            length, pos = read_varint(buf, pos)
            value, pos = buf[pos : pos + length], pos + length
            if len(value) != length:
                raise WireError("truncated length-delimited field")
        elif wire == 5:
            value, pos = buf[pos : pos + 4], pos + 4
        else:
            raise WireError(f"unsupported wire type {wire}")
        if pos > n:
            raise WireError("field overruns buffer")
        yield field, wire, value


def as_signed64(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


def decode_float32(raw: bytes) -> float:
    return struct.unpack("<f", raw)[0]


def decode_packed_varints(raw: bytes) -> list[int]:
    out = []
    pos = 0
    while pos < len(raw):
        value, pos = read_varint(raw, pos)
        out.append(as_signed64(value))
    return out
