"""Minimal ONNX model loader and numpy executor.

Covers the operator subset that convolutional backbones exported by the
companion exporter actually use (Conv, BatchNormalization, Relu, MaxPool,
Add, Sub, Mul, Div, GlobalAveragePool, Flatten, Gemm, Identity). No
external dependencies beyond numpy; the protobuf wire format is parsed
directly.
"""
from .model import OnnxGraph, OnnxNode, load_model
from .runtime import ModelRuntime

__all__ = ["OnnxGraph", "OnnxNode", "ModelRuntime", "load_model"]
