"""Executor for loaded ONNX graphs.

Nodes run in file order (ONNX requires topological order). Intermediate
tensors are dropped as soon as their last consumer has run. A runtime
holds only read-only state after construction, so concurrent ``run``
calls are safe.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ConfigError, ModelLoadError
from . import ops
from .model import OnnxGraph, load_model


class ModelRuntime:
    def __init__(self, graph: OnnxGraph):
        self.graph = graph
        self._known = graph.tensor_names()

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelRuntime":
        return cls(load_model(path))

    @property
    def input_names(self) -> list[str]:
        return list(self.graph.inputs)

    @property
    def output_names(self) -> list[str]:
        return list(self.graph.outputs)

    def run(self, feeds: dict[str, np.ndarray], outputs: list[str] | None = None) -> dict[str, np.ndarray]:
        """Execute the graph; returns {name: array} for the requested outputs."""
        wanted = list(outputs) if outputs is not None else list(self.graph.outputs)
        missing = [n for n in wanted if n not in self._known]
        if missing:
            raise ConfigError(f"model has no outputs named {missing}; graph outputs: {self.graph.outputs}")
        for name in self.graph.inputs:
            if name not in feeds:
                raise ConfigError(f"missing model input {name!r}")

        values: dict[str, np.ndarray] = {
            name: np.asarray(feed, dtype=np.float32) for name, feed in feeds.items()
        }
        values.update(self.graph.initializers)

        last_use: dict[str, int] = {}
        for i, node in enumerate(self.graph.nodes):
            for name in node.inputs:
                last_use[name] = i
        keep = set(wanted) | set(self.graph.initializers) | set(feeds)

        remaining = set(wanted) - set(values)
        for i, node in enumerate(self.graph.nodes):
            if not remaining:
                break
            self._run_node(node, values)
            remaining -= set(node.outputs)
            for name in node.inputs:
                if last_use.get(name) == i and name not in keep:
                    values.pop(name, None)
        still_missing = [n for n in wanted if n not in values]
        if still_missing:
            raise ModelLoadError(f"graph never produced outputs {still_missing}")
        return {name: values[name] for name in wanted}

    def _run_node(self, node, values: dict[str, np.ndarray]) -> None:
        try:
            ins = [values[name] if name else None for name in node.inputs]
        except KeyError as exc:
            raise ModelLoadError(f"node {node.name or node.op_type}: input {exc} not computed yet") from exc
        op = node.op_type
        if op == "Conv":
            out = ops.conv(ins[0], ins[1], ins[2] if len(ins) > 2 else None, node.attrs)
        elif op == "Relu":
            out = np.maximum(ins[0], 0)
        elif op == "MaxPool":
            out = ops.max_pool(ins[0], node.attrs)
        elif op == "BatchNormalization":
            out = ops.batch_norm(ins[0], ins[1], ins[2], ins[3], ins[4], node.attrs)
        elif op == "Add":
            out = ins[0] + ins[1]
        elif op == "Sub":
            out = ins[0] - ins[1]
        elif op == "Mul":
            out = ins[0] * ins[1]
        elif op == "Div":
            out = ins[0] / ins[1]
        elif op == "GlobalAveragePool":
            out = ops.global_average_pool(ins[0])
        elif op == "Flatten":
            out = ops.flatten(ins[0], node.attrs)
        elif op == "Gemm":
            out = ops.gemm(ins[0], ins[1], ins[2] if len(ins) > 2 else None, node.attrs)
        elif op == "Identity":
            out = ins[0]
        elif op == "Constant":
            out = node.attrs["value"]
        else:
            raise ModelLoadError(f"unsupported op type {op!r} (node {node.name!r})")
        values[node.outputs[0]] = np.asarray(out)
