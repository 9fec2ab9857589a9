"""Translate a torchvision ResNet into ONNX nodes with named stage outputs.

Input normalization is folded into the graph (Sub/Div on the raw [0,1]
image), so consumers never reimplement preprocessing. The four stage
outputs are exposed by name: layer1 .. layer4.
"""
from __future__ import annotations

import numpy as np
import torch
from torchvision.models.resnet import BasicBlock, Bottleneck

from . import onnx_writer as w

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

TAP_NAMES = ("layer1", "layer2", "layer3")
POOLED_NAME = "layer4"
OUTPUT_NAMES = TAP_NAMES + (POOLED_NAME,)


class _GraphBuilder:
    def __init__(self):
        self.nodes: list[w.Node] = []
        self.initializers: list[bytes] = []

    def add_tensor(self, name: str, array: np.ndarray) -> str:
        self.initializers.append(w.tensor(name, np.ascontiguousarray(array)))
        return name

    def conv(self, prefix: str, module: torch.nn.Conv2d, x: str, out: str) -> str:
        if module.groups != 1 or module.dilation != (1, 1):
            raise ValueError(f"{prefix}: only group-1, dilation-1 convolutions are supported")
        weight = self.add_tensor(f"{prefix}.weight", module.weight.detach().numpy().astype(np.float32))
        inputs = [x, weight]
        if module.bias is not None:
            inputs.append(self.add_tensor(f"{prefix}.bias", module.bias.detach().numpy().astype(np.float32)))
        kh, kw = module.kernel_size
        ph, pw = module.padding
        sh, sw = module.stride
        self.nodes.append(
            w.Node(
                "Conv",
                inputs,
                [out],
                name=prefix,
                attrs=(
                    w.attr_ints("dilations", (1, 1)),
                    w.attr_int("group", 1),
                    w.attr_ints("kernel_shape", (kh, kw)),
                    w.attr_ints("pads", (ph, pw, ph, pw)),
                    w.attr_ints("strides", (sh, sw)),
                ),
            )
        )
        return out

    def batch_norm(self, prefix: str, module: torch.nn.BatchNorm2d, x: str, out: str) -> str:
        names = [
            self.add_tensor(f"{prefix}.weight", module.weight.detach().numpy().astype(np.float32)),
            self.add_tensor(f"{prefix}.bias", module.bias.detach().numpy().astype(np.float32)),
            self.add_tensor(f"{prefix}.running_mean", module.running_mean.numpy().astype(np.float32)),
            self.add_tensor(f"{prefix}.running_var", module.running_var.numpy().astype(np.float32)),
        ]
        self.nodes.append(
            w.Node(
                "BatchNormalization",
                [x] + names,
                [out],
                name=prefix,
                attrs=(w.attr_float("epsilon", module.eps),),
            )
        )
        return out

    def relu(self, prefix: str, x: str, out: str) -> str:
        self.nodes.append(w.Node("Relu", [x], [out], name=prefix))
        return out

    def add(self, prefix: str, a: str, b: str, out: str) -> str:
        self.nodes.append(w.Node("Add", [a, b], [out], name=prefix))
        return out


def _emit_basic_block(b: _GraphBuilder, prefix: str, block: BasicBlock, x: str, out: str) -> str:
    h = b.conv(f"{prefix}.conv1", block.conv1, x, f"{prefix}.c1")
    h = b.batch_norm(f"{prefix}.bn1", block.bn1, h, f"{prefix}.b1")
    h = b.relu(f"{prefix}.relu1", h, f"{prefix}.r1")
    h = b.conv(f"{prefix}.conv2", block.conv2, h, f"{prefix}.c2")
    h = b.batch_norm(f"{prefix}.bn2", block.bn2, h, f"{prefix}.b2")
    identity = _emit_downsample(b, prefix, block, x)
    s = b.add(f"{prefix}.add", h, identity, f"{prefix}.sum")
    return b.relu(f"{prefix}.relu2", s, out)


def _emit_bottleneck(b: _GraphBuilder, prefix: str, block: Bottleneck, x: str, out: str) -> str:
    h = b.conv(f"{prefix}.conv1", block.conv1, x, f"{prefix}.c1")
    h = b.batch_norm(f"{prefix}.bn1", block.bn1, h, f"{prefix}.b1")
    h = b.relu(f"{prefix}.relu1", h, f"{prefix}.r1")
    h = b.conv(f"{prefix}.conv2", block.conv2, h, f"{prefix}.c2")
    h = b.batch_norm(f"{prefix}.bn2", block.bn2, h, f"{prefix}.b2")
    h = b.relu(f"{prefix}.relu2", h, f"{prefix}.r2")
    h = b.conv(f"{prefix}.conv3", block.conv3, h, f"{prefix}.c3")
    h = b.batch_norm(f"{prefix}.bn3", block.bn3, h, f"{prefix}.b3")
    identity = _emit_downsample(b, prefix, block, x)
    s = b.add(f"{prefix}.add", h, identity, f"{prefix}.sum")
    return b.relu(f"{prefix}.relu3", s, out)


def _emit_downsample(b: _GraphBuilder, prefix: str, block, x: str) -> str:
    if block.downsample is None:
        return x
    conv, bn = block.downsample[0], block.downsample[1]
    h = b.conv(f"{prefix}.downsample.0", conv, x, f"{prefix}.d0")
    return b.batch_norm(f"{prefix}.downsample.1", bn, h, f"{prefix}.d1")


def build_graph(net: torch.nn.Module, input_name: str = "input") -> bytes:
    """Emit the full inference graph with normalization baked in."""
    b = _GraphBuilder()
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(IMAGENET_STD, dtype=np.float32).reshape(1, 3, 1, 1)
    b.add_tensor("norm.mean", mean)
    b.add_tensor("norm.std", std)
    b.nodes.append(w.Node("Sub", [input_name, "norm.mean"], ["norm.centered"], name="norm.sub"))
    b.nodes.append(w.Node("Div", ["norm.centered", "norm.std"], ["norm.scaled"], name="norm.div"))

    h = b.conv("conv1", net.conv1, "norm.scaled", "stem.c")
    h = b.batch_norm("bn1", net.bn1, h, "stem.b")
    h = b.relu("relu", h, "stem.r")
    b.nodes.append(
        w.Node(
            "MaxPool",
            [h],
            ["stem.pool"],
            name="maxpool",
            attrs=(
                w.attr_ints("kernel_shape", (3, 3)),
                w.attr_ints("pads", (1, 1, 1, 1)),
                w.attr_ints("strides", (2, 2)),
            ),
        )
    )
    h = "stem.pool"

    for stage_idx, stage_name in enumerate(OUTPUT_NAMES, start=1):
        stage = getattr(net, f"layer{stage_idx}")
        for block_idx, block in enumerate(stage):
            prefix = f"{stage_name}.{block_idx}"
            out = stage_name if block_idx == len(stage) - 1 else f"{prefix}.out"
            if isinstance(block, Bottleneck):
                h = _emit_bottleneck(b, prefix, block, h, out)
            elif isinstance(block, BasicBlock):
                h = _emit_basic_block(b, prefix, block, h, out)
            else:
                raise ValueError(f"unsupported block type {type(block).__name__}")

    inputs = [w.value_info(input_name, ("N", 3, "H", "W"))]
    outputs = [w.value_info(name, ("N", "C", "H", "W")) for name in OUTPUT_NAMES]
    return w.graph(b.nodes, b.initializers, inputs, outputs)
