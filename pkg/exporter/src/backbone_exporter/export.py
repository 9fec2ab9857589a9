"""Export entry point: backbone name -> portable model file + manifest."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torchvision.models as tvm

from . import onnx_writer as w
from .resnet_graph import IMAGENET_MEAN, IMAGENET_STD, OUTPUT_NAMES, POOLED_NAME, TAP_NAMES, build_graph

SUPPORTED_BACKBONES = {
    "resnet18": tvm.resnet18,
    "resnet34": tvm.resnet34,
    "resnet50": tvm.resnet50,
    "wide_resnet50_2": tvm.wide_resnet50_2,
}


class ExportError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExportManifest:
    backbone: str
    tap_names: tuple[str, ...]
    pooled_name: str
    tap_shapes_at_224: dict[str, list[int]]
    pooled_dim: int
    normalization_mean: tuple[float, ...]
    normalization_std: tuple[float, ...]
    weights_source: str
    sha256: str

    def save_json(self, path: str | Path) -> None:
        payload = asdict(self)
        payload["tap_names"] = list(self.tap_names)
        payload["normalization_mean"] = list(self.normalization_mean)
        payload["normalization_std"] = list(self.normalization_std)
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def _build_model(backbone: str, weights: Optional[str], pretrained: bool, seed: int) -> tuple[torch.nn.Module, str]:
    ctor = SUPPORTED_BACKBONES.get(backbone)
    if ctor is None:
        raise ExportError(f"unknown backbone {backbone!r}; supported: {sorted(SUPPORTED_BACKBONES)}")
    if weights:
        net = ctor(weights=None)
        state = torch.load(weights, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        source = f"file:{weights}"
    elif pretrained:
        try:
            net = ctor(weights="IMAGENET1K_V1")
        except Exception as exc:  # weight download failure must surface cleanly
            raise ExportError(f"could not obtain pretrained weights for {backbone}: {exc}") from exc
        source = "imagenet"
    else:
        torch.manual_seed(seed)
        net = ctor(weights=None)
        source = f"random:seed={seed}"
    net.eval()
    return net, source


def _tap_shapes(net: torch.nn.Module) -> dict[str, list[int]]:
    shapes: dict[str, list[int]] = {}
    hooks = []
    for name in OUTPUT_NAMES:
        stage = getattr(net, name)
        hooks.append(stage.register_forward_hook(
            lambda _m, _i, out, name=name: shapes.__setitem__(name, list(out.shape[1:]))
        ))
    with torch.no_grad():
        net(torch.zeros(1, 3, 224, 224))
    for h in hooks:
        h.remove()
    return shapes


def export(
    backbone: str,
    output_path: str | Path,
    weights: Optional[str] = None,
    pretrained: bool = False,
    seed: int = 0,
) -> ExportManifest:
    """Write the portable model file plus its manifest JSON.

    Weight source precedence: explicit state-dict file, then downloaded
    pretrained weights, then seeded random initialization (for testing
    and for environments without weight access).
    """
    output_path = Path(output_path)
    net, source = _build_model(backbone, weights, pretrained, seed)
    with torch.no_grad():
        graph = build_graph(net)
    blob = w.model(graph)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_bytes(blob)

    shapes = _tap_shapes(net)
    manifest = ExportManifest(
        backbone=backbone,
        tap_names=TAP_NAMES,
        pooled_name=POOLED_NAME,
        tap_shapes_at_224=shapes,
        pooled_dim=shapes[POOLED_NAME][0],
        normalization_mean=IMAGENET_MEAN,
        normalization_std=IMAGENET_STD,
        weights_source=source,
        sha256=hashlib.sha256(blob).hexdigest(),
    )
    manifest.save_json(output_path.with_suffix(output_path.suffix + ".manifest.json"))
    return manifest


def reference_activations(net: torch.nn.Module, images: np.ndarray) -> dict[str, np.ndarray]:
    """Framework-side activations for parity checks: normalize [0,1] CHW
    input with the ImageNet constants and capture the stage outputs.

    Evaluated in double precision. Two independent float32 runs of a
    50-conv stack differ by up to ~1e-4 from rounding alone, which would
    measure framework noise rather than engine fidelity.
    """
    net = net.double()
    mean = torch.tensor(IMAGENET_MEAN, dtype=torch.float64).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=torch.float64).view(1, 3, 1, 1)
    captured: dict[str, np.ndarray] = {}
    hooks = []
    for name in OUTPUT_NAMES:
        stage = getattr(net, name)
        hooks.append(stage.register_forward_hook(
            lambda _m, _i, out, name=name: captured.__setitem__(name, out.detach().numpy())
        ))
    with torch.no_grad():
        x = (torch.from_numpy(images).double() - mean) / std
        net(x)
    for h in hooks:
        h.remove()
    return captured
