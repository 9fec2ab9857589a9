"""Command line for one-shot backbone export."""
from __future__ import annotations

import argparse
import sys
from typing import Optional

from .export import SUPPORTED_BACKBONES, ExportError, export


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="backbone-export",
        description="Convert a torchvision backbone into a portable model file "
        "with named stage outputs (layer1..layer4) and baked-in normalization.",
    )
    parser.add_argument("--backbone", required=True, choices=sorted(SUPPORTED_BACKBONES))
    parser.add_argument("--out", required=True, help="output model path (.onnx)")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--weights", help="path to a state-dict file")
    source.add_argument("--pretrained", action="store_true", help="download pretrained weights")
    source.add_argument("--random-init", action="store_true", help="seeded random weights (testing)")
    parser.add_argument("--seed", type=int, default=0, help="seed for --random-init")
    args = parser.parse_args(argv)
    try:
        manifest = export(
            args.backbone,
            args.out,
            weights=args.weights,
            pretrained=args.pretrained,
            seed=args.seed,
        )
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out} (sha256 {manifest.sha256[:16]}..., pooled dim {manifest.pooled_dim})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
