"""Command-line surface.

Subcommands: index (build feature archive + embedding index), score
(anomaly maps + scores.csv for a test set), eval (ROCAUC/PRO reports),
ablate (one score+eval run per level-set/retrieval-mode variant).

Every command is deterministic given (config, seed, assets); outputs are
plain files. Exit codes: 0 success, 1 user/config error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import archive
from .dataset import DatasetManifest, empty_mask, load_mask, preprocess, scan_dataset, subsample
from .errors import (
    ArchiveError,
    ConfigError,
    DatasetError,
    ModelLoadError,
    ParameterError,
    SpadeError,
    UndefinedMetricError,
)
from .evaluation import evaluate
from .extractor import ExtractorSpec, extract
from .retrieval import ArchivePyramidStore, GalleryIndex
from .scoring import export_heatmap, score_image
from .types import PipelineConfig

_USER_ERRORS = (
    ConfigError,
    ParameterError,
    DatasetError,
    ModelLoadError,
    ArchiveError,
    UndefinedMetricError,
    FileNotFoundError,
)


def _log(msg: str) -> None:
    print(f"[spade] {msg}", flush=True)


def per_image_seed(base_seed: int, image_id: str) -> int:
    """Stable per-image seed for random retrieval (independent of platform)."""
    digest = hashlib.sha256(f"{base_seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _parse_hw(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) != 2:
        raise ConfigError(f"expected HxW or H,W, got {text!r}")
    return parts[0], parts[1]


def _parse_names(text: Optional[str]) -> Optional[tuple[str, ...]]:
    if not text:
        return None
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    weights = None
    if getattr(args, "level_weights", None):
        weights = tuple(float(w) for w in args.level_weights.split(","))
    return PipelineConfig(
        K=args.K,
        kappa=args.kappa,
        levels_selected=_parse_names(getattr(args, "levels_selected", None)),
        level_weights=weights,
        sigma=args.sigma,
        eval_resolution=_parse_hw(args.eval_resolution),
        crop_to=_parse_hw(args.crop_to) if args.crop_to else None,
        retrieval_mode=args.retrieval_mode,
        random_seed=args.random_seed,
        fusion_mode=args.fusion_mode,
        search_backend=args.search_backend,
    )


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--K", type=int, default=50, help="image-level neighbor count")
    p.add_argument("--kappa", type=int, default=1, help="pixel-level neighbor count")
    p.add_argument("--levels-selected", dest="levels_selected", default=None,
                   help="comma-separated layer names (default: all taps)")
    p.add_argument("--level-weights", dest="level_weights", default=None,
                   help="comma-separated fusion weights (default: equal)")
    p.add_argument("--sigma", type=float, default=4.0, help="Gaussian smoothing sigma in eval pixels")
    p.add_argument("--eval-resolution", dest="eval_resolution", default="256,256")
    p.add_argument("--crop-to", dest="crop_to", default=None, help="optional center crop HxW")
    p.add_argument("--retrieval-mode", dest="retrieval_mode", choices=("knn", "random"), default="knn")
    p.add_argument("--random-seed", dest="random_seed", type=int, default=0)
    p.add_argument("--fusion-mode", dest="fusion_mode", choices=("average", "concat"), default="average")
    p.add_argument("--search-backend", dest="search_backend", choices=("exact", "kdtree"), default="exact")


def _index_dir(out: Path, class_name: str) -> Path:
    return out / class_name / "index"


def _score_dir(out: Path, class_name: str) -> Path:
    return out / class_name / "score"


def _extractor_spec(args: argparse.Namespace) -> ExtractorSpec:
    return ExtractorSpec(
        backend=args.backend,
        model_path=args.model_path,
        tap_names=_parse_names(args.tap_names) or (),
        pooled_name=args.pooled_name,
        archive_dir=getattr(args, "feature_archive", None),
    )


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _index_meta(args, config: PipelineConfig, spec: ExtractorSpec, n_images: int, dim: int) -> dict:
    meta = {
        "count": n_images,
        "dim": dim,
        "backend": spec.backend,
        "model_path": spec.model_path,
        "tap_names": list(spec.tap_names),
        "pooled_name": spec.pooled_name,
        "eval_resolution": list(config.eval_resolution),
        "crop_to": list(config.crop_to) if config.crop_to else None,
        "max_train": args.max_train,
        "train_seed": args.train_seed,
    }
    if spec.backend == "portable_model":
        meta["model_sha256"] = _sha256(Path(spec.model_path))
    return meta


def cmd_index(args: argparse.Namespace) -> int:
    out = Path(args.out)
    config = _pipeline_config(args)
    spec = _extractor_spec(args)
    for class_name in args.classes:
        manifest = scan_dataset(args.data, class_name)
        if not manifest.train_items:
            raise DatasetError(f"no training images under {Path(args.data) / class_name / 'train' / 'good'}")
        train_items = manifest.train_items
        if args.max_train:
            train_items = tuple(subsample(train_items, max_count=args.max_train, seed=args.train_seed))

        index_dir = _index_dir(out, class_name)
        features_dir = index_dir / "features"
        meta_path = index_dir / "index_meta.json"
        probe_meta = _index_meta(args, config, spec, len(train_items), -1)
        if meta_path.is_file() and not args.force:
            existing = json.loads(meta_path.read_text())
            if {k: v for k, v in existing.items() if k != "dim"} == {k: v for k, v in probe_meta.items() if k != "dim"}:
                _log(f"index {class_name}: cache hit ({existing['count']} images), skipping")
                continue
        index_dir.mkdir(parents=True, exist_ok=True)

        embeddings = []
        ids = []
        for item in train_items:
            image = preprocess(item.path, config, image_id=item.image_id)
            pyramid = extract(image, spec)
            archive.write_pyramid(features_dir, pyramid)
            embeddings.append(pyramid.global_embedding)
            ids.append(item.image_id)
        matrix = np.stack(embeddings).astype("<f4")
        (index_dir / "embeddings.f32").write_bytes(matrix.tobytes())
        (index_dir / "image_ids.json").write_text(json.dumps(ids, indent=1))
        meta = _index_meta(args, config, spec, len(ids), matrix.shape[1])
        meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
        _write_run_config(index_dir, args, ("data", "classes", "backend", "model_path", "tap_names",
                                            "pooled_name", "max_train", "train_seed", "force"), config)
        _log(f"index {class_name}: {len(ids)} images, dim {matrix.shape[1]}")
    return 0


def load_index(index_dir: str | Path) -> tuple[GalleryIndex, dict]:
    index_dir = Path(index_dir)
    meta_path = index_dir / "index_meta.json"
    if not meta_path.is_file():
        raise ArchiveError(f"no index at {index_dir}; run `spade index` first")
    meta = json.loads(meta_path.read_text())
    raw = np.frombuffer((index_dir / "embeddings.f32").read_bytes(), dtype="<f4")
    embeddings = raw.reshape(meta["count"], meta["dim"])
    ids = json.loads((index_dir / "image_ids.json").read_text())
    store = ArchivePyramidStore(index_dir / "features")
    return GalleryIndex(embeddings, ids, store), meta


def _spec_from_meta(meta: dict) -> ExtractorSpec:
    return ExtractorSpec(
        backend=meta["backend"],
        model_path=meta["model_path"],
        tap_names=tuple(meta["tap_names"]),
        pooled_name=meta["pooled_name"],
    )


def cmd_score(args: argparse.Namespace) -> int:
    out = Path(args.out)
    config = _pipeline_config(args)
    for class_name in args.classes:
        index, meta = load_index(args.index or _index_dir(out, class_name))
        spec = _spec_from_meta(meta)
        manifest = scan_dataset(args.data, class_name)
        test_items = list(manifest.test_items)
        if args.test_stride:
            test_items = subsample(test_items, stride=args.test_stride)

        score_dir = _score_dir(out, class_name)
        (score_dir / "maps").mkdir(parents=True, exist_ok=True)

        def one(item):
            image = preprocess(item.path, config, image_id=item.image_id)
            pyramid = extract(image, spec)
            seed = per_image_seed(config.random_seed, item.image_id)
            return score_image(pyramid, index, config, seed=seed)

        if args.workers > 1:
            with ThreadPoolExecutor(max_workers=args.workers) as pool:
                maps = list(pool.map(one, test_items))
        else:
            maps = [one(item) for item in test_items]

        rows = []
        for item, amap in zip(test_items, maps):
            archive.save_anomaly_map(score_dir / "maps" / amap.image_id, amap)
            export_heatmap(score_dir / "heatmaps", amap)
            rows.append((item.image_id, item.defect_type, repr(amap.image_score)))
        with open(score_dir / "scores.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "defect_type", "image_score"])
            writer.writerows(rows)
        DatasetManifest(class_name, (), tuple(test_items)).save_json(score_dir / "manifest.json")
        _write_run_config(score_dir, args, ("data", "classes", "index", "workers", "test_stride"), config)
        _log(f"score {class_name}: {len(test_items)} images scored")
    return 0


def _load_scored(score_dir: Path, eval_resolution: tuple[int, int]):
    manifest = DatasetManifest.load_json(score_dir / "manifest.json")
    maps, masks, labels = [], [], []
    for item in manifest.test_items:
        amap = archive.load_anomaly_map(score_dir / "maps" / item.image_id)
        maps.append(amap)
        if item.mask_path:
            masks.append(load_mask(item.mask_path, eval_resolution, image_id=item.image_id))
        else:
            masks.append(empty_mask(item.image_id, eval_resolution))
        labels.append(1 if item.is_anomalous else 0)
    return maps, masks, labels


def cmd_eval(args: argparse.Namespace) -> int:
    out = Path(args.out)
    summary_rows = []
    for class_name in args.classes:
        score_dir = Path(args.scores) if args.scores else _score_dir(out, class_name)
        run_cfg = json.loads((score_dir / "run_config.json").read_text())
        eval_resolution = tuple(run_cfg["pipeline"]["eval_resolution"])
        maps, masks, labels = _load_scored(score_dir, eval_resolution)
        report = evaluate(maps, masks, labels, fpr_limit=args.fpr_limit)
        eval_dir = out / class_name / "eval"
        eval_dir.mkdir(parents=True, exist_ok=True)
        report.save_json(eval_dir / "report.json")
        report.save_sweep_csv(eval_dir / "sweep.csv")
        summary_rows.append((class_name, report.image_rocauc, report.pixel_rocauc, report.pro_score))
        _log(
            f"eval {class_name}: image_rocauc={report.image_rocauc:.4f} "
            f"pixel_rocauc={report.pixel_rocauc:.4f} pro={report.pro_score:.4f}"
        )
    if summary_rows:
        means = [float(np.mean([r[i] for r in summary_rows])) for i in (1, 2, 3)]
        with open(out / "eval_summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "image_rocauc", "pixel_rocauc", "pro_score"])
            writer.writerows(summary_rows)
            writer.writerow(["average", *means])
        _log(f"eval average: image={means[0]:.4f} pixel={means[1]:.4f} pro={means[2]:.4f}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    level_sets = [s for s in (args.level_sets or "").split(";") if s] or [None]
    modes = [m for m in args.retrieval_modes.split(",") if m]
    summary = []
    for class_name in args.classes:
        index, meta = load_index(args.index or _index_dir(out, class_name))
        spec = _spec_from_meta(meta)
        manifest = scan_dataset(args.data, class_name)
        base = _pipeline_config(args)
        for level_set in level_sets:
            for mode in modes:
                levels = _parse_names(level_set)
                tag_levels = "-".join(levels) if levels else "all"
                tag = f"levels_{tag_levels}__{mode}"
                cfg_fields = base.to_dict()
                cfg_fields["levels_selected"] = list(levels) if levels else None
                cfg_fields["level_weights"] = None
                cfg_fields["retrieval_mode"] = mode
                config = PipelineConfig.from_dict(cfg_fields)
                maps, masks, labels = [], [], []
                for item in manifest.test_items:
                    image = preprocess(item.path, config, image_id=item.image_id)
                    pyramid = extract(image, spec)
                    seed = per_image_seed(config.random_seed, item.image_id)
                    maps.append(score_image(pyramid, index, config, seed=seed))
                    if item.mask_path:
                        masks.append(load_mask(item.mask_path, config.eval_resolution, image_id=item.image_id))
                    else:
                        masks.append(empty_mask(item.image_id, config.eval_resolution))
                    labels.append(1 if item.is_anomalous else 0)
                report = evaluate(maps, masks, labels, fpr_limit=args.fpr_limit)
                variant_dir = out / class_name / "ablate" / tag
                variant_dir.mkdir(parents=True, exist_ok=True)
                report.save_json(variant_dir / "report.json")
                summary.append((class_name, tag_levels, mode, report.image_rocauc,
                                report.pixel_rocauc, report.pro_score))
                _log(f"ablate {class_name} {tag}: pixel={report.pixel_rocauc:.4f} pro={report.pro_score:.4f}")
    with open(out / "ablate_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "levels", "retrieval_mode", "image_rocauc", "pixel_rocauc", "pro_score"])
        writer.writerows(summary)
    return 0


def _write_run_config(dest_dir: Path, args: argparse.Namespace, keys: Sequence[str], config: PipelineConfig) -> None:
    payload = {"command": args.command, "pipeline": config.to_dict()}
    for key in keys:
        payload[key] = getattr(args, key, None)
    (dest_dir / "run_config.json").write_text(json.dumps(payload, indent=1, sort_keys=True))


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """--config FILE preloads a previously emitted run_config.json as flag
    defaults; explicit flags still win. Unknown keys are rejected."""
    path = None
    rest = list(argv)
    for i, token in enumerate(argv):
        if token == "--config":
            path = Path(argv[i + 1])
            rest = argv[:i] + argv[i + 2 :]
            break
        if token.startswith("--config="):
            path = Path(token.split("=", 1)[1])
            rest = argv[:i] + argv[i + 1 :]
            break
    if path is None:
        return rest
    payload = json.loads(path.read_text())
    pipeline = payload.pop("pipeline", {})
    payload.pop("command", None)
    known = _known_dests(parser)
    defaults = {}
    for key, value in {**payload, **pipeline}.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in config file {path}")
        if value is None:
            continue
        if key in ("levels_selected", "tap_names", "level_weights", "eval_resolution", "crop_to"):
            if not isinstance(value, str):
                value = ",".join(str(v) for v in value)
        defaults[key] = value
    # Subparsers parse into a fresh namespace, so defaults must land on each
    # subparser (filtered to the flags it actually declares), not just here.
    for target in _all_parsers(parser):
        dests = {a.dest for a in target._actions}
        target.set_defaults(**{k: v for k, v in defaults.items() if k in dests})
    return rest


def _all_parsers(parser: argparse.ArgumentParser) -> list[argparse.ArgumentParser]:
    parsers = [parser]
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            parsers.extend(dict.fromkeys(action.choices.values()))
    return parsers


def _known_dests(parser: argparse.ArgumentParser) -> set[str]:
    dests = set()
    for target in _all_parsers(parser):
        dests.update(a.dest for a in target._actions)
    return dests


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spade", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", required=True, help="dataset root directory")
    common.add_argument("--classes", required=True, type=lambda s: [c for c in s.split(",") if c],
                        help="comma-separated class names")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="load a previously emitted run_config.json as defaults")

    p_index = sub.add_parser("index", parents=[common], help="build feature archive + embedding index")
    p_index.add_argument("--backend", choices=("toy", "portable_model", "precomputed"), default="toy")
    p_index.add_argument("--model-path", dest="model_path", default=None)
    p_index.add_argument("--tap-names", dest="tap_names", default=None)
    p_index.add_argument("--pooled-name", dest="pooled_name", default=None)
    p_index.add_argument("--feature-archive", dest="feature_archive", default=None,
                         help="source archive for the precomputed backend")
    p_index.add_argument("--max-train", dest="max_train", type=int, default=None)
    p_index.add_argument("--train-seed", dest="train_seed", type=int, default=0)
    p_index.add_argument("--force", action="store_true", help="rebuild even on cache hit")
    _add_pipeline_flags(p_index)
    p_index.set_defaults(func=cmd_index)

    p_score = sub.add_parser("score", parents=[common], help="score a test set against an index")
    p_score.add_argument("--index", default=None, help="index directory (default: <out>/<class>/index)")
    p_score.add_argument("--workers", type=int, default=1)
    p_score.add_argument("--test-stride", dest="test_stride", type=int, default=None)
    _add_pipeline_flags(p_score)
    p_score.set_defaults(func=cmd_score)

    p_eval = sub.add_parser("eval", parents=[common], help="compute ROCAUC/PRO reports from scores")
    p_eval.add_argument("--scores", default=None, help="score directory (default: <out>/<class>/score)")
    p_eval.add_argument("--fpr-limit", dest="fpr_limit", type=float, default=0.3)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", parents=[common], help="score+eval per configuration variant")
    p_ablate.add_argument("--index", default=None)
    p_ablate.add_argument("--level-sets", dest="level_sets", default=None,
                          help="semicolon-separated comma-lists of layer names")
    p_ablate.add_argument("--retrieval-modes", dest="retrieval_modes", default="knn")
    p_ablate.add_argument("--fpr-limit", dest="fpr_limit", type=float, default=0.3)
    _add_pipeline_flags(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SpadeError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
