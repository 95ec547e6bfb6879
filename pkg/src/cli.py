"""
Command-line surface: generate-data, train, eval, reconstruct, decompose, dump-attention
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from src.config import MANIFEST_NAME, REPORT_NAME, RunConfig
from src.dataset import SyntheticDataset, build_dataset, manifest_path, read_pgm
from src.errors import ConfigError, DataIOError, LegoFormerError, RangeError
from src.interpret import (export_attention, part_analysis, patch_attention_maps, save_parts,
                           view_attention_share)
from src.metrics import evaluate_sweep, sweep_frame, voxel_iou, write_report
from src.model import LegoFormer, load_checkpoint
from src.profiler import profiler
from src.trainer import train
from src.voxels import compose_factors, cp_fit_oracle, load_voxels, save_voxels, threshold

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
VARIANT_NAMES = {"m": "multi-view", "s": "single-view", "multi-view": "multi-view", "single-view": "single-view"}


def _view_counts(text: str) -> str:
    try:
        counts = [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if not counts:
        raise argparse.ArgumentTypeError("expected at least one view count")
    return ",".join(str(c) for c in counts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (section.key=value per line)")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single-threaded, timing-free outputs")
    common.add_argument("--threads", type=int, help="worker threads for data building and evaluation")
    common.add_argument("--log-level", default="INFO", help="logging level (default INFO)")

    parser = argparse.ArgumentParser(prog="legoformer", description="Desk-scale LegoFormer reconstruction")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("generate-data", parents=[common], help="build a synthetic dataset")
    gen.add_argument("--objects", type=int, dest="data.object_count")
    gen.add_argument("--grid", type=int, dest="data.grid_side")
    gen.add_argument("--views", type=int, dest="data.views_per_object")
    gen.add_argument("--image", type=int, dest="data.image_side")
    gen.add_argument("--elevation", type=float, dest="data.elevation_deg")
    gen.add_argument("--mode", choices=("silhouette", "depth"), dest="data.render_mode")
    gen.add_argument("--split", type=float, dest="data.split_fraction", help="train fraction")
    gen.add_argument("--archetypes", dest="data.archetypes", help="comma-separated archetype names")

    tr = commands.add_parser("train", parents=[common], help="train a model on a dataset")
    tr.add_argument("--data", dest="run.data", help="dataset directory or manifest")
    tr.add_argument("--variant", choices=sorted(VARIANT_NAMES), dest="model.variant")
    tr.add_argument("--scheme", choices=("factors", "naive", "naive-nar", "naive-full"), dest="model.scheme")
    tr.add_argument("--queries", type=int, dest="model.n_queries")
    tr.add_argument("--d-model", type=int, dest="model.d_model")
    tr.add_argument("--layers", type=int, dest="model.n_layers")
    tr.add_argument("--heads", type=int, dest="model.n_heads")
    tr.add_argument("--share-weights", action="store_true", default=None, dest="model.share_layer_weights")
    tr.add_argument("--steps", type=int, dest="train.total_steps")
    tr.add_argument("--batch", type=int, dest="train.batch_size")
    tr.add_argument("--lr", type=float, dest="train.base_lr")
    tr.add_argument("--warmup", type=int, dest="train.warmup_steps")
    tr.add_argument("--optimizer", choices=("adagrad", "sgd"), dest="train.optimizer")
    tr.add_argument("--view-policy", choices=("fixed", "uniform"), dest="train.view_policy")
    tr.add_argument("--train-views", type=int, dest="train.train_views")
    tr.add_argument("--checkpoint-interval", type=int, dest="train.checkpoint_interval")
    tr.add_argument("--eval-interval", type=int, dest="train.eval_interval")
    tr.add_argument("--resume", help="checkpoint to continue from")

    ev = commands.add_parser("eval", parents=[common], help="view-count evaluation sweep")
    ev.add_argument("--checkpoint", dest="run.checkpoint")
    ev.add_argument("--data", dest="run.data")
    ev.add_argument("--views", type=_view_counts, dest="eval.view_counts", help="e.g. 1,2,4,8")
    ev.add_argument("--split", choices=("train", "test"), dest="eval.split")
    ev.add_argument("--threshold", type=float, dest="eval.threshold")
    ev.add_argument("--fscore-distance", type=float, dest="eval.fscore_distance")

    rec = commands.add_parser("reconstruct", parents=[common], help="reconstruct one object from images")
    rec.add_argument("images", nargs="+", help="PGM view images")
    rec.add_argument("--checkpoint", dest="run.checkpoint")
    rec.add_argument("--threshold", type=float, dest="eval.threshold")
    rec.add_argument("--parts", action="store_true", help="write per-query part grids")
    rec.add_argument("--attention", action="store_true", help="write the attention export")

    dec = commands.add_parser("decompose", parents=[common], help="fit k rank-1 factors to a voxel file")
    dec.add_argument("voxels", help="binary VOXG file")
    dec.add_argument("--k", type=int, required=True)
    dec.add_argument("--iterations", type=int, default=2000)
    dec.add_argument("--restarts", type=int, default=4)

    att = commands.add_parser("dump-attention", parents=[common], help="export attention for one object")
    att.add_argument("--checkpoint", dest="run.checkpoint")
    att.add_argument("--data", dest="run.data")
    att.add_argument("--object", help="object id (default: first object of the eval split)")
    att.add_argument("--views", type=int, default=None, help="number of views (default: all)")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    values: Dict[str, object] = {
        "run.seed": args.seed,
        "run.out": args.out,
        "run.deterministic": args.deterministic,
        "run.threads": args.threads,
    }
    for key, value in vars(args).items():
        if "." in key and value is not None:
            values[key] = VARIANT_NAMES[value] if key == "model.variant" else value
    return values


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config, _overrides(args))
    if config.run.deterministic and config.run.threads != 1:
        config = replace(config, run=replace(config.run, threads=1))
    if config.run.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {config.run.threads}")
    return config


def _commit(config: RunConfig) -> Path:
    """Echo the effective configuration and write it next to the outputs"""
    print("⚙️  effective configuration")
    print(config.dump(), end="")
    return config.write(config.run.out)


def _write_json(target: Path, payload, indent: Optional[int] = None) -> Path:
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(payload, indent=indent) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {target.name} ({exc.strerror})", target) from exc
    return target


def _require(value: str, flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


# -- commands ------------------------------------------------------------------------------------

def cmd_generate_data(args: argparse.Namespace) -> int:
    config = _load_config(args)
    _commit(config)
    manifest = build_dataset(config.data, config.run.out, threads=config.run.threads)
    counts = {split: len(manifest.ids(split)) for split in ("train", "test")}
    print(f"✅ {Path(config.run.out) / MANIFEST_NAME}: {len(manifest.objects)} objects "
          f"({counts['train']} train / {counts['test']} test)")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    if config.model.variant == "single-view":
        if config.train.train_views > 1 and getattr(args, "train.train_views") is not None:
            raise ConfigError("the single-view variant trains with 1 view, got "
                              f"--train-views {config.train.train_views}")
        if config.train.view_policy != "fixed":
            raise ConfigError("the single-view variant needs the fixed view policy")
        config = replace(config, train=replace(config.train, train_views=1).validate())
    dataset = SyntheticDataset.load(_require(config.run.data, "--data"))
    config = config.with_model(grid_side=dataset.grid_side, image_side=dataset.objects[0].views.shape[-1])
    _commit(config)

    # a resumed run replaces these weights with the checkpoint's
    model = LegoFormer.initialize(config.model, seed=config.run.seed)
    logger.info("model has %d parameters", model.parameter_count())
    result = train(model, dataset, config.train, config.run.out, resume=args.resume,
                   eval_objects=dataset.split("test") or None)
    profiler.log_summary()
    final_loss = result.losses["loss"].iloc[-1] if len(result.losses) else float("nan")
    print(f"✅ checkpoint {result.checkpoint} (final loss {final_loss:.6f})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    _commit(config)
    checkpoint = _require(config.run.checkpoint, "--checkpoint")
    model, _ = load_checkpoint(checkpoint)
    dataset = SyntheticDataset.load(_require(config.run.data, "--data"))
    report = evaluate_sweep(model, dataset, config.eval, checkpoint=checkpoint,
                            threads=config.run.threads, timing=not config.run.deterministic)
    target = write_report(Path(config.run.out) / REPORT_NAME, report)
    print("📊 evaluation sweep")
    print(sweep_frame(report).to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"✅ report written to {target}")
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    config = _load_config(args)
    _commit(config)
    model, _ = load_checkpoint(_require(config.run.checkpoint, "--checkpoint"))
    views = np.stack([read_pgm(path) for path in args.images])
    out = Path(config.run.out)
    result = model.reconstruct(views, capture=args.attention)
    grid = threshold(result.grid.data[0], config.eval.threshold)
    target = save_voxels(out / "reconstruction.voxg", grid, binary=True)
    print(f"✅ {target}: {int(grid.sum())} occupied voxels")
    if args.parts:
        written = save_parts(part_analysis(model, views, config.eval.threshold), out)
        print(f"✅ {len(written) // 2} part grids in {out / 'parts'}")
    if args.attention:
        print(f"✅ attention written to {export_attention(result.attention, out / 'attention.json')}")
    return 0


def cmd_decompose(args: argparse.Namespace) -> int:
    config = _load_config(args)
    if args.k < 1:
        raise ConfigError(f"--k must be >= 1, got {args.k}")
    _commit(config)
    grid = (load_voxels(args.voxels) != 0).astype(np.uint8)
    factors = cp_fit_oracle(grid, args.k, iterations=args.iterations, seed=config.run.seed,
                            restarts=args.restarts, tau=config.eval.threshold)
    iou = voxel_iou(threshold(compose_factors(factors), config.eval.threshold), grid)
    z, y, x = factors.numpy()
    payload = {"k": factors.k, "grid_side": factors.side, "iou": iou,
               "z": z.tolist(), "y": y.tolist(), "x": x.tolist()}
    target = _write_json(Path(config.run.out) / "factors.json", payload, indent=2)
    print(f"✅ {target}: k={factors.k}, IoU {iou:.4f}")
    return 0


def cmd_dump_attention(args: argparse.Namespace) -> int:
    config = _load_config(args)
    _commit(config)
    model, _ = load_checkpoint(_require(config.run.checkpoint, "--checkpoint"))
    dataset = SyntheticDataset.load(_require(config.run.data, "--data"))
    pool = dataset.split(config.eval.split) or dataset.objects
    if args.object:
        matches = [o for o in dataset.objects if o.id == args.object]
        if not matches:
            raise ConfigError(f"unknown object id {args.object!r} in {manifest_path(config.run.data)}")
        obj = matches[0]
    else:
        obj = pool[0]
    if args.views is not None and not 1 <= args.views <= len(obj.views):
        raise RangeError(f"--views must lie in 1..{len(obj.views)} for {obj.id}, got {args.views}")
    count = 1 if model.config.variant == "single-view" else (args.views or len(obj.views))
    result = model.reconstruct(obj.views[:count], capture=True)
    out = Path(config.run.out)
    print(f"✅ attention for {obj.id} written to {export_attention(result.attention, out / 'attention.json')}")
    if model.config.variant == "multi-view":
        share = view_attention_share(result.attention)
        print("📊 decoder-encoder attention per view: " + ", ".join(f"{w:.3f}" for w in share))
    else:
        maps = patch_attention_maps(result.attention, model.config.patch_grid_side)
        target = _write_json(out / "attention_maps.json", maps.tolist())
        print(f"✅ {len(maps)} query attention maps written to {target}")
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "decompose": cmd_decompose,
    "dump-attention": cmd_dump_attention,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format=LOG_FORMAT, stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except LegoFormerError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return exc.exit_code
