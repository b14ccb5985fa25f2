"""
Command-line entry point: data generation, training, evaluation, prediction,
gradient verification and the adaptation benchmark.

    python app.py gen-data --out data --n-source 20 --n-target 20 --seed 0
    python app.py train --config train.ini --out runs/se_fd
    python app.py eval --checkpoint runs/se_fd/checkpoints/final.pt --data data/test --out runs/se_fd/eval
    python app.py predict --checkpoint runs/se_fd/checkpoints/final.pt --image scene.png --out pred
    python app.py gradcheck --arch tiny --seed 0
"""
import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from config import (ArchConfig, Config, EvalConfig, TrainConfig, apply_overrides, load_eval_config,
                    load_train_config)
from exceptions import (ConfigurationError, CrowdAdaptError, FileProcessingError, format_error_response,
                        get_exit_code)
from services.benchmark_service import MODE_FLAGS, default_benchmark_config, generate_benchmark, run_benchmark
from services.data_service import (DENSITY_LEVELS, AttributePredicate, CrowdImage, DatasetKind, load_dataset,
                                   save_dataset, scene_regularization_filter)
from services.density_service import count_from_density, save_density_map
from services.evaluation_service import evaluate, predict_full_image
from services.gradient_checker import run_gradient_suite
from services.report_service import density_to_png, write_gradcheck_report, write_metrics_report
from services.scene_generator import generate_datasets
from services.training_service import model_from_checkpoint, train
from utils import is_writable_dir, read_json

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


@dataclass
class CommandResult:
    exit_code: int = 0
    artifacts_written: List[Path] = field(default_factory=list)


def _finish(paths: Sequence[Path]) -> CommandResult:
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        logger.error(f"Declared artefacts missing: {missing}")
        return CommandResult(1, list(paths))
    return CommandResult(0, [Path(p) for p in paths])


def _require_writable(path: Path) -> None:
    if not is_writable_dir(path):
        raise FileProcessingError(f"Output directory is not writable: {path}", filename=str(path))


# gen-data -----------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> CommandResult:
    out = Path(args.out)
    _require_writable(out)
    levels = tuple(v.strip() for v in args.levels.split(",") if v.strip())
    splits = generate_datasets(args.n_source, args.n_target, args.seed, n_test=args.n_test,
                               height=args.height, width=args.width, levels=levels,
                               brightness_range=(args.brightness_min, args.brightness_max))
    if args.n_source == 0:
        logger.warning("Source split is empty (--n-source 0)")
    written: List[Path] = []
    for name, dataset in splits.items():
        written += save_dataset(dataset, out / name)
    return _finish(written)


# train -------------------------------------------------------------------------------

TRAIN_OVERRIDES = {
    "iters": "iters", "seed": "seed", "batch_size": "batch_size", "lr_main": "lr_main",
    "lr_disc": "lr_disc", "checkpoint_every": "checkpoint_every", "log_every": "log_every",
    "num_workers": "num_workers", "sigma": "sigma", "dtype": "dtype",
    "lambda_s": "weights.lambda_s", "lambda_t": "weights.lambda_t", "lambda_d": "weights.lambda_d",
}


def _parse_crop(text: str) -> tuple:
    try:
        parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p.strip()]
    except ValueError:
        raise ConfigurationError(f"Invalid crop {text!r}", config_key="crop", value=text)
    if len(parts) != 2:
        raise ConfigurationError(f"Crop needs two dims, got {text!r}", config_key="crop", value=text)
    return tuple(parts)


def build_train_config(args: argparse.Namespace) -> tuple:
    """Merge the config file (if any) with command-line overrides."""
    if args.config:
        cfg, data_paths = load_train_config(args.config)
    else:
        cfg, data_paths = TrainConfig().validate(), {}
    overrides: Dict[str, object] = {key: getattr(args, attr) for attr, key in TRAIN_OVERRIDES.items()}
    if args.crop:
        overrides["crop"] = _parse_crop(args.crop)
    if args.no_adapt:
        overrides["adapt_enabled"] = False
    if args.no_discriminator:
        overrides["use_discriminator"] = False
    if args.arch:
        overrides.update({f"arch.{k}": v for k, v in _load_arch(args.arch).to_dict().items()})
    cfg = apply_overrides(cfg, overrides)
    for key in ("source", "target", "out"):
        value = getattr(args, key, None)
        if value:
            data_paths[key] = value
    return cfg, data_paths


def cmd_train(args: argparse.Namespace) -> CommandResult:
    cfg, paths = build_train_config(args)
    if "source" not in paths:
        raise ConfigurationError("No source dataset given (--source or [data] source)", config_key="data.source")
    if cfg.adapt_enabled and "target" not in paths:
        raise ConfigurationError("No target dataset given (--target or [data] target)", config_key="data.target")
    out = Path(paths.get("out") or args.out or "runs")
    _require_writable(out)

    source = load_dataset(paths["source"], DatasetKind.SOURCE)
    for expression in args.scene_filter or []:
        source = scene_regularization_filter(source, AttributePredicate.parse(expression))
    target = load_dataset(paths["target"], DatasetKind.TARGET) if cfg.adapt_enabled else None

    result = train(cfg, source, target, out, resume=args.resume, pretrained_path=args.pretrained)
    return _finish([result.checkpoint_path, result.log_path] + result.checkpoints)


# eval / predict ---------------------------------------------------------------------

EVAL_OVERRIDES = ("sigma", "tile_cap", "num_workers", "n_figures")


def build_eval_config(args: argparse.Namespace) -> tuple:
    """Merge the [eval] and [data] sections of the config file (if any) with command-line flags."""
    if args.config:
        cfg, data_paths = load_eval_config(args.config)
    else:
        cfg, data_paths = EvalConfig(), {}
    overrides = {key: getattr(args, key, None) for key in EVAL_OVERRIDES}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None}).validate()
    return cfg, data_paths


def _path_from(args: argparse.Namespace, paths: Dict[str, str], flag: str, key: str) -> str:
    value = getattr(args, flag, None) or paths.get(key)
    if not value:
        raise ConfigurationError(f"No {key} path given (--{flag} or [data] {key})", config_key=f"data.{key}")
    return value


def cmd_eval(args: argparse.Namespace) -> CommandResult:
    eval_cfg, paths = build_eval_config(args)
    data = _path_from(args, paths, "data", "test")
    out = Path(_path_from(args, paths, "out", "out"))
    _require_writable(out)
    model, meta = model_from_checkpoint(args.checkpoint)
    dataset = load_dataset(data, args.kind)
    report = evaluate(model, dataset, eval_cfg, out_dir=out)
    written = write_metrics_report(report, out, extra={
        "checkpoint": str(args.checkpoint),
        "iteration": int(meta.get("iteration", 0)),
        "mode": meta.get("mode"),
        "dataset": str(data),
    })
    return _finish(written)


def _read_image(path: str) -> CrowdImage:
    try:
        with Image.open(path) as img:
            return CrowdImage.from_uint8(np.asarray(img.convert("RGB")))
    except (OSError, ValueError) as e:
        raise FileProcessingError(f"Cannot read image {path}: {e}", filename=path)


def cmd_predict(args: argparse.Namespace) -> CommandResult:
    eval_cfg, paths = build_eval_config(args)
    out = Path(_path_from(args, paths, "out", "out"))
    model, _ = model_from_checkpoint(args.checkpoint)
    image = _read_image(args.image)
    density = predict_full_image(model, image.pixels, eval_cfg.tile_cap)
    count = count_from_density(density)

    if out.suffix.lower() == ".png":
        png_path = out
    else:
        png_path = out / f"{Path(args.image).stem}_density.png"
    _require_writable(png_path.parent)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    written = [density_to_png(density, png_path), save_density_map(density, png_path.with_suffix(".dmap"))]
    print(f"{count:.6f}")
    logger.info(f"Predicted count {count:.4f} for {args.image}")
    return _finish(written)


# gradcheck --------------------------------------------------------------------------

def _load_arch(name: str) -> ArchConfig:
    if name == "tiny":
        return ArchConfig.tiny()
    if name == "desk":
        return ArchConfig()
    if name == "vgg16":
        return ArchConfig.vgg16()
    return ArchConfig.from_dict(read_json(name)).validate()


def cmd_gradcheck(args: argparse.Namespace) -> CommandResult:
    arch, seed = ArchConfig.tiny(), 0
    if args.config:
        cfg, _ = load_train_config(args.config)
        arch, seed = cfg.arch, cfg.seed
    if args.arch:
        arch = _load_arch(args.arch)
    if args.seed is not None:
        seed = args.seed
    results = run_gradient_suite(arch, seed=seed, n_coords=args.n_coords)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{r.name:<22} {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    written = [write_gradcheck_report(results, args.out)] if args.out else []
    if failed:
        logger.error(f"Gradient check failed for: {', '.join(r.name for r in failed)}")
        return CommandResult(get_exit_code("NUMERIC_ERROR"), written)
    return _finish(written)


# benchmark --------------------------------------------------------------------------

def cmd_benchmark(args: argparse.Namespace) -> CommandResult:
    data = Path(args.data)
    out = Path(args.out)
    _require_writable(out)
    if not (data / "source").is_dir():
        logger.info(f"Generating benchmark data under {data}")
        generate_benchmark(data, args.n_source, args.n_target, args.n_test, seed=args.data_seed)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    unknown = [m for m in modes if m not in MODE_FLAGS]
    if unknown:
        raise ConfigurationError(f"Unknown mode(s) {unknown}", config_key="modes", value=unknown)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    base = default_benchmark_config(args.iters)
    if args.batch_size:
        base = replace(base, batch_size=args.batch_size).validate()
    result = run_benchmark(data, out, modes=modes, seeds=seeds, base_cfg=base)
    print(result.summary.to_string(index=False))
    if result.adapted_wins is not None:
        print(f"SE+FD < NoAdpt MAE in {result.adapted_wins}/{result.n_seeds} seeds")
    return _finish([out / "benchmark.csv", out / "benchmark.json"])


# parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowd-adapt",
                                     description="Semantic-consistency domain adaptation for crowd counting")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate paired synthetic source/target datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-source", type=int, default=20)
    p.add_argument("--n-target", type=int, default=20)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--height", type=int, default=Config.DEFAULT_SCENE_SIZE[0])
    p.add_argument("--width", type=int, default=Config.DEFAULT_SCENE_SIZE[1])
    p.add_argument("--levels", default=",".join(DENSITY_LEVELS), help="density levels to sample")
    p.add_argument("--brightness-min", type=float, default=0.3)
    p.add_argument("--brightness-max", type=float, default=0.8)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train the four sub-networks")
    p.add_argument("--config")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-main", type=float)
    p.add_argument("--lr-disc", type=float)
    p.add_argument("--lambda-s", type=float)
    p.add_argument("--lambda-t", type=float)
    p.add_argument("--lambda-d", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--crop", help="HxW, e.g. 128x128")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--num-workers", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--arch", help="tiny, desk, vgg16 or a JSON file")
    p.add_argument("--no-adapt", action="store_true", help="NoAdpt baseline: density loss only")
    p.add_argument("--no-discriminator", action="store_true", help="segmentation losses without D")
    p.add_argument("--scene-filter", action="append", help="e.g. 'brightness > 0.5' (repeatable)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--pretrained", help="named-tensor file with extractor weights")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset with held-out heads")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="[eval] settings and [data] test/out paths")
    p.add_argument("--data", help="dataset directory (default: [data] test)")
    p.add_argument("--kind", choices=[k.value for k in DatasetKind], default="target")
    p.add_argument("--out", help="output directory (default: [data] out)")
    p.add_argument("--sigma", type=float)
    p.add_argument("--tile-cap", type=int)
    p.add_argument("--num-workers", type=int)
    p.add_argument("--n-figures", type=int)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", help="predict a density map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--config", help="[eval] settings and [data] out path")
    p.add_argument("--out", help="PNG path or output directory (default: [data] out)")
    p.add_argument("--tile-cap", type=int)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", help="training config whose [arch] and seed are checked")
    p.add_argument("--arch", help="tiny (default), desk, vgg16 or a JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-coords", type=int, default=12)
    p.add_argument("--out", help="directory for gradcheck.csv")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("benchmark", help="NoAdpt vs adapted training on the synthetic benchmark")
    p.add_argument("--data", required=True, help="benchmark root (generated if missing)")
    p.add_argument("--out", required=True)
    p.add_argument("--modes", default="NoAdpt,SE+FD")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-source", type=int, default=40)
    p.add_argument("--n-target", type=int, default=40)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--data-seed", type=int, default=0)
    p.set_defaults(handler=cmd_benchmark)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger().setLevel(level)

    try:
        result = args.handler(args)
    except CrowdAdaptError as e:
        response = format_error_response(e, include_details=True)
        logger.error(f"{args.command} failed: {e.message} ({e.error_code})")
        print(f"error: {response['message']} {response['technical_message']}", file=sys.stderr)
        return response["exit_code"]
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {e}")
        return 1
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
