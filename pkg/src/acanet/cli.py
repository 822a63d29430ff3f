"""
Command-line entry point.

    acanet make-fixtures --n 20 --size 128 --seed 7 --output-dir fixtures/
    acanet train --train-manifest fixtures/train.json --val-manifest fixtures/val.json \
        --window-size 128 --base-channels 16 --output-dir runs/mini
    acanet evaluate --checkpoint runs/mini/best_epoch012_miou0.9100.pt --manifest fixtures/test.json
    acanet predict --checkpoint ... --image photo.png [--bbox x0,y0,x1,y1 | --mask gt.png]

Settings resolve as defaults < ``--config`` YAML file < flags. Every command
writes its effective configuration to ``effective_config.yaml`` in the output
directory, which defaults to ``$ACANET_OUTPUT_ROOT/<command>`` (or
``runs/<command>``).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from . import data
from .errors import AcanetError, ConfigError, LoadError
from .metrics import format_report, report_to_json
from .model import ModelConfig, build_model, load_checkpoint, predict_segmentation
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger("acanet")

OUTPUT_ROOT_ENV = "ACANET_OUTPUT_ROOT"
# graspable green, contain red, arm blue; background stays transparent
OVERLAY_COLORS = {1: (0, 255, 0), 2: (255, 0, 0), 3: (0, 0, 255)}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: data.AugmentationConfig = field(default_factory=data.AugmentationConfig)
    augment: bool = True
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "augmentation": dataclasses.asdict(self.augmentation),
            "augment": self.augment,
            "paths": {k: str(v) for k, v in self.paths.items() if v is not None},
        }


def _known(cls, section: dict, where: str) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return section


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a mapping")
    extra = set(doc) - {"model", "train", "augmentation", "augment", "paths"}
    if extra:
        raise ConfigError(f"unknown sections in {path}: {sorted(extra)}")
    return doc


def flag_overrides(args) -> dict:
    """Sections of config values given explicitly on the command line."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    model = {"variant": get("variant"), "input_size": get("window_size"), "decoder_base_channels": get("base_channels")}
    train_ = {"seed": get("seed"), "batch_size": get("batch_size"), "lr_initial": get("lr"), "max_epochs": get("max_epochs")}
    paths = {
        k: get(k)
        for k in ("train_manifest", "val_manifest", "manifest", "checkpoint", "output_dir", "image", "mask")
    }
    out = {
        "model": {k: v for k, v in model.items() if v is not None},
        "train": {k: v for k, v in train_.items() if v is not None},
        "paths": {k: v for k, v in paths.items() if v is not None},
    }
    if get("no_augment"):
        out["augment"] = False
    return out


def _merge(base: dict, over: dict) -> dict:
    merged = dict(base)
    for k, v in over.items():
        merged[k] = _merge(merged.get(k, {}), v) if isinstance(v, dict) and isinstance(merged.get(k), dict) else v
    return merged


def resolve_run_config(args) -> tuple[RunConfig, dict]:
    """Returns the effective config and the explicitly-set (file + flag) values."""
    explicit = read_config_file(args.config) if getattr(args, "config", None) else {}
    explicit = _merge(explicit, flag_overrides(args))
    model = dict(explicit.get("model", {}))
    if "fusion_channels" not in model:
        model["fusion_channels"] = None
    train_ = dict(explicit.get("train", {}))
    aug = dict(explicit.get("augmentation", {}))
    aug.setdefault("seed", train_.get("seed", 0))
    cfg = RunConfig(
        ModelConfig(**_known(ModelConfig, model, "model")),
        TrainConfig(**_known(TrainConfig, train_, "train")),
        data.AugmentationConfig(**_known(data.AugmentationConfig, aug, "augmentation")),
        bool(explicit.get("augment", True)),
        dict(explicit.get("paths", {})),
    )
    return cfg, explicit


def output_dir_for(cfg: RunConfig, command: str) -> Path:
    out = cfg.paths.get("output_dir")
    if out is None:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
        cfg.paths["output_dir"] = str(out)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(cfg: RunConfig, out: Path):
    (out / "effective_config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def _require_path(cfg: RunConfig, key: str, flag: str) -> Path:
    value = cfg.paths.get(key)
    if value is None:
        raise ConfigError(f"{flag} is required")
    return Path(value)


def _normalization(model, manifest: Optional[data.DatasetManifest] = None):
    if manifest is not None and manifest.mean is not None and manifest.std is not None:
        return manifest.mean, manifest.std
    if getattr(model, "normalization", None) is not None:
        return model.normalization
    if manifest is not None:
        return data.resolve_normalization(manifest, bool(model.config.pretrained_encoder_path))
    return data.DEFAULT_MEAN, data.DEFAULT_STD


def _load_model(cfg: RunConfig, explicit: dict):
    ckpt = _require_path(cfg, "checkpoint", "--checkpoint")
    model = load_checkpoint(ckpt)
    for key, want in explicit.get("model", {}).items():
        have = getattr(model.config, key)
        if key != "pretrained_encoder_path" and have != want:
            raise LoadError(f"checkpoint {ckpt} has {key}={have!r} but the run config asks for {want!r}")
    return model.eval()


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg, _ = resolve_run_config(args)
    train_path = _require_path(cfg, "train_manifest", "--train-manifest")
    val_path = _require_path(cfg, "val_manifest", "--val-manifest")
    train_manifest = data.load_manifest(train_path)
    val_manifest = data.load_manifest(val_path)
    out = output_dir_for(cfg, "train")
    echo_config(cfg, out)

    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.model)
    result = train(
        model, train_manifest, val_manifest, cfg.train,
        augmentation=cfg.augmentation if cfg.augment else None,
        output_dir=out,
    )
    mean, std = _normalization(result.model, val_manifest)
    report = evaluate(result.model, val_manifest, mean=mean, std=std)
    (out / "val_report.txt").write_text(format_report(report))
    (out / "val_report.json").write_text(report_to_json(report))
    print(format_report(report), end="")
    if result.best_path is not None:
        print(f"best checkpoint: {result.best_path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, explicit = resolve_run_config(args)
    model = _load_model(cfg, explicit)
    manifest_path = cfg.paths.get("manifest") or cfg.paths.get("val_manifest")
    if manifest_path is None:
        raise ConfigError("--manifest (or --val-manifest) is required")
    manifest = data.load_manifest(manifest_path)
    out = output_dir_for(cfg, "evaluate")
    echo_config(cfg, out)
    mean, std = _normalization(model, manifest)
    report = evaluate(model, manifest, window=model.config.input_size, mean=mean, std=std)
    text = format_report(report)
    (out / "report.txt").write_text(text)
    (out / "report.json").write_text(report_to_json(report))
    print(text, end="")
    return 0


def _parse_bbox(text: str) -> data.Box:
    try:
        x0, y0, x1, y1 = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--bbox must be x_min,y_min,x_max,y_max, got {text!r}") from exc
    return x0, y0, x1, y1


def overlay_layer(seg: np.ndarray) -> np.ndarray:
    """RGBA layer: palette colour with alpha 255 on labelled pixels, alpha 0 on background."""
    rgba = np.zeros((*seg.shape, 4), dtype=np.uint8)
    for cls, rgb in OVERLAY_COLORS.items():
        sel = seg == cls
        rgba[sel, :3] = rgb
        rgba[sel, 3] = 255
    return rgba


def composite(image: np.ndarray, layer: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    a = (layer[..., 3:4].astype(np.float64) / 255.0) * alpha
    blended = image.astype(np.float64) * (1 - a) + layer[..., :3].astype(np.float64) * a
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def cmd_predict(args) -> int:
    cfg, explicit = resolve_run_config(args)
    model = _load_model(cfg, explicit)
    image = data.read_image(_require_path(cfg, "image", "--image"))
    h, w = image.shape[:2]
    if args.bbox:
        bbox = _parse_bbox(args.bbox)
    elif cfg.paths.get("mask"):
        bbox = data.compute_bbox(data.read_mask(cfg.paths["mask"]))
    else:
        bbox = None
    window = model.config.input_size
    win = data.plan_crop(w, h, bbox, window)
    crop, _ = data.apply_crop(image, np.zeros((h, w), dtype=np.uint8), win)
    out = output_dir_for(cfg, "predict")
    echo_config(cfg, out)

    mean, std = _normalization(model)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        probs = model(data.to_tensor(crop, mean, std).unsqueeze(0).to(dtype))[0]
    seg = predict_segmentation(probs)[0].numpy().astype(np.uint8)
    data.write_png(seg, out / "prediction.png")
    if not args.no_overlay:
        data.write_png(crop, out / "crop.png")
        layer = overlay_layer(seg)
        data.write_png(layer, out / "overlay.png")
        data.write_png(composite(crop, layer), out / "composite.png")
    print(f"wrote predictions to {out}")
    return 0


def cmd_make_fixtures(args) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    out = Path(args.output_dir or Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / "fixtures")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    effective = {"n": args.n, "size": args.size, "seed": args.seed, "output_dir": str(out)}
    (out / "effective_config.yaml").write_text(yaml.safe_dump(effective, sort_keys=True))
    manifest = data.generate_synthetic_fixture(args.n, args.size, args.seed, out)
    counts = {s: len(manifest.subset(s)) for s in data.SPLITS}
    print(f"wrote {len(manifest)} fixtures to {out} ({counts})")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run config (sections: model, train, augmentation, paths)")
    p.add_argument("--output-dir")
    p.add_argument("--variant", choices=("acanet", "rn18u_baseline"))
    p.add_argument("--window-size", type=int, help="crop window and network input size (default 480)")
    p.add_argument("--base-channels", type=int, help="decoder base width (default 64)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acanet", description="Affordance segmentation of hand-held containers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--no-augment", action="store_true", help="disable scale/flip augmentation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-class P/R/J of a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--val-manifest")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment one image and render an overlay")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--bbox", help="x_min,y_min,x_max,y_max object box")
    p.add_argument("--mask", help="annotation mask to derive the object box from")
    p.add_argument("--no-overlay", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("make-fixtures", help="render a synthetic dataset")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--output-dir")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_make_fixtures)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (AcanetError, ValueError, OSError) as exc:
        print(f"acanet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
