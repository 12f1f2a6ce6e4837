"""Command-line entry point: ``ftvp <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from PIL import Image

from . import report
from .config import PRESETS, ConfigError, NetConfig, TrainConfig, deep_merge, load_config_file, resolve
from .data_synth import (
    Camera,
    Dataset,
    DatasetError,
    GenConfig,
    GridConfig,
    class_names,
    export_dataset,
    generate_samples,
    load_dataset,
    make_drive,
)
from .gradsuite import run_suite
from .network import load_checkpoint, predict
from .tensor import NumericError
from .train_eval import (
    SUITES,
    ablation_variants,
    evaluate,
    run_ablation,
    stitch_panorama,
    train,
    write_ablation_csv,
)

log = logging.getLogger("ftvp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    """Input files are missing or unusable."""


# ---------------------------------------------------------------------------
# helpers

def code_digest() -> str:
    """sha256 over the package sources, so a manifest pins the code that produced it."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """One JSON record per artifact-producing command, written beside its outputs."""

    def __init__(self, command: str, args: argparse.Namespace, out_dir: Path):
        self.data = {
            "command": command,
            "argv": sys.argv[1:],
            "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
            "config": {},
            "seed": getattr(args, "seed", None),
            "code_sha256": code_digest(),
            "started": _now(),
            "finished": None,
            "outputs": [],
        }
        self.out_dir = out_dir

    def add(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            try:
                rel = p.relative_to(self.out_dir)
            except ValueError:
                rel = p
            self.data["outputs"].append(rel.as_posix())

    def write(self) -> Path:
        self.data["finished"] = _now()
        path = self.out_dir / "run_manifest.json"
        path.write_text(json.dumps(self.data, indent=1, default=str))
        return path


def parse_overrides(items) -> dict:
    """``section.key=value`` pairs into a nested mapping; values parse as YAML scalars."""
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected section.key=value (e.g. net.lambda_cycle=0)")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) < 2 or parts[0] not in ("net", "train"):
            raise ConfigError(f"--set {item!r}: key must start with 'net.' or 'train.'")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def resolve_args(args, data: Optional[Dataset] = None) -> tuple[NetConfig, TrainConfig]:
    """Preset, then --config file, then --set overrides, then the convenience flags.

    When data is given its image size and class count fill in anything the user left unset,
    and the encoder is made shallower if the preset is too deep for small images.
    """
    over = parse_overrides(getattr(args, "set", None))
    flags: dict = {"train": {}}
    for name, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr0"), ("seed", "seed")):
        if getattr(args, name, None) is not None:
            flags["train"][key] = getattr(args, name)
    layered = deep_merge(over, flags)
    if data is None:
        return resolve(args.preset, getattr(args, "config", None), layered)

    explicit = dict(over.get("net", {}))
    if getattr(args, "config", None):
        explicit.update(load_config_file(args.config).get("net", {}) or {})
    net_over = dict(over.get("net", {}))
    for k, v in (("input_size", data.image_size), ("num_classes", data.num_classes)):
        if k not in explicit:
            net_over[k] = v
    base = PRESETS.get(args.preset, {}).get("net", {})
    if not any(k in explicit for k in ("encoder_channels", "decoder_channels", "ftvp_scales")):
        net_over.update(_fit_depth(base, net_over.get("input_size", explicit.get("input_size"))))
    layered["net"] = net_over
    net, tr = resolve(args.preset, getattr(args, "config", None), layered)
    if net.input_size != data.image_size or net.num_classes != data.num_classes:
        raise ConfigError(f"config expects {net.input_size}px images with {net.num_classes} classes but the data "
                          f"has {data.image_size}px with {data.num_classes}; adjust net.input_size/num_classes")
    return net, tr


def _fit_depth(preset_net: dict, size: int) -> dict:
    """Drop the deepest encoder scales until the innermost map is at least 2x2."""
    enc = list(preset_net.get("encoder_channels", NetConfig.encoder_channels))
    dec = list(preset_net.get("decoder_channels", NetConfig.decoder_channels))
    scales = list(preset_net.get("ftvp_scales", NetConfig.ftvp_scales))
    n = len(enc)
    while n > 2 and (size % 2 ** n or size // 2 ** n < 2):
        n -= 1
    if n == len(enc):
        return {}
    depth_cut = len(enc) - n
    kept = [s - depth_cut for s in scales if s - depth_cut >= 1] or [n - 1]
    return {"encoder_channels": enc[:n], "decoder_channels": dec[depth_cut:], "ftvp_scales": kept}


def _load_data(path) -> Dataset:
    if path is None:
        raise DataError("--data is required")
    try:
        return load_dataset(path)
    except DatasetError as e:
        raise DataError(str(e)) from e


def _out_dir(path, force: bool = True) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_ckpt(path):
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} does not exist")
    try:
        return load_checkpoint(path)
    except (ValueError, OSError) as e:
        raise DataError(f"{path}: {e}") from e


def _names(data: Dataset) -> list:
    return data.meta.get("class_names") or [f"class_{i}" for i in range(data.num_classes)]


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = _out_dir(args.out, args.force)
    manifest = RunManifest("synth", args, out)
    gen = GenConfig(num_classes=args.classes)
    if args.drive:
        drive = make_drive(args.seed, frames=args.drive, step_cells=args.step_cells, gen_cfg=gen,
                           image_size=args.image_size)
        samples = drive.samples
        extra = {"drive": True, "frames": args.drive, "step_cells": args.step_cells}
    else:
        samples = generate_samples(args.seed, args.count, gen, args.image_size)
        extra = {"drive": False}
    path = export_dataset(samples, out, args.classes, Camera(args.image_size), GridConfig.for_image(args.image_size),
                          extra={**extra, "seed": args.seed})
    freqs = json.loads(path.read_text())["class_frequencies"]
    print(f"{len(samples)} samples -> {out}")
    print(f"{'class':<12}{'frequency':>10}")
    for name, f in zip(class_names(args.classes), freqs):
        print(f"{name:<12}{f:>10.4f}")
    manifest.data["config"] = {"gen": gen.__dict__, "image_size": args.image_size}
    manifest.add(path, out / "poses.csv", out / "images", out / "masks")
    manifest.write()
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_data(args.data)
    val = _load_data(args.val) if args.val else None
    net, tr = resolve_args(args, data)
    out = _out_dir(args.out, args.force)
    manifest = RunManifest("train", args, out)
    manifest.data["config"] = {"net": net.to_dict(), "train": tr.to_dict()}
    manifest.data["seed"] = tr.seed
    res = train(data, net, tr, out, val=val, log=print)
    fig = report.plot_loss_curve(res.csv_path, out / "loss_curve.png")
    manifest.add(res.csv_path, fig, *sorted(out.glob("*.ckpt")))
    manifest.write()
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, _ = _load_ckpt(args.ckpt)
    data = _load_data(args.data)
    try:
        rep = evaluate(params, data, class_names=_names(data))
    except ValueError as e:
        raise DataError(str(e)) from e
    print(f"mIOU {rep.miou:.2f}%  mAP {rep.map:.2f}%  ({rep.num_samples} samples, background excluded)")
    for c in rep.to_dict()["classes"]:
        iou = "n/a" if c["iou"] is None else f"{100 * c['iou']:.2f}"
        ap = "n/a" if c["ap"] is None else f"{100 * c['ap']:.2f}"
        print(f"  {c['name']:<12} IoU {iou:>6}  AP {ap:>6}")
    if args.out:
        out = _out_dir(args.out)
        manifest = RunManifest("eval", args, out)
        manifest.data["config"] = {"net": params.cfg.to_dict()}
        rep.to_json(out / "eval.json")
        _, masks = predict(data.images[:1], params)
        fig = report.plot_masks(data.images[0], masks[0], data.num_classes, out / "sample.png", data.masks[0])
        manifest.add(out / "eval.json", fig)
        manifest.write()
    return EXIT_OK


def cmd_infer(args) -> int:
    params, _ = _load_ckpt(args.ckpt)
    cfg = params.cfg
    try:
        img = np.asarray(Image.open(args.image).convert("RGB"))
    except (OSError, FileNotFoundError) as e:
        raise DataError(f"cannot read image {args.image}: {e}") from e
    if img.shape[:2] != (cfg.input_size, cfg.input_size):
        raise DataError(f"image is {img.shape[1]}x{img.shape[0]} but the model expects "
                        f"{cfg.input_size}x{cfg.input_size}")
    x = (img.astype(np.float32) / 255.0).transpose(2, 0, 1)
    _, masks = predict(x[None], params)
    mask = masks[0].astype(np.uint8)
    out = _out_dir(args.out)
    manifest = RunManifest("infer", args, out)
    manifest.data["config"] = {"net": cfg.to_dict()}
    Image.fromarray(mask, mode="L").save(out / "mask.png")
    Image.fromarray(report.colorize(mask, cfg.num_classes)).save(out / "mask_color.png")
    fig = report.plot_masks(x, mask, cfg.num_classes, out / "overview.png")
    manifest.add(out / "mask.png", out / "mask_color.png", fig)
    manifest.write()
    print(f"mask {mask.shape[0]}x{mask.shape[1]} -> {out / 'mask.png'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    data = _load_data(args.data)
    if args.test:
        test = _load_data(args.test)
        train_ds = data
    else:
        n_test = max(1, len(data) // 6)
        train_ds, test = data.subset(range(len(data) - n_test)), data.subset(range(len(data) - n_test, len(data)))
    net, tr = resolve_args(args, data)
    out = _out_dir(args.out, args.force)
    manifest = RunManifest("ablate", args, out)
    manifest.data["config"] = {"net": net.to_dict(), "train": tr.to_dict(), "suite": args.suite,
                               "variants": [(lbl, c.to_dict()) for lbl, c in ablation_variants(args.suite, net)]}
    manifest.data["seed"] = tr.seed
    rows = run_ablation(args.suite, net, tr, train_ds, test, log=print, out_dir=out / "runs")
    write_ablation_csv(rows, out / "ablation.csv")
    fig = report.plot_ablation([r.label for r in rows], [r.miou for r in rows], [r.map for r in rows],
                               out / "ablation.png", title=f"{args.suite} (seed {tr.seed})")
    manifest.add(out / "ablation.csv", fig)
    manifest.write()
    return EXIT_OK


def cmd_stitch(args) -> int:
    data = _load_data(args.data)
    order = np.lexsort((data.poses[:, 1], data.poses[:, 0])) if args.sort_poses else np.arange(len(data))
    if args.ckpt:
        params, _ = _load_ckpt(args.ckpt)
        if params.cfg.input_size != data.image_size:
            raise DataError(f"checkpoint expects {params.cfg.input_size}px images, data has {data.image_size}px")
        _, masks = predict(data.images[order], params)
        source = "inferred"
    else:
        masks = data.masks[order]
        source = "ground truth"
    grid = GridConfig(**data.meta["grid"]) if data.meta.get("grid") else GridConfig.for_image(data.image_size)
    poses = [tuple(p) for p in data.poses[order]]
    pano = stitch_panorama(list(masks.astype(np.uint8)), poses, grid)
    out = _out_dir(args.out)
    manifest = RunManifest("stitch", args, out)
    manifest.data["config"] = {"grid": grid.__dict__, "source": source}
    Image.fromarray(pano.mask.astype(np.uint8), mode="L").save(out / "panorama_mask.png")
    fig = report.plot_panorama(pano.mask, pano.observed, data.num_classes, out / "panorama.png", poses,
                               pano.x_top, pano.y_left, pano.res)
    meta = {"x_top": pano.x_top, "y_left": pano.y_left, "res": pano.res, "shape": list(pano.mask.shape),
            "observed_cells": int(pano.observed.sum()), "frames": len(poses), "source": source}
    (out / "panorama.json").write_text(json.dumps(meta, indent=1))
    manifest.add(out / "panorama_mask.png", fig, out / "panorama.json")
    manifest.write()
    print(f"panorama {pano.mask.shape[0]}x{pano.mask.shape[1]} from {len(poses)} frames ({source})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    results, seconds = run_suite(seeds)
    worst: dict = {}
    for r in results:
        if r.name not in worst or r.max_rel_error > worst[r.name].max_rel_error or not r.passed:
            worst[r.name] = r
    failed = [r for r in results if not r.passed]
    print(f"{'case':<24}{'worst rel err':>14}{'tol':>9}  status")
    for name, r in worst.items():
        status = "ok" if all(x.passed for x in results if x.name == name) else "FAIL"
        print(f"{name:<24}{r.max_rel_error:>14.2e}{r.tol:>9.0e}  {status}")
    print(f"{len(results)} checks over seeds {seeds.start}..{seeds.stop - 1} in {seconds:.1f}s")
    if args.out:
        out = _out_dir(args.out)
        manifest = RunManifest("gradcheck", args, out)
        with open(out / "gradcheck.csv", "w") as f:
            f.write("case,seed,max_rel_error,checked,skipped,tol,passed\n")
            for r in results:
                f.write(f"{r.name},{r.seed},{r.max_rel_error!r},{r.checked},{r.skipped},{r.tol},{r.passed}\n")
        manifest.add(out / "gradcheck.csv")
        manifest.write()
    if failed:
        print(f"{len(failed)} check(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="desk", help="named defaults: desk, tiny, paper-kitti (default desk)")
    p.add_argument("--config", help="YAML/JSON file with 'net' and 'train' sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value, e.g. --set net.lambda_cycle=0 (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftvp", description="Front-view to top-view segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--classes", type=int, choices=(3, 8), default=3)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--drive", type=int, metavar="FRAMES", help="emit one drive sequence of FRAMES posed frames")
    p.add_argument("--step-cells", type=int, default=4, help="grid cells travelled between drive frames")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="validation dataset; enables best-mIOU checkpointing")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write eval.json and a sample figure here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict the top-view mask of one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--data", required=True, help="training data (the last sixth is held out unless --test)")
    p.add_argument("--test")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stitch", help="stitch per-frame masks of a drive into a panorama")
    p.add_argument("--ckpt", help="infer masks with this model; ground truth is used when omitted")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sort-poses", action="store_true", help="order frames by pose instead of dataset order")
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--out", help="write gradcheck.csv here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    raw = os.environ.get("FTVP_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"FTVP_THREADS={raw!r} must be a positive integer") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
