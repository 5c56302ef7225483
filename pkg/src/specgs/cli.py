"""Command-line entry point: ``specgs <subcommand> [flags]``.

Logs go to stderr; artifacts go to the paths given by flags. Any failure exits
with status 1 and a one-line ``error:`` diagnostic.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .color import combine_bands, gamma_decode
from .config import Config, load_config, override
from .data import (
    SpectralDataset,
    SynthSpec,
    classify_pixels,
    load_dataset,
    save_dataset,
    save_float,
    save_mask,
    save_png,
    synth_scene,
)
from .editing import classify_splats, delete_group, finetune_edit
from .metrics import evaluate
from .optim import format_log, train
from .raster import render_bands
from .scene import SpectralScene, load_scene, save_scene

log = logging.getLogger("specgs")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one line, nonzero exit, names the offending flag
        self.exit(2, f"error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config field")
    p.add_argument("--seed", type=int, help="random seed (overrides train.seed)")
    p.add_argument("--threads", type=int, default=1, help="rasterizer worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specgs", description="Spectral Gaussian splatting: reconstruct, render, segment, edit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic ground-truth scene and its dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--n-train", type=int, default=16)
    p.add_argument("--n-test", type=int, default=4)

    p = sub.add_parser("train", help="optimise a scene against a dataset")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene-in", help="starting checkpoint (default: neutral scene from --init-points)")
    p.add_argument("--init-points", type=int, default=64, help="random initial splats when no --scene-in")
    p.add_argument("--scene-out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--log", help="loss log TSV path (default: <scene-out>.loss.tsv)")

    p = sub.add_parser("render", help="render every band of dataset views")
    _common(p)
    p.add_argument("--scene-in", required=True)
    p.add_argument("--dataset", required=True, help="dataset whose cameras are rendered")
    p.add_argument("--view", help="single view name (default: all)")
    p.add_argument("--band", help="single band name (default: all)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="PSNR / SSIM of a scene on a dataset split")
    _common(p)
    p.add_argument("--scene-in", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--band", action="append", help="restrict to band(s)")
    p.add_argument("--out", help="write <out>.tsv and <out>.json")

    p = sub.add_parser("segment", help="classify splats (and optionally view pixels) into groups")
    _common(p)
    p.add_argument("--scene-in", required=True)
    p.add_argument("--band", default="full")
    p.add_argument("--dataset", help="also write per-view group masks for this dataset's cameras")
    p.add_argument("--view", help="single view name")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("delete", help="remove one identity group from a scene")
    _common(p)
    p.add_argument("--scene-in", required=True)
    p.add_argument("--scene-out", required=True)
    p.add_argument("--group-id", type=int, required=True)
    p.add_argument("--band", default="full")

    p = sub.add_parser("finetune", help="adapt a scene to edited views")
    _common(p)
    p.add_argument("--scene-in", required=True)
    p.add_argument("--dataset", required=True, help="edited dataset")
    p.add_argument("--reference", help="unedited dataset, checked for matching cameras")
    p.add_argument("--scene-out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--train-geometry", action="store_true", help="do not freeze geometry")
    p.add_argument("--log", help="loss log TSV path")

    p = sub.add_parser("combine", help="recombine a view's band images into one display image")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--view", required=True)
    p.add_argument("--out", required=True, help="output PNG (a .npy twin is written alongside)")
    return parser


def _config(args) -> Config:
    cfg = load_config(args.config)
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects SECTION.KEY=VALUE, got '{item}'")
        cfg = override(cfg, key.strip(), yaml.safe_load(raw))
    if args.seed is not None:
        cfg = override(cfg, "train.seed", args.seed)
    return cfg


def _scene(path) -> SpectralScene:
    if not Path(path).exists():
        raise FileNotFoundError(f"scene checkpoint not found: {path}")
    return load_scene(path)


def _views(ds: SpectralDataset, name: str | None):
    if name is None:
        return ds.views
    views = [v for v in ds.views if v.name == name]
    if not views:
        raise ValueError(f"no view named '{name}' in dataset")
    return views


def _check_band(scene: SpectralScene, band: str | None) -> None:
    if band is not None and band not in scene.band_table.names:
        raise ValueError(f"unknown band '{band}'; scene has {scene.band_table.names}")


def cmd_synth(args, cfg: Config) -> None:
    seed = cfg.train.seed if args.seed is None else args.seed
    spec = SynthSpec(n_train=args.n_train, n_test=args.n_test, image_size=args.image_size, seed=seed)
    gt, ds = synth_scene(spec, threads=args.threads)
    out = Path(args.out)
    save_dataset(ds, out / "dataset")
    save_scene(gt, out / "ground_truth.specgs")
    for b in gt.band_table:
        save_float(gt.env[gt.env_index(b.name)], out / "env" / f"band_{b.name}.npy")
    log.info("synthetic scene: %d splats, %d views -> %s", gt.num_gaussians, len(ds.views), out)


def _initial_scene(ds: SpectralDataset, cfg: Config, n: int) -> SpectralScene:
    if n < 1:
        raise ValueError(f"--init-points must be >= 1, got {n}")
    rng = np.random.default_rng(cfg.train.seed)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * 0.6
    sc = cfg.scene
    return SpectralScene.create(
        pts, ds.band_table, ds.num_classes, sc.env_height, sc.env_width, sc.env_levels, sc.share_env, seed=cfg.train.seed
    )


def cmd_train(args, cfg: Config) -> None:
    ds = load_dataset(args.dataset)
    scene = _scene(args.scene_in) if args.scene_in else _initial_scene(ds, cfg, args.init_points)
    if scene.band_table.names != ds.band_table.names:
        raise ValueError(f"scene bands {scene.band_table.names} do not match dataset bands {ds.band_table.names}")
    iterations = cfg.train.iterations if args.iterations is None else args.iterations
    log_path = args.log or f"{args.scene_out}.loss.tsv"
    res = train(scene, ds, cfg, iterations=iterations, log_path=log_path, threads=args.threads)
    save_scene(res.scene, args.scene_out)
    log.info("trained %d iterations -> %s (log %s)", iterations, args.scene_out, log_path)


def cmd_render(args, cfg: Config) -> None:
    scene = _scene(args.scene_in)
    _check_band(scene, args.band)
    ds = load_dataset(args.dataset)
    bands = [args.band] if args.band else scene.band_table.names
    out = Path(args.out)
    with torch.no_grad():
        for v in _views(ds, args.view):
            outs = render_bands(scene, v.camera, bands, cfg.raster, cfg.shading, cfg.color, threads=args.threads)
            for b, o in outs.items():
                save_png(o.color, out / f"band_{b}" / f"{v.name}.png")
                save_float(o.color, out / f"band_{b}" / f"{v.name}.npy")
                save_float(o.alpha, out / f"alpha_{b}" / f"{v.name}.npy")
    log.info("rendered %s -> %s", bands, out)


def cmd_eval(args, cfg: Config) -> None:
    scene = _scene(args.scene_in)
    for b in args.band or []:
        _check_band(scene, b)
    ds = load_dataset(args.dataset)
    table = evaluate(scene, ds, args.split, args.band, cfg, threads=args.threads)
    tsv = table.to_tsv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(f"{args.out}.tsv").write_text(tsv)
        Path(f"{args.out}.json").write_text(table.to_json())
    sys.stdout.write(tsv)


def cmd_segment(args, cfg: Config) -> None:
    scene = _scene(args.scene_in)
    _check_band(scene, args.band)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cls = classify_splats(scene, args.band)
    lines = ["splat\tgroup\tconfidence"] + [f"{i}\t{g}\t{c!r}" for i, g, c in cls.as_list()]
    (out / "splat_groups.tsv").write_text("\n".join(lines) + "\n")
    if args.dataset:
        ds = load_dataset(args.dataset)
        b = scene.band_index(args.band)
        with torch.no_grad():
            for v in _views(ds, args.view):
                o = render_bands(scene, v.camera, [args.band], cfg.raster, cfg.shading, cfg.color, threads=args.threads)[args.band]
                ids = classify_pixels(o.id_feature, o.alpha, scene.clf_weight[b], scene.clf_bias[b], cfg.loss.id_alpha_threshold)
                save_mask(ids, out / "masks" / f"{v.name}.png")
    log.info("segmented %d splats -> %s", scene.num_gaussians, out)


def cmd_delete(args, cfg: Config) -> None:
    scene = _scene(args.scene_in)
    _check_band(scene, args.band)
    edited = delete_group(scene, args.group_id, args.band, cfg.edit.confidence_threshold)
    save_scene(edited, args.scene_out)
    log.info("deleted %d splats of group %d -> %s", scene.num_gaussians - edited.num_gaussians, args.group_id, args.scene_out)


def cmd_finetune(args, cfg: Config) -> None:
    scene = _scene(args.scene_in)
    ds = load_dataset(args.dataset)
    ref = load_dataset(args.reference) if args.reference else None
    res = finetune_edit(
        scene, ds, cfg, freeze_geometry=False if args.train_geometry else None, iterations=args.iterations, reference=ref, threads=args.threads
    )
    if args.log:
        Path(args.log).write_text(format_log(res.log_rows))
    save_scene(res.scene, args.scene_out)
    log.info("fine-tuned -> %s", args.scene_out)


def cmd_combine(args, cfg: Config) -> None:
    ds = load_dataset(args.dataset)
    (v,) = _views(ds, args.view)
    # band images are display-encoded; undo the curve and read each band as scalar radiance
    radiance = [
        gamma_decode(v.images[b.name].numpy(), cfg.color.gamma_mode, cfg.color.gamma).mean(axis=-1)
        for b in ds.band_table.spectral
    ]
    img = combine_bands(radiance, ds.band_table, gamma_mode=cfg.color.gamma_mode, gamma=cfg.color.gamma)
    save_png(img, args.out)
    save_float(img, Path(args.out).with_suffix(".npy"))
    log.info("combined %d bands of view %s -> %s", len(radiance), v.name, args.out)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "segment": cmd_segment,
    "delete": cmd_delete,
    "finetune": cmd_finetune,
    "combine": cmd_combine,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)  # determinism: parallelism comes only from --threads
    try:
        if args.threads < 1:
            raise ValueError(f"--threads must be >= 1, got {args.threads}")
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, RuntimeError, KeyError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        sys.stderr.write(f"error: {msg}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
