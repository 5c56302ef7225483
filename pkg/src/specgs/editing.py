"""Identity-based grouping of splats, group deletion, and fine-tuning against edited views."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .config import Config
from .data import SpectralDataset, classify_pixels
from .optim import TrainResult, train
from .raster import CameraView, render
from .scene import SpectralScene


@dataclass
class SplatClasses:
    group: torch.Tensor  # (N,) int64
    confidence: torch.Tensor  # (N,)

    def as_list(self) -> list[tuple[int, int, float]]:
        return [(i, int(g), float(c)) for i, (g, c) in enumerate(zip(self.group, self.confidence))]


def classify_splats(scene: SpectralScene, band) -> SplatClasses:
    """Argmax of softmax(W e + b) per splat; ties go to the lowest class index."""
    b = scene.band_index(band)
    with torch.no_grad():
        logits = scene.encodings[b] @ scene.clf_weight[b].T + scene.clf_bias[b]
        probs = torch.softmax(logits, dim=-1)
        conf, group = probs.max(dim=-1)
    return SplatClasses(group, conf)


def delete_group(scene: SpectralScene, group_id: int, band, confidence_threshold: float = 0.5) -> SpectralScene:
    """Remove every splat classified as ``group_id`` with confidence >= threshold."""
    if not 0 <= group_id < scene.num_classes:
        raise ValueError(f"unknown group id {group_id}; classifier has {scene.num_classes} classes")
    cls = classify_splats(scene, band)
    drop = (cls.group == group_id) & (cls.confidence >= confidence_threshold)
    return scene.select(~drop)


def group_mask_render(scene: SpectralScene, cam: CameraView, band, group_id: int, cfg: Config | None = None) -> torch.Tensor:
    """Pixels whose composited identity feature classifies as ``group_id`` (alpha >= 0.5)."""
    cfg = cfg or Config()
    b = scene.band_index(band)
    with torch.no_grad():
        out = render(scene, cam, band, raster=cfg.raster, shading=cfg.shading, color=cfg.color)
        ids = classify_pixels(out.id_feature, out.alpha, scene.clf_weight[b], scene.clf_bias[b], cfg.loss.id_alpha_threshold)
        return (ids == group_id) & (out.alpha >= cfg.loss.id_alpha_threshold)


def check_same_cameras(a: SpectralDataset, b: SpectralDataset, tol: float = 1e-9) -> None:
    if a.band_table.names != b.band_table.names:
        raise ValueError(f"band mismatch: {a.band_table.names} vs {b.band_table.names}")
    if len(a.views) != len(b.views):
        raise ValueError(f"view count mismatch: {len(a.views)} vs {len(b.views)}")
    for va, vb in zip(a.views, b.views):
        ca, cb = va.camera, vb.camera
        same = (ca.width, ca.height) == (cb.width, cb.height)
        same &= all(abs(x - y) <= tol for x, y in ((ca.fx, cb.fx), (ca.fy, cb.fy), (ca.cx, cb.cx), (ca.cy, cb.cy)))
        same &= float((ca.world_to_camera - cb.world_to_camera).abs().max()) <= tol
        if not same:
            raise ValueError(f"camera mismatch at view '{va.name}' / '{vb.name}'")


def finetune_edit(
    scene: SpectralScene,
    edited: SpectralDataset,
    cfg: Config | None = None,
    freeze_geometry: bool | None = None,
    iterations: int | None = None,
    reference: SpectralDataset | None = None,
    threads: int | None = None,
    callback=None,
) -> TrainResult:
    """Continue training from ``scene`` on edited views with the edit budget.

    With geometry frozen only appearance, identity encodings, classifiers and
    lights adapt. ``reference`` (the unedited dataset) is checked for matching
    cameras and bands when given.
    """
    cfg = copy.deepcopy(cfg or Config())
    if reference is not None:
        check_same_cameras(reference, edited)
    freeze = cfg.edit.freeze_geometry if freeze_geometry is None else freeze_geometry
    if freeze and "geometry" not in cfg.train.frozen:
        cfg.train.frozen = tuple(cfg.train.frozen) + ("geometry",)
    cfg.train.warmup_iterations = 0
    cfg.train.densify = False
    n = cfg.edit.iterations if iterations is None else iterations
    if n == 0:
        return TrainResult(scene, [])
    return train(scene, edited, cfg, iterations=n, threads=threads, callback=callback)
