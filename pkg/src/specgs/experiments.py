"""Round-trip experiments: synthesise, perturb, re-optimise, measure."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .config import Config
from .data import DEFAULT_PERTURBATION, SpectralDataset, SynthSpec, perturb_scene, render_dataset, synth_scene
from .metrics import EvalTable, evaluate
from .optim import TrainResult, train
from .scene import DTYPE, ENCODING_DIM, SpectralScene, logit

ROUND_TRIP_PERTURBATION = {
    **DEFAULT_PERTURBATION,
    "means": 0.06,
    "log_scales": 0.375,
    "rotations": 0.3,
    "opacity_logits": 0.9,
    "diffuse_logits": 0.9,
    "specular_logits": 0.6,
    "roughness_logits": 0.6,
    "env": 0.45,
}


def round_trip_start(gt: SpectralScene, seed: int = 0, magnitudes: dict | None = None) -> SpectralScene:
    """Optimisation start point derived from a ground-truth scene.

    Geometry, per-band appearance and lights are perturbed; identity encodings
    and classifiers are redrawn at random; the full-spectra band is reset to
    neutral values and marked inactive, as for a fresh reconstruction.
    """
    start = perturb_scene(gt, ROUND_TRIP_PERTURBATION if magnitudes is None else magnitudes, seed)
    gen = torch.Generator().manual_seed(seed + 7919)
    B, N, K = start.num_bands, start.num_gaussians, start.num_classes
    f = start.band_table.full_index
    changes = {
        "encodings": 0.01 * torch.randn(B, N, ENCODING_DIM, generator=gen, dtype=DTYPE),
        "clf_weight": 0.1 * torch.randn(B, K, ENCODING_DIM, generator=gen, dtype=DTYPE),
        "clf_bias": torch.zeros(B, K, dtype=DTYPE),
    }
    neutral = {
        "diffuse_logits": 0.0,
        "specular_logits": float(logit(0.1)),
        "roughness_logits": 0.0,
    }
    for name, value in neutral.items():
        t = getattr(start, name).detach().clone()
        t[f] = value
        changes[name] = t
    if start.env.shape[0] > 1:
        env = start.env.detach().clone()
        env[f] = 0.5
        changes["env"] = env
    return start.replace(full_active=False, priors_initialized=False, **changes)


@dataclass
class RoundTrip:
    gt: SpectralScene
    dataset: SpectralDataset
    start: SpectralScene
    result: TrainResult
    before: EvalTable
    after: EvalTable


def round_trip_config(iterations: int = 2000, warmup: int = 1000, use_prior: bool = True, seed: int = 0) -> Config:
    cfg = Config()
    cfg.train.iterations = iterations
    cfg.train.warmup_iterations = warmup
    cfg.train.use_full_prior = use_prior
    cfg.train.seed = seed
    return cfg


def run_round_trip(
    spec: SynthSpec | None = None,
    cfg: Config | None = None,
    seed: int = 0,
    threads: int = 1,
    data: tuple[SpectralScene, SpectralDataset] | None = None,
    callback=None,
) -> RoundTrip:
    cfg = copy.deepcopy(cfg or round_trip_config())
    gt, ds = data or synth_scene(spec or SynthSpec(), threads=threads)
    start = round_trip_start(gt, seed)
    before = evaluate(start, ds, "test", cfg=cfg, threads=threads)
    result = train(start, ds, cfg, threads=threads, callback=callback)
    after = evaluate(result.scene, ds, "test", cfg=cfg, threads=threads)
    return RoundTrip(gt, ds, start, result, before, after)


def recolor_group(gt: SpectralScene, group_id: int, rgb=(0.9, 0.15, 0.1)) -> SpectralScene:
    """Ground truth with every band's diffuse colour of one group replaced."""
    diffuse = gt.diffuse_logits.detach().clone()
    sel = gt.tags == group_id
    diffuse[:, sel] = logit(torch.tensor(rgb, dtype=DTYPE))
    return gt.replace(diffuse_logits=diffuse)


def rerender(scene: SpectralScene, dataset: SpectralDataset, threads: int = 1) -> SpectralDataset:
    """Re-render a dataset's cameras and splits from another scene."""
    return render_dataset(scene, [v.camera for v in dataset.views], [v.split for v in dataset.views], threads)
