"""Gradients, Adam, the warm-up schedule with full-spectra priors, and density control."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import Config, LossConfig, TrainConfig
from .losses import LossTerms, render_loss_band, total_loss
from .raster import CameraView, render_bands
from .scene import BANDED_PARAMS, BRDF_PARAMS, DTYPE, GEOMETRY_PARAMS, PARAM_NAMES, PER_SPLAT_BANDED, SpectralScene, quat_to_rotmat

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "band", "l1", "dssim", "l2d", "l3d", "total")


def active_bands(scene: SpectralScene) -> list[str]:
    """Bands in the loss sum: every spectral band, plus full spectra once it has joined."""
    return [b.name for b in scene.band_table if not b.is_full or scene.full_active]


def backward(
    scene: SpectralScene,
    cam: CameraView,
    refs: dict[str, torch.Tensor],
    masks: dict[str, torch.Tensor] | None,
    weights: LossConfig,
    bands: list[str] | None = None,
    cfg: Config | None = None,
    seed: int = 0,
    threads: int | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor], dict[str, LossTerms]]:
    """Loss summed over ``bands`` and its exact gradient w.r.t. every parameter.

    Raises FloatingPointError naming the first parameter group with a
    non-finite gradient.
    """
    cfg = cfg or Config()
    bands = bands or active_bands(scene)
    leaves = {n: t.detach().clone().requires_grad_() for n, t in scene.params().items()}
    live = scene.replace(**leaves)
    outs = render_bands(live, cam, bands, cfg.raster, cfg.shading, cfg.color, threads=threads)
    terms = {}
    for b in bands:
        o = outs[b]
        mask = None if masks is None else masks.get(b)
        terms[b] = render_loss_band(o.color, refs[b], weights, live, b, o.id_feature, o.alpha, mask, seed)
    loss = total_loss(t.total for t in terms.values())
    used = [n for n in PARAM_NAMES if leaves[n].requires_grad]
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, [leaves[n] for n in used], allow_unused=True)
    else:
        grads = [None] * len(used)
    out = {}
    for n, g in zip(used, grads):
        g = torch.zeros_like(leaves[n]) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient in parameter group '{n}'")
        out[n] = g
    return loss.detach(), out, terms


# -- Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: dict[str, int] = field(default_factory=dict)


def normalize_quaternions(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lrs: dict[str, float],
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-15,
    active_bands: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """One bias-corrected Adam update for every group that has a learning rate.

    Groups absent from ``lrs`` (frozen) are returned unchanged and keep their
    moments. With ``active_bands`` (one bool per band) the per-band slices of
    banded groups are separate parameter groups: inactive slices are left
    untouched, moments and step counts included, so a band that joins late
    starts Adam afresh. Quaternions are renormalised and environment radiance
    clamped at 0 after the update.
    """
    b1, b2 = betas
    out = dict(params)
    for name, p in params.items():
        if name not in lrs or name not in grads:
            continue
        g = grads[name]
        m = state.m.get(name, torch.zeros_like(p))
        v = state.v.get(name, torch.zeros_like(p))
        rows = None
        if active_bands is not None and name in BANDED_PARAMS and p.shape[0] == len(active_bands):
            rows = active_bands.reshape((-1,) + (1,) * (p.ndim - 1))
        if rows is None:
            t = state.step.get(name, 0) + 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            new = p - lrs[name] * m_hat / (torch.sqrt(v_hat) + eps)
        else:
            t = state.step.get(name, torch.zeros(len(active_bands), dtype=torch.int64)) + active_bands.long()
            m = torch.where(rows, b1 * m + (1 - b1) * g, m)
            v = torch.where(rows, b2 * v + (1 - b2) * g * g, v)
            tt = t.clamp_min(1).to(DTYPE).reshape(rows.shape)
            m_hat = m / (1 - b1**tt)
            v_hat = v / (1 - b2**tt)
            new = torch.where(rows, p - lrs[name] * m_hat / (torch.sqrt(v_hat) + eps), p)
        if name == "rotations":
            new = normalize_quaternions(new)
        elif name == "env":
            new = new.clamp_min(0.0)
        out[name] = new
        state.m[name], state.v[name], state.step[name] = m, v, t
    return out


def learning_rates(cfg: TrainConfig, iteration: int, total: int) -> dict[str, float]:
    """Per-group rates; the means decay exponentially from ``means`` to ``means_final``."""
    lr = cfg.lr
    frac = min(max(iteration / max(total, 1), 0.0), 1.0)
    means = math.exp((1 - frac) * math.log(lr.means) + frac * math.log(lr.means_final)) * cfg.spatial_scale
    rates = {n: getattr(lr, n) for n in PARAM_NAMES if n != "means"}
    rates["means"] = means
    frozen = set(cfg.frozen)
    if "geometry" in frozen:
        frozen |= set(GEOMETRY_PARAMS)
    return {n: r for n, r in rates.items() if n not in frozen}


# -- full-spectra priors -------------------------------------------------------------

def full_spectra_prior_values(scene: SpectralScene) -> dict[str, torch.Tensor]:
    """Arithmetic means over the spectral bands, in parameter (logit) space.

    Returns full-band tensors for the BRDF logits, identity encodings and, when
    environment maps are per band, the environment map.
    """
    spectral = [i for i, b in enumerate(scene.band_table) if not b.is_full]
    out = {}
    for name in BRDF_PARAMS + ("encodings",):
        out[name] = getattr(scene, name).detach()[spectral].mean(0)
    if not scene.shared_env and scene.env.shape[0] > 1:
        out["env"] = scene.env.detach()[spectral].mean(0)
    return out


def init_full_spectra_priors(scene: SpectralScene) -> SpectralScene:
    """Seed the full-spectra band with per-band averages and activate it (once)."""
    if scene.priors_initialized:
        raise RuntimeError("full-spectra priors were already initialised for this scene")
    f = scene.band_table.full_index
    values = full_spectra_prior_values(scene)
    changes = {}
    for name, value in values.items():
        t = getattr(scene, name).detach().clone()
        t[f] = value
        changes[name] = t
    return scene.replace(full_active=True, priors_initialized=True, **changes)


# -- density control ------------------------------------------------------------------

@dataclass
class DensifyResult:
    scene: SpectralScene
    source: torch.Tensor  # (N_new,) index of the splat each new splat came from
    fresh: torch.Tensor  # (N_new,) bool, True for clones/split children (optimizer state reset)


def densify_and_prune(
    scene: SpectralScene,
    grad_norm_avg: torch.Tensor,
    cfg: TrainConfig,
) -> DensifyResult:
    """Clone small and split large high-gradient splats, then prune transparent ones.

    A split replaces the parent by two children offset by one standard
    deviation along its major axis, with scales divided by 1.6. Children and
    clones copy every per-band attribute of their parent.
    """
    g = scene.params()
    with torch.no_grad():
        selected = grad_norm_avg >= cfg.densify_grad_threshold
        max_scale = torch.exp(g["log_scales"]).max(-1).values
        small = max_scale <= cfg.percent_dense * cfg.spatial_scale
        clone = selected & small
        split = selected & ~small

        keep_parent = ~split
        idx_keep = torch.nonzero(keep_parent).flatten()
        idx_clone = torch.nonzero(clone).flatten()
        idx_split = torch.nonzero(split).flatten()
        source = torch.cat([idx_keep, idx_clone, idx_split, idx_split])
        fresh = torch.cat(
            [torch.zeros(len(idx_keep), dtype=torch.bool), torch.ones(len(idx_clone) + 2 * len(idx_split), dtype=torch.bool)]
        )
        geo = {n: g[n][source].clone() for n in GEOMETRY_PARAMS}
        banded = {n: g[n][:, source].clone() for n in PER_SPLAT_BANDED}
        if len(idx_split):
            s = len(idx_keep) + len(idx_clone)
            R = quat_to_rotmat(g["rotations"][idx_split])
            ls = g["log_scales"][idx_split]
            major = torch.argmax(ls, dim=-1)
            axis = R[torch.arange(len(idx_split)), :, major]
            offset = axis * torch.exp(ls.gather(1, major[:, None]))
            k = len(idx_split)
            geo["means"][s : s + k] += offset
            geo["means"][s + k : s + 2 * k] -= offset
            geo["log_scales"][s:] -= math.log(1.6)
        tags = scene.tags[source].clone()

        opacity = torch.sigmoid(geo["opacity_logits"])
        alive = opacity >= cfg.prune_opacity
        keep = torch.nonzero(alive).flatten()
    new_scene = scene.replace(
        **{n: t[keep] for n, t in geo.items()},
        **{n: t[:, keep] for n, t in banded.items()},
        clf_weight=g["clf_weight"].detach().clone(),
        clf_bias=g["clf_bias"].detach().clone(),
        env=g["env"].detach().clone(),
        tags=tags[keep],
    )
    return DensifyResult(new_scene, source[keep], fresh[keep])


def _remap_state(state: AdamState, res: DensifyResult) -> None:
    for name in GEOMETRY_PARAMS + PER_SPLAT_BANDED:
        axis = 1 if name in PER_SPLAT_BANDED else 0
        for store in (state.m, state.v):
            if name in store:
                t = store[name].index_select(axis, res.source)
                shape = [1] * t.ndim
                shape[axis] = -1
                store[name] = t * (~res.fresh).to(DTYPE).reshape(shape)


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    scene: SpectralScene
    log_rows: list[tuple]


def format_log(rows: list[tuple]) -> str:
    lines = ["\t".join(LOG_COLUMNS)]
    for it, band, *vals in rows:
        lines.append("\t".join([str(it), band] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


def view_schedule(n_views: int, iterations: int, seed: int) -> list[int]:
    """Shuffled passes over the training views, reseeded per pass from ``seed``."""
    rng = np.random.default_rng(seed)
    order: list[int] = []
    while len(order) < iterations:
        order.extend(rng.permutation(n_views).tolist())
    return order[:iterations]


def train(
    scene: SpectralScene,
    dataset,
    cfg: Config | None = None,
    iterations: int | None = None,
    split: str = "train",
    log_path: str | Path | None = None,
    callback: Callable[[int, SpectralScene, dict], None] | None = None,
    threads: int | None = None,
) -> TrainResult:
    """Optimise ``scene`` against the dataset's views.

    Iterations before ``warmup_iterations`` leave the full-spectra band out of
    the loss. At the warm-up iteration the band joins, seeded from per-band
    averages when ``use_full_prior`` is set and the scene has no prior yet.
    """
    cfg = cfg or Config()
    tc = cfg.train
    total = tc.iterations if iterations is None else iterations
    views = dataset.split(split) if split else dataset.views
    if not views:
        raise ValueError(f"dataset has no '{split}' views")
    schedule = view_schedule(len(views), total, tc.seed)
    state = AdamState()
    rows: list[tuple] = []
    params = {n: t.detach().clone() for n, t in scene.params().items()}
    scene = scene.replace(**params)
    grad_accum = torch.zeros(scene.num_gaussians, dtype=DTYPE)
    grad_count = torch.zeros(scene.num_gaussians, dtype=DTYPE)
    log_fh = open(log_path, "w") if log_path else None
    try:
        if log_fh:
            log_fh.write("\t".join(LOG_COLUMNS) + "\n")
        for it in range(total):
            if it == tc.warmup_iterations and not scene.full_active:
                if tc.use_full_prior and not scene.priors_initialized:
                    scene = init_full_spectra_priors(scene)
                else:
                    scene = scene.replace(full_active=True)
            view = views[schedule[it]]
            bands = active_bands(scene)
            loss, grads, terms = backward(
                scene, view.camera, view.images, view.masks, cfg.loss, bands, cfg, seed=tc.seed * 1_000_003 + it, threads=threads
            )
            for b in bands:
                t = terms[b].as_floats()
                row = (it, b, t["l1"], t["dssim"], t["l2d"], t["l3d"], t["total"])
                rows.append(row)
                if log_fh:
                    log_fh.write("\t".join([str(it), b] + [repr(v) for v in row[2:]]) + "\n")
            if tc.log_every and it % tc.log_every == 0:
                log.info("iter %d loss %.6f", it, float(loss))
            active = torch.tensor([b in bands for b in scene.band_table.names])
            new = adam_step(scene.params(), grads, state, learning_rates(tc, it, total), active_bands=active)
            scene = scene.replace(**new)
            if tc.densify and tc.densify_from <= it < tc.densify_until:
                gn = grads["means"].norm(dim=-1)
                grad_accum += gn
                grad_count += (gn > 0).to(DTYPE)
                if (it + 1) % tc.densify_interval == 0:
                    res = densify_and_prune(scene, grad_accum / grad_count.clamp_min(1.0), tc)
                    scene = res.scene
                    _remap_state(state, res)
                    grad_accum = torch.zeros(scene.num_gaussians, dtype=DTYPE)
                    grad_count = torch.zeros(scene.num_gaussians, dtype=DTYPE)
            if callback:
                callback(it, scene, {b: terms[b] for b in bands})
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(scene, rows)
