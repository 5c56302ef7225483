"""Training objectives: photometric L1 + D-SSIM, 2D identity cross-entropy, 3D kNN KL."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import torch

from .config import LossConfig
from .scene import DTYPE, SpectralScene

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_same(img: torch.Tensor, ref: torch.Tensor):
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(img.shape)} vs {tuple(ref.shape)}")


def l1_loss(img: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference; the subgradient at equality is 0 (torch.abs convention)."""
    _check_same(img, ref)
    return (img - ref).abs().mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    w = torch.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Separable 'valid' filtering of (H, W, C) maps by explicit shifted sums."""
    k = w.shape[0]
    H, W = x.shape[:2]
    rows = sum(w[i] * x[i : H - k + 1 + i] for i in range(k))
    return sum(w[i] * rows[:, i : W - k + 1 + i] for i in range(k))


def ssim(img: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), data range 1,
    population statistics, averaged over the valid region and channels."""
    _check_same(img, ref)
    if img.ndim == 2:
        img, ref = img[..., None], ref[..., None]
    if img.shape[0] < SSIM_WINDOW or img.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {tuple(img.shape[:2])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = gaussian_window()
    C = img.shape[-1]
    stats = _filter_valid(torch.cat([img, ref, img * img, ref * ref, img * ref], dim=-1), w)
    mx, my, sxx, syy, sxy = stats.split(C, dim=-1)
    vx = sxx - mx * mx
    vy = syy - my * my
    vxy = sxy - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * vxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return (num / den).mean()


def dssim_loss(img: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return 1.0 - ssim(img, ref)


def identity_logits(E: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """f(E) = W E + b over the trailing axis of E."""
    if E.shape[-1] != weight.shape[-1]:
        raise ValueError(f"encoding has {E.shape[-1]} components, classifier expects {weight.shape[-1]}")
    return E @ weight.T + bias


def identity_2d_loss(
    id_feature: torch.Tensor,
    mask: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    alpha: torch.Tensor | None = None,
    alpha_threshold: float = 0.5,
) -> torch.Tensor:
    """Cross-entropy of per-pixel classified features against mask ids.

    Pixels with accumulated alpha below the threshold carry no id and are
    excluded; with no pixel left the loss is 0.
    """
    K = weight.shape[0]
    mask = torch.as_tensor(mask).long()
    if mask.shape != id_feature.shape[:-1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match feature image {tuple(id_feature.shape[:-1])}")
    if mask.numel() and (int(mask.max()) >= K or int(mask.min()) < 0):
        raise ValueError(f"mask id {int(mask.max())} outside the classifier's {K} classes")
    keep = torch.ones_like(mask, dtype=torch.bool) if alpha is None else alpha.detach() >= alpha_threshold
    if not bool(keep.any()):
        return 0.0 * id_feature.sum()
    logits = identity_logits(id_feature[keep], weight, bias)
    return torch.nn.functional.cross_entropy(logits, mask[keep], reduction="mean")


def knn_indices(points: torch.Tensor, queries: torch.Tensor, k: int) -> torch.Tensor:
    """k nearest points to each query (by index into ``points``), excluding the query itself."""
    d = torch.cdist(points[queries], points)
    d[torch.arange(len(queries)), queries] = math.inf
    return torch.sort(d, dim=1, stable=True).indices[:, :k]


def sample_splats(n: int, m: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randperm(n, generator=gen)[: min(m, n)]


def identity_3d_loss(scene: SpectralScene, band, k: int = 5, m: int = 1000, seed: int = 0) -> torch.Tensor:
    """Mean KL(softmax(e_j) || softmax(e_i)) over sampled splats j and their k neighbours i."""
    N = scene.num_gaussians
    if N <= k:
        raise ValueError(f"identity_3d_loss needs more than k={k} splats, scene has {N}")
    enc = scene.encodings[scene.band_index(band)]
    sample = sample_splats(N, m, seed)
    nbrs = knn_indices(scene.means.detach(), sample, k)
    logp = torch.log_softmax(enc[sample], dim=-1)[:, None, :]
    logq = torch.log_softmax(enc[nbrs], dim=-1)
    kl = (logp.exp() * (logp - logq)).sum(-1)
    return kl.sum() / (len(sample) * k)


@dataclass
class LossTerms:
    l1: torch.Tensor
    dssim: torch.Tensor
    l2d: torch.Tensor
    l3d: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l1", "dssim", "l2d", "l3d", "total")}


def render_loss_band(
    color: torch.Tensor,
    ref: torch.Tensor,
    weights: LossConfig,
    scene: SpectralScene | None = None,
    band=None,
    id_feature: torch.Tensor | None = None,
    alpha: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
    seed: int = 0,
) -> LossTerms:
    """(1 - g) L1 + g D-SSIM + g2d L2d + g3d L3d for one band and view.

    Terms with zero weight are reported as 0 and not evaluated.
    """
    zero = torch.zeros((), dtype=DTYPE)
    g = weights.gamma
    l1 = l1_loss(color, ref) if g < 1 else zero
    ds = dssim_loss(color, ref) if g > 0 else zero
    l2d = zero
    if weights.gamma_2d > 0 and mask is not None:
        b = scene.band_index(band)
        l2d = identity_2d_loss(
            id_feature, mask, scene.clf_weight[b], scene.clf_bias[b], alpha, weights.id_alpha_threshold
        )
    l3d = zero
    if weights.gamma_3d > 0:
        l3d = identity_3d_loss(scene, band, weights.knn_k, weights.sample_m, seed)
    total = (1 - g) * l1 + g * ds + weights.gamma_2d * l2d + weights.gamma_3d * l3d
    return LossTerms(l1, ds, l2d, l3d, total)


def total_loss(per_band: Iterable[torch.Tensor]) -> torch.Tensor:
    """Plain sum of the per-band losses."""
    out = torch.zeros((), dtype=DTYPE)
    for value in per_band:
        out = out + value
    return out
