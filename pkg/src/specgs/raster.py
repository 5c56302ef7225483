"""Tile-parallel differentiable rasterizer for spectral Gaussians.

Splats are projected with the EWA approximation, sorted once per view by
depth (ties by index) and alpha-composited front to back. Every band's colour
and identity feature is composited in the same pass, since geometry is shared.

Compositing uses sequential scans (cumprod / cumsum) over each tile's slice of
the global depth order. Splats that do not touch a pixel contribute exact
zeros, so a pixel's value is bitwise independent of tile size and of how
tiles are scheduled across threads. The backward pass recomputes each tile
under autograd and reduces the per-tile gradients in fixed tile order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import ColorConfig, RasterConfig, ShadingConfig
from .scene import DTYPE, ENCODING_DIM, SpectralScene, splat_normal
from .shading import build_mips, shade, splat_specular_light


@dataclass
class CameraView:
    """Pinhole camera, OpenCV axes (x right, y down, z forward)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: torch.Tensor  # (4, 4)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = torch.as_tensor(np.asarray(self.world_to_camera), dtype=DTYPE).clone()
        if self.world_to_camera.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be > 0")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        R = self.rotation
        if float((R @ R.T - torch.eye(3, dtype=DTYPE)).abs().max()) > 1e-4:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def rotation(self) -> torch.Tensor:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> torch.Tensor:
        return self.world_to_camera[:3, 3]

    @property
    def position(self) -> torch.Tensor:
        return -self.rotation.T @ self.translation

    @classmethod
    def from_fov(cls, world_to_camera, width: int, height: int, fov_x: float, **kw) -> "CameraView":
        f = 0.5 * width / math.tan(0.5 * fov_x)
        return cls(width, height, f, f, width / 2.0, height / 2.0, world_to_camera, **kw)

    @classmethod
    def look_at(cls, eye, target, up, width: int, height: int, fov_x: float, **kw) -> "CameraView":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0] if abs(z[0]) < 0.9 else [0.0, 1.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        w2c = np.eye(4)
        w2c[:3, :3] = np.stack([x, y, z])
        w2c[:3, 3] = -w2c[:3, :3] @ eye
        return cls.from_fov(w2c, width, height, fov_x, **kw)


@dataclass
class Projected:
    mean2d: torch.Tensor  # (N, 2) pixels
    cov2d: torch.Tensor  # (N, 2, 2)
    depth: torch.Tensor  # (N,)
    view_dir: torch.Tensor  # (N, 3) splat toward camera
    radius: torch.Tensor  # (N,) bounding radius of the coverage ellipse, pixels
    visible: torch.Tensor  # (N,) bool


def project(
    means: torch.Tensor,
    cov3d: torch.Tensor,
    cam: CameraView,
    cov2d_reg: float = 0.3,
    sigma_extent: float = 3.0,
) -> Projected:
    """Perspective EWA projection; culls by depth range and by viewport overlap."""
    R, t = cam.rotation, cam.translation
    p = means @ R.T + t
    x, y, z = p.unbind(-1)
    zs = torch.where(z.abs() > 1e-12, z, torch.full_like(z, 1e-12))
    mean2d = torch.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], dim=-1)
    zero = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([cam.fx / zs, zero, -cam.fx * x / zs**2], -1),
            torch.stack([zero, cam.fy / zs, -cam.fy * y / zs**2], -1),
        ],
        dim=-2,
    )
    T = J @ R
    cov2d = T @ cov3d @ T.transpose(-1, -2) + cov2d_reg * torch.eye(2, dtype=DTYPE)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + torch.sqrt((0.25 * (a - c) ** 2 + b * b).clamp_min(0.0))
    radius = sigma_extent * torch.sqrt(lam_max)
    view_dir = cam.position - means
    view_dir = view_dir / view_dir.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    with torch.no_grad():
        visible = (z > cam.near) & (z < cam.far)
        mx, my, r = mean2d[:, 0], mean2d[:, 1], radius
        # pixel centres span [0.5, W - 0.5] x [0.5, H - 0.5]
        visible &= (mx + r >= 0.5) & (mx - r <= cam.width - 0.5)
        visible &= (my + r >= 0.5) & (my - r <= cam.height - 0.5)
        visible &= torch.isfinite(radius)
    return Projected(mean2d, cov2d, z, view_dir, radius, visible)


def conic_of(cov2d: torch.Tensor) -> torch.Tensor:
    """Inverse 2D covariance packed as (A, B, C) with d^T S^-1 d = A dx^2 + 2B dx dy + C dy^2."""
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1)


def alpha_at_pixel(
    mean2d: torch.Tensor,
    conic: torch.Tensor,
    opacity: torch.Tensor,
    pixels: torch.Tensor,
    alpha_max: float = 0.999,
    sigma_extent: float = 3.0,
    alpha_min: float = 1.0 / 255.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """alpha' for every (pixel, splat) pair, shapes (P, S), plus the keep mask.

    A pair is kept when the pixel lies inside the splat's sigma_extent ellipse
    and alpha' >= alpha_min.
    """
    dx = pixels[:, None, 0] - mean2d[None, :, 0]
    dy = pixels[:, None, 1] - mean2d[None, :, 1]
    A, B, C = conic[:, 0], conic[:, 1], conic[:, 2]
    d2 = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
    alpha = (opacity * torch.exp(-0.5 * d2)).clamp_max(alpha_max)
    keep = (d2 <= sigma_extent**2) & (alpha >= alpha_min)
    return alpha, keep


def composite(
    alphas: torch.Tensor,
    values: torch.Tensor,
    depths: torch.Tensor | None = None,
    transmittance_min: float = 1e-4,
    check_sorted: bool = False,
    carry: tuple | None = None,
    ordered: bool = True,
):
    """Front-to-back compositing of (P, S) alphas over (S, C) values.

    Returns (out (P, C), transmittance (P,), done (P,), weights (P, S)). A
    contribution is used only while the transmittance after it stays
    >= ``transmittance_min``; the first one that would break this terminates
    the pixel, and it and everything behind it are dropped. ``carry`` is the
    (out, transmittance, done) triple from earlier chunks of the same list.
    ``ordered`` sums contributions one at a time in depth order, making the
    result independent of how many non-contributing entries the list holds;
    otherwise a matrix product is used (same value up to rounding).
    """
    if check_sorted and depths is not None and depths.numel() > 1:
        if bool((depths[1:] < depths[:-1]).any()):
            raise ValueError("contributions are not sorted front-to-back")
    P, S = alphas.shape
    if carry is None:
        acc0 = torch.zeros(P, values.shape[1], dtype=alphas.dtype)
        T0 = torch.ones(P, dtype=alphas.dtype)
        done0 = torch.zeros(P, dtype=torch.bool)
    else:
        acc0, T0, done0 = carry
    with torch.no_grad():
        t_after = torch.cumprod(torch.cat([T0[:, None], 1.0 - alphas], dim=1), dim=1)[:, 1:]
        included = (t_after >= transmittance_min) & ~done0[:, None]
        done = done0 | ~included[:, -1] if S > 0 else done0
    a2 = alphas * included
    T = torch.cumprod(torch.cat([T0[:, None], 1.0 - a2], dim=1), dim=1)
    weights = a2 * T[:, :-1]
    if ordered:
        # strictly front-to-back; zero weights add exact zeros
        out = acc0
        for j in range(S):
            out = out + weights[:, j, None] * values[j]
    else:
        out = acc0 + weights @ values
    return out, T[:, -1], done, weights


# -- tiled compositing --------------------------------------------------------

_CHUNK = 64


def _pixel_grid(x0: int, y0: int, x1: int, y1: int) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.arange(y0, y1, dtype=DTYPE) + 0.5, torch.arange(x0, x1, dtype=DTYPE) + 0.5, indexing="ij"
    )
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def _tile_forward(pixels, mean2d, conic, opacity, values, rcfg: RasterConfig, want_log=False, ordered=True):
    P = pixels.shape[0]
    carry = None
    log = [] if want_log else None
    for s0 in range(0, mean2d.shape[0], _CHUNK):
        sl = slice(s0, s0 + _CHUNK)
        alpha, keep = alpha_at_pixel(
            mean2d[sl], conic[sl], opacity[sl], pixels, rcfg.alpha_max, rcfg.sigma_extent, rcfg.alpha_min
        )
        a1 = torch.where(keep, alpha, torch.zeros_like(alpha))
        *carry, w = composite(
            a1, values[sl], transmittance_min=rcfg.transmittance_min, carry=carry, ordered=ordered
        )
        if log is not None:
            log.append((s0, (w > 0).detach(), a1.detach()))
        if bool(carry[2].all()):
            break
    if carry is None:
        return torch.zeros(P, values.shape[1], dtype=DTYPE), torch.ones(P, dtype=DTYPE), log
    return carry[0], carry[1], log


@dataclass
class _Tiles:
    rects: list  # (x0, y0, x1, y1)
    members: list  # LongTensor of sorted-splat positions per tile


def _assign_tiles(mean2d, radius, width, height, tile) -> _Tiles:
    mx, my, r = mean2d[:, 0], mean2d[:, 1], radius
    rects, members = [], []
    for y0 in range(0, height, tile):
        for x0 in range(0, width, tile):
            x1, y1 = min(x0 + tile, width), min(y0 + tile, height)
            # conservative box test against the tile's pixel-centre span
            hit = (mx + r >= x0 + 0.5) & (mx - r <= x1 - 0.5) & (my + r >= y0 + 0.5) & (my - r <= y1 - 0.5)
            rects.append((x0, y0, x1, y1))
            members.append(torch.nonzero(hit, as_tuple=False).flatten())
    return _Tiles(rects, members)


def _run(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, opacity, values, radius, width, height, rcfg, threads):
        tiles = _assign_tiles(mean2d, radius, width, height, rcfg.tile_size)
        C = values.shape[1]

        def job(i):
            x0, y0, x1, y1 = tiles.rects[i]
            idx = tiles.members[i]
            acc, T, _ = _tile_forward(_pixel_grid(x0, y0, x1, y1), mean2d[idx], conic[idx], opacity[idx], values[idx], rcfg)
            return acc, T

        results = _run(job, range(len(tiles.rects)), threads)
        image = torch.zeros(height, width, C, dtype=DTYPE)
        trans = torch.ones(height, width, dtype=DTYPE)
        for (x0, y0, x1, y1), (acc, T) in zip(tiles.rects, results):
            image[y0:y1, x0:x1] = acc.reshape(y1 - y0, x1 - x0, C)
            trans[y0:y1, x0:x1] = T.reshape(y1 - y0, x1 - x0)
        ctx.save_for_backward(mean2d, conic, opacity, values)
        ctx.tiles, ctx.rcfg, ctx.threads = tiles, rcfg, threads
        return image, 1.0 - trans

    @staticmethod
    def backward(ctx, g_image, g_alpha):
        mean2d, conic, opacity, values = ctx.saved_tensors
        tiles, rcfg = ctx.tiles, ctx.rcfg
        C = values.shape[1]

        def job(i):
            x0, y0, x1, y1 = tiles.rects[i]
            idx = tiles.members[i]
            if idx.numel() == 0:
                return None
            leaves = [t[idx].detach().requires_grad_() for t in (mean2d, conic, opacity, values)]
            with torch.enable_grad():
                acc, T, _ = _tile_forward(_pixel_grid(x0, y0, x1, y1), *leaves, rcfg, ordered=False)
                outs = [acc, 1.0 - T]
                gouts = [
                    g_image[y0:y1, x0:x1].reshape(-1, C),
                    g_alpha[y0:y1, x0:x1].reshape(-1),
                ]
                grads = torch.autograd.grad(outs, leaves, gouts, allow_unused=True)
            return [torch.zeros_like(l) if g is None else g for g, l in zip(grads, leaves)]

        results = _run(job, range(len(tiles.rects)), ctx.threads)
        totals = [torch.zeros_like(t) for t in (mean2d, conic, opacity, values)]
        for idx, grads in zip(tiles.members, results):
            if grads is None:
                continue
            for total, g in zip(totals, grads):
                total.index_add_(0, idx, g)
        return (*totals, None, None, None, None, None)


# -- scene rendering ------------------------------------------------------------

@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    id_feature: torch.Tensor  # (H, W, 16)
    alpha: torch.Tensor  # (H, W)
    contributions: list | None = field(default=None)  # [row][col] -> [(gaussian index, alpha')]


def splat_colors(
    scene: SpectralScene,
    cam: CameraView,
    band,
    view_dir: torch.Tensor,
    mips=None,
    shading: ShadingConfig | None = None,
    color: ColorConfig | None = None,
) -> torch.Tensor:
    """Shaded display-domain colour of every splat for one band, (N, 3)."""
    shading = shading or ShadingConfig()
    color = color or ColorConfig()
    dec = scene.decode(band)
    if mips is None:
        mips = build_mips(scene.env[scene.env_index(band)], scene.env_levels)
    n = splat_normal(scene.log_scales, scene.rotations, scene.normal_params, view_dir)
    light = splat_specular_light(
        mips,
        n,
        view_dir,
        dec.roughness,
        shading.roughness_floor,
        shading.use_quadrature,
        shading.quad_theta,
        shading.quad_phi,
        shading.lobe,
    )
    return shade(dec.diffuse, dec.specular, light, color.gamma_mode, color.gamma)


def render_bands(
    scene: SpectralScene,
    cam: CameraView,
    bands: Sequence | None = None,
    raster: RasterConfig | None = None,
    shading: ShadingConfig | None = None,
    color: ColorConfig | None = None,
    threads: int | None = None,
    record_contributions: bool = False,
) -> dict[str, RenderOutput]:
    """Render several bands in one compositing pass; keys are band names."""
    raster = raster or RasterConfig()
    threads = raster.threads if threads is None else threads
    names = [scene.band_table.bands[scene.band_index(b)].name for b in (bands or scene.band_table.names)]
    H, W = cam.height, cam.width
    N = scene.num_gaussians

    proj = project(scene.means, scene.covariances(), cam, raster.cov2d_reg, raster.sigma_extent)
    vis = torch.nonzero(proj.visible, as_tuple=False).flatten()
    order = vis[torch.sort(proj.depth.detach()[vis], stable=True).indices]
    if raster.check_sorted and order.numel() > 1:
        d = proj.depth.detach()[order]
        if bool((d[1:] < d[:-1]).any()):
            raise ValueError("depth order violated")

    per_band = []
    mips_cache: dict[int, list] = {}
    for name in names:
        e = scene.env_index(name)
        if e not in mips_cache:
            mips_cache[e] = build_mips(scene.env[e], scene.env_levels)
        rgb = splat_colors(scene, cam, name, proj.view_dir, mips_cache[e], shading, color)
        enc = scene.encodings[scene.band_index(name)]
        per_band.append(torch.cat([rgb, enc], dim=-1))
    width = 3 + ENCODING_DIM
    if N == 0 or order.numel() == 0:
        image = torch.zeros(H, W, width * len(names), dtype=DTYPE)
        alpha = torch.zeros(H, W, dtype=DTYPE)
        if N > 0:  # keep the graph connected so gradients are zero, not missing
            image = image + 0.0 * torch.cat(per_band, -1).sum()
    else:
        values = torch.cat(per_band, dim=-1)[order]
        opacity = torch.sigmoid(scene.opacity_logits).clamp(1e-7, 1 - 1e-7)[order]
        image, alpha = _Rasterize.apply(
            proj.mean2d[order], conic_of(proj.cov2d[order]), opacity, values, proj.radius.detach()[order], W, H, raster, threads
        )

    log = _contribution_log(scene, cam, proj, order, raster) if record_contributions else None
    out = {}
    for i, name in enumerate(names):
        chunk = image[..., i * width : (i + 1) * width]
        out[name] = RenderOutput(chunk[..., :3], chunk[..., 3:], alpha, log)
    return out


def render(scene: SpectralScene, cam: CameraView, band, **kw) -> RenderOutput:
    name = scene.band_table.bands[scene.band_index(band)].name
    return render_bands(scene, cam, [name], **kw)[name]


def _contribution_log(scene, cam, proj, order, raster: RasterConfig) -> list:
    H, W = cam.height, cam.width
    rows = [[[] for _ in range(W)] for _ in range(H)]
    if order.numel() == 0:
        return rows
    with torch.no_grad():
        opacity = torch.sigmoid(scene.opacity_logits).clamp(1e-7, 1 - 1e-7)[order]
        conic = conic_of(proj.cov2d[order])
        mean2d = proj.mean2d[order]
        pixels = _pixel_grid(0, 0, W, H)
        dummy = torch.zeros(order.numel(), 1, dtype=DTYPE)
        _, _, log = _tile_forward(pixels, mean2d, conic, opacity, dummy, raster, want_log=True)
        for s0, used, a1 in log:
            pix, pos = torch.nonzero(used, as_tuple=True)
            for p, j in zip(pix.tolist(), pos.tolist()):
                rows[p // W][p % W].append((int(order[s0 + j]), float(a1[p, j])))
    return rows
