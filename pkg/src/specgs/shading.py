"""Per-band splat shading: diffuse colour plus tinted GGX specular environment light.

Environment maps are equirectangular (rows = polar angle from +z, columns =
azimuth). The specular integral has two evaluators: a fixed hemisphere
quadrature (reference and gradient oracle) and a mip chain of GGX-prefiltered
maps looked up trilinearly (used for training).
"""

from __future__ import annotations

import math
from functools import lru_cache

import torch

from .scene import DTYPE

_SRGB_THRESHOLD = 0.0031308


def gamma_tonemap(x: torch.Tensor, mode: str = "srgb", gamma: float = 2.2) -> torch.Tensor:
    """Differentiable twin of ``color.gamma_encode`` (negative inputs clamp to 0)."""
    x = x.clamp_min(0.0)
    if mode == "power":
        # offset keeps the derivative finite at 0
        return (x + 1e-12) ** (1.0 / gamma)
    hi = 1.055 * x.clamp_min(_SRGB_THRESHOLD) ** (1.0 / 2.4) - 0.055
    return torch.where(x <= _SRGB_THRESHOLD, 12.92 * x, hi)


def reflect(omega_o: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    return 2.0 * (omega_o * n).sum(-1, keepdim=True) * n - omega_o


def ggx_ndf(cos_rm, rho) -> torch.Tensor:
    """Trowbridge-Reitz distribution with alpha = rho^2; zero for cos < 0."""
    cos_rm = torch.as_tensor(cos_rm, dtype=DTYPE)
    rho = torch.as_tensor(rho, dtype=DTYPE)
    if bool((rho <= 0).any()):
        raise ValueError("degenerate lobe: roughness must be > 0")
    a2 = rho**4
    c = cos_rm.clamp(-1.0, 1.0)
    d = c * c * (a2 - 1.0) + 1.0
    return torch.where(c < 0, torch.zeros_like(c), a2 / (math.pi * d * d))


# -- equirectangular helpers -------------------------------------------------

def texel_directions(height: int, width: int) -> torch.Tensor:
    theta = (torch.arange(height, dtype=DTYPE) + 0.5) * math.pi / height
    phi = (torch.arange(width, dtype=DTYPE) + 0.5) * 2 * math.pi / width - math.pi
    st, ct = torch.sin(theta)[:, None], torch.cos(theta)[:, None]
    return torch.stack(
        [st * torch.cos(phi)[None], st * torch.sin(phi)[None], ct.expand(height, width)], dim=-1
    )


def row_solid_angles(height: int, width: int) -> torch.Tensor:
    edges = torch.arange(height + 1, dtype=DTYPE) * math.pi / height
    return (2 * math.pi / width) * (torch.cos(edges[:-1]) - torch.cos(edges[1:]))


def bilinear_lookup(env: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Sample an (H, W, C) equirect map along unit directions (..., 3)."""
    H, W = env.shape[:2]
    x, y, z = dirs.unbind(-1)
    rxy = torch.sqrt(x * x + y * y + 1e-30)
    theta = torch.atan2(rxy, z)
    phi = torch.atan2(y, x)
    px = (phi + math.pi) / (2 * math.pi) * W - 0.5
    py = theta / math.pi * H - 0.5
    x0 = torch.floor(px.detach())
    y0 = torch.floor(py.detach())
    wx = (px - x0)[..., None]
    wy = (py - y0)[..., None]
    x0 = x0.long()
    y0 = y0.long()
    xa, xb = x0 % W, (x0 + 1) % W
    ya, yb = y0.clamp(0, H - 1), (y0 + 1).clamp(0, H - 1)
    top = env[ya, xa] * (1 - wx) + env[ya, xb] * wx
    bot = env[yb, xa] * (1 - wx) + env[yb, xb] * wx
    return top * (1 - wy) + bot * wy


# -- prefiltered mip chain ---------------------------------------------------

def level_roughness(level: int, levels: int) -> float:
    return level / (levels - 1) if levels > 1 else 0.0


@lru_cache(maxsize=32)
def _filter_matrix(height: int, width: int, rho: float) -> torch.Tensor:
    d = texel_directions(height, width).reshape(-1, 3)
    sa = row_solid_angles(height, width)[:, None].expand(height, width).reshape(-1)
    c = d @ d.T
    w = ggx_ndf(c, rho) * c.clamp_min(0.0) * sa[None, :]
    return w / w.sum(dim=1, keepdim=True)


def _downsample(env: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return env
    H, W, C = env.shape
    sa = row_solid_angles(H, W)[:, None, None]
    num = (env * sa).reshape(H // factor, factor, W // factor, factor, C).sum(dim=(1, 3))
    den = sa.expand(H, W, 1).reshape(H // factor, factor, W // factor, factor, 1).sum(dim=(1, 3))
    return num / den


MIP_MIN_ROWS = 16


def mip_factor(height: int, level: int) -> int:
    """Downsampling factor of a mip level: 2^level, stopping at MIP_MIN_ROWS rows."""
    f = 1
    while f < 2**level and height // (2 * f) >= MIP_MIN_ROWS:
        f *= 2
    return f


def build_mips(env: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """GGX-prefiltered mip chain of an (H, W, 3) map; level k has roughness k/(levels-1).

    Level 0 is the base map itself. Level k is the base map area-downsampled by
    2^k (but not below MIP_MIN_ROWS rows, where bilinear lookups of the wide
    lobes would lose accuracy) and convolved with the cosine-weighted GGX lobe
    of its roughness. Differentiable with respect to ``env``.
    """
    H, W = env.shape[:2]
    f = mip_factor(H, levels - 1)
    if H % f or W % f:
        raise ValueError(f"env map {H}x{W} not divisible by {f}")
    mips = [env]
    for k in range(1, levels):
        small = _downsample(env, mip_factor(H, k))
        h, w = small.shape[:2]
        F = _filter_matrix(h, w, level_roughness(k, levels))
        mips.append((F @ small.reshape(-1, 3)).reshape(h, w, 3))
    return mips


def sample_mips(mips: list[torch.Tensor], dirs: torch.Tensor, level: torch.Tensor) -> torch.Tensor:
    """Trilinear lookup: bilinear in each map, linear between neighbouring levels."""
    L = len(mips)
    if L == 1:
        return bilinear_lookup(mips[0], dirs)
    level = level.clamp(0.0, L - 1)
    l0 = torch.floor(level.detach()).long().clamp(max=L - 2)
    t = (level - l0.to(DTYPE))[..., None]
    samples = torch.stack([bilinear_lookup(m, dirs) for m in mips], dim=0)  # (L, N, 3)
    idx = torch.arange(dirs.shape[0])
    return samples[l0, idx] * (1 - t) + samples[l0 + 1, idx] * t


def specular_prefiltered(mips: list[torch.Tensor], r: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """Plain trilinear lookup at ``r`` with level = rho * (levels - 1)."""
    return sample_mips(mips, r, rho * (len(mips) - 1))


# -- split-sum lobe statistics -------------------------------------------------
#
# The quadrature integrand weights radiance by w(x) = D(x.r, rho) (x.n)_+.
# A prefiltered lookup reproduces that integral exactly for radiance linear in
# direction when it (a) scales by the total mass of w, (b) samples along the
# mean direction of w and (c) picks the mip blend whose filter has the same
# mean cosine as the length of w's mean vector.

LUT_RESOLUTION = 64


@lru_cache(maxsize=4)
def lobe_moment_table(resolution: int = LUT_RESOLUTION, samples: int = 128) -> torch.Tensor:
    """(3, R, R) table over (rho, c = w_o.n): mass, mean component along n, and
    mean component along (c n - r) divided by sin(theta_o).

    With n = z and r = (-s, 0, c) the mean vector is mu_n n + mu_x x, and
    x = (c n - r) / s. Stratified samples come from two densities, the GGX lobe
    about r (pdf D(x.r) x.r) and the cosine lobe about n, combined with the
    balance heuristic so neither heavy tail dominates.
    """
    rhos = torch.linspace(0.0, 1.0, resolution, dtype=DTYPE).clamp_min(1e-3)
    c = torch.linspace(0.0, 1.0, resolution, dtype=DTYPE)[:, None]
    s_o = torch.sqrt((1 - c * c).clamp_min(0.0))
    xi = (torch.arange(samples, dtype=DTYPE) + 0.5) / samples
    x1, x2 = torch.meshgrid(xi, xi, indexing="ij")
    x1, x2 = x1.reshape(1, -1), x2.reshape(1, -1)
    cos_phi = torch.cos(2 * math.pi * x2)
    ct_n, st_n = torch.sqrt(1 - x1), torch.sqrt(x1)  # cosine-weighted about n
    n_dot_r = -s_o * st_n * cos_phi + c * ct_n
    nx = (st_n * cos_phi).expand_as(n_dot_r)
    out = torch.empty(3, resolution, resolution, dtype=DTYPE)
    for i, rho in enumerate(rhos):
        u = torch.sqrt((1 - x1) / (1 + (rho**4 - 1) * x1))  # GGX-sampled cos to r
        su = torch.sqrt((1 - u * u).clamp_min(0.0))
        r_dot_n = u * c + su * cos_phi * s_o
        rx = -u * s_o + su * cos_phi * c

        d_r = ggx_ndf(u, rho)
        d_n = ggx_ndf(n_dot_r, rho)
        wt_r = d_r * r_dot_n.clamp_min(0.0) / (d_r * u + r_dot_n.clamp_min(0.0) / math.pi)
        wt_n = d_n * ct_n / (d_n * n_dot_r.clamp_min(0.0) + ct_n / math.pi)
        mass = (wt_r + wt_n).mean(1)
        out[0, i] = mass
        out[1, i] = (wt_r * r_dot_n + wt_n * ct_n).mean(1) / mass
        out[2, i] = (wt_r * rx + wt_n * nx).mean(1) / mass
    out[2, :, :-1] /= s_o[:-1, 0]
    out[2, :, -1] = out[2, :, -2]
    return out


def _lut_lookup(table: torch.Tensor, rho: torch.Tensor, cos_o: torch.Tensor) -> torch.Tensor:
    R = table.shape[-1] - 1
    x = rho.clamp(0.0, 1.0) * R
    y = cos_o.clamp(0.0, 1.0) * R
    x0 = torch.floor(x.detach()).long().clamp(max=R - 1)
    y0 = torch.floor(y.detach()).long().clamp(max=R - 1)
    tx, ty = (x - x0.to(DTYPE))[..., None], (y - y0.to(DTYPE))[..., None]
    t = table.permute(1, 2, 0)
    a = t[x0, y0] * (1 - ty) + t[x0, y0 + 1] * ty
    b = t[x0 + 1, y0] * (1 - ty) + t[x0 + 1, y0 + 1] * ty
    return a * (1 - tx) + b * tx


def lobe_norm(rho: torch.Tensor, cos_o: torch.Tensor) -> torch.Tensor:
    """Mass of D(x.r) (x.n)_+ over the sphere, interpolated from the table."""
    return _lut_lookup(lobe_moment_table(), rho, cos_o)[..., 0]


def filter_mean_cosine(rho: float) -> float:
    """Mean of x.v under the normalised mip filter D(x.v, rho) (x.v)_+."""
    if rho <= 0:
        return 1.0
    u = (torch.arange(20000, dtype=DTYPE) + 0.5) / 20000
    w = ggx_ndf(u, rho) * u
    return float((w * u).sum() / w.sum())


@lru_cache(maxsize=16)
def _level_cosines(levels: int) -> torch.Tensor:
    return torch.tensor([filter_mean_cosine(level_roughness(k, levels)) for k in range(levels)], dtype=DTYPE)


def level_for_mean_cosine(kappa: torch.Tensor, levels: int) -> torch.Tensor:
    """Fractional mip level whose linear blend of filter mean cosines equals ``kappa``."""
    if levels == 1:
        return torch.zeros_like(kappa)
    ks = _level_cosines(levels)  # decreasing in level
    kappa = kappa.clamp(float(ks[-1]), float(ks[0]))
    # number of level cosines strictly above kappa picks the bracketing segment
    seg = (ks[None, :] > kappa.detach()[..., None]).sum(-1).clamp(1, levels - 1) - 1
    hi, lo = ks[seg], ks[seg + 1]
    return seg.to(DTYPE) + (hi - kappa) / (hi - lo)


def specular_light_prefiltered(
    mips: list[torch.Tensor], n: torch.Tensor, omega_o: torch.Tensor, rho: torch.Tensor
) -> torch.Tensor:
    """Split-sum specular light: moment-matched mip lookup scaled by the lobe mass."""
    cos_o = (omega_o * n).sum(-1)
    r = reflect(omega_o, n)
    stats = _lut_lookup(lobe_moment_table(), rho, cos_o)
    mass, mu_n, mu_x = stats.unbind(-1)
    mu = mu_n[..., None] * n + mu_x[..., None] * (cos_o[..., None] * n - r)
    length = mu.norm(dim=-1).clamp_min(1e-12)
    level = level_for_mean_cosine(length, len(mips))
    return sample_mips(mips, mu / length[..., None], level) * mass[..., None]


# -- hemisphere quadrature ---------------------------------------------------

def tangent_frame(n: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    helper = torch.zeros_like(n)
    use_x = n[..., 0].abs() < 0.9
    helper[..., 0] = use_x.to(DTYPE)
    helper[..., 1] = (~use_x).to(DTYPE)
    t = torch.linalg.cross(helper, n)
    t = t / t.norm(dim=-1, keepdim=True)
    b = torch.linalg.cross(n, t)
    return t, b


def hemisphere_grid(n: torch.Tensor, n_theta: int = 32, n_phi: int = 64):
    """Equal-solid-angle cell centres around each normal: (N, G, 3) directions, scalar dw."""
    cos_t = 1.0 - (torch.arange(n_theta, dtype=DTYPE) + 0.5) / n_theta
    sin_t = torch.sqrt(1.0 - cos_t**2)
    phi = (torch.arange(n_phi, dtype=DTYPE) + 0.5) * 2 * math.pi / n_phi
    local = torch.stack(
        [
            (sin_t[:, None] * torch.cos(phi)[None]).reshape(-1),
            (sin_t[:, None] * torch.sin(phi)[None]).reshape(-1),
            cos_t[:, None].expand(n_theta, n_phi).reshape(-1),
        ],
        dim=-1,
    )
    t, b = tangent_frame(n)
    dirs = local[None, :, 0:1] * t[:, None] + local[None, :, 1:2] * b[:, None] + local[None, :, 2:3] * n[:, None]
    return dirs, 2 * math.pi / (n_theta * n_phi)


def specular_quadrature(
    env: torch.Tensor,
    n: torch.Tensor,
    omega_o: torch.Tensor,
    rho: torch.Tensor,
    n_theta: int = 32,
    n_phi: int = 64,
    lobe: str = "reflection",
) -> torch.Tensor:
    """Sum of L(w_i) D(., rho) (w_i . n) dw over a hemisphere grid about each normal."""
    dirs, dw = hemisphere_grid(n, n_theta, n_phi)
    radiance = bilinear_lookup(env, dirs)  # (N, G, 3)
    cos_n = (dirs * n[:, None]).sum(-1)
    if lobe == "reflection":
        r = reflect(omega_o, n)
        D = ggx_ndf((dirs * r[:, None]).sum(-1), rho[:, None])
        weight = D * cos_n * dw
    elif lobe == "half_vector":
        h = dirs + omega_o[:, None]
        h = h / h.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        D = ggx_ndf((h * n[:, None]).sum(-1), rho[:, None])
        jac = 4.0 * (h * omega_o[:, None]).sum(-1).abs().clamp_min(1e-6)
        weight = D * cos_n * dw / jac
    else:
        raise ValueError(f"unknown lobe convention '{lobe}'")
    return (radiance * weight[..., None]).sum(1)


# -- shading -----------------------------------------------------------------

def shade(
    diffuse: torch.Tensor,
    specular_tint: torch.Tensor,
    specular_light: torch.Tensor,
    gamma_mode: str = "srgb",
    gamma: float = 2.2,
) -> torch.Tensor:
    """clip01(gamma(c_d + s * L_s)) per splat."""
    return gamma_tonemap(diffuse + specular_tint * specular_light, gamma_mode, gamma).clamp(0.0, 1.0)


def splat_specular_light(
    env_or_mips,
    n: torch.Tensor,
    omega_o: torch.Tensor,
    rho: torch.Tensor,
    roughness_floor: float = 0.02,
    use_quadrature: bool = False,
    quad_theta: int = 32,
    quad_phi: int = 64,
    lobe: str = "reflection",
) -> torch.Tensor:
    """Specular light per splat; zero where the splat faces away from the viewer."""
    rho = rho.clamp_min(roughness_floor)
    if use_quadrature:
        env = env_or_mips[0] if isinstance(env_or_mips, (list, tuple)) else env_or_mips
        light = specular_quadrature(env, n, omega_o, rho, quad_theta, quad_phi, lobe)
    else:
        light = specular_light_prefiltered(env_or_mips, n, omega_o, rho)
    front = ((omega_o * n).sum(-1, keepdim=True) > 0).to(DTYPE)
    return light * front
