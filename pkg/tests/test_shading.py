import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from specgs.color import gamma_encode
from specgs.scene import DTYPE
from specgs.shading import (
    bilinear_lookup,
    build_mips,
    gamma_tonemap,
    ggx_ndf,
    lobe_norm,
    mip_factor,
    reflect,
    row_solid_angles,
    shade,
    specular_light_prefiltered,
    specular_quadrature,
    splat_specular_light,
    texel_directions,
)


def unit(v):
    v = torch.as_tensor(v, dtype=DTYPE)
    return v / v.norm(dim=-1, keepdim=True)


def random_samples(count, seed, rho_lo, rho_hi):
    """Normals, view directions in the normal's hemisphere, and roughness values."""
    g = torch.Generator().manual_seed(seed)
    n = unit(torch.randn(count, 3, generator=g, dtype=DTYPE))
    wo = unit(torch.randn(count, 3, generator=g, dtype=DTYPE))
    wo = torch.where((wo * n).sum(-1, keepdim=True) < 0, -wo, wo)
    rho = rho_lo + (rho_hi - rho_lo) * torch.rand(count, generator=g, dtype=DTYPE)
    return n, wo, rho


def smooth_envs(H=64, W=128):
    d = texel_directions(H, W)
    s = unit([0.3, 0.2, 0.93])
    gradient = 1.0 + 0.6 * d[..., :1] - 0.3 * d[..., 1:2] + 0.4 * d[..., 2:3] * torch.tensor([1.0, 0.8, 0.6], dtype=DTYPE)
    sky = (0.5 + torch.exp(2 * ((d * s).sum(-1, keepdim=True) - 1))) * torch.tensor([1.0, 0.9, 0.7], dtype=DTYPE)
    return {"gradient": gradient.expand(H, W, 3).clone(), "sky": sky.expand(H, W, 3).clone()}


# -- reflection and GGX ---------------------------------------------------------

def test_reflect_examples():
    n = unit([[0.0, 0.0, 1.0]])
    torch.testing.assert_close(reflect(n, n), n)
    wo = unit([[1.0, 0.0, 0.0]])
    torch.testing.assert_close(reflect(wo, n), -wo)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reflect_preserves_angle(seed):
    g = torch.Generator().manual_seed(seed)
    n = unit(torch.randn(1, 3, generator=g, dtype=DTYPE))
    wo = unit(torch.randn(1, 3, generator=g, dtype=DTYPE))
    r = reflect(wo, n)
    assert abs(float(r.norm()) - 1.0) < 1e-12
    a_in = math.acos(max(-1.0, min(1.0, float((wo * n).sum()))))
    a_out = math.acos(max(-1.0, min(1.0, float((r * n).sum()))))
    assert abs(a_in - a_out) < 1e-12 or abs(float((r * n).sum() - (wo * n).sum())) < 1e-15


def test_ggx_closed_form_values():
    assert float(ggx_ndf(1.0, 1.0)) == pytest.approx(1 / math.pi, rel=1e-15)
    for rho in (0.3, 0.6, 0.9):
        a2 = rho**4
        assert float(ggx_ndf(0.0, rho)) == pytest.approx(a2 / math.pi, rel=1e-14)
        assert float(ggx_ndf(1.0, rho)) == pytest.approx(1 / (math.pi * a2), rel=1e-12)
    assert float(ggx_ndf(-0.5, 0.5)) == 0.0
    with pytest.raises(ValueError, match="degenerate lobe"):
        ggx_ndf(0.5, 0.0)


@pytest.mark.parametrize("rho", [0.2, 0.4, 0.6, 0.8, 1.0])
def test_ggx_projected_hemisphere_integral(rho):
    # 10^4 midpoint samples in cos(theta); the azimuth integrates to 2 pi exactly
    u = (np.arange(10000) + 0.5) / 10000
    a2 = rho**4
    d = a2 / (math.pi * (u * u * (a2 - 1) + 1) ** 2)
    integral = 2 * math.pi * float(np.sum(d * u)) / 10000
    assert abs(integral - 1.0) <= 0.02
    assert abs(float(2 * math.pi * (ggx_ndf(torch.tensor(u), rho) * torch.tensor(u)).mean()) - integral) < 1e-12


# -- environment maps ---------------------------------------------------------------

def test_solid_angles_sum_to_sphere():
    assert float(row_solid_angles(16, 32).sum() * 32) == pytest.approx(4 * math.pi, rel=1e-12)


def test_bilinear_lookup_hits_texel_centres():
    env = torch.rand(8, 16, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    d = texel_directions(8, 16)
    torch.testing.assert_close(bilinear_lookup(env, d.reshape(-1, 3)), env.reshape(-1, 3), rtol=0, atol=1e-12)


def test_mip_chain_structure():
    env = torch.rand(64, 128, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    mips = build_mips(env, 5)
    assert torch.equal(mips[0], env)
    # halves per level until the MIP_MIN_ROWS floor
    assert [tuple(m.shape) for m in mips] == [(64, 128, 3), (32, 64, 3), (16, 32, 3), (16, 32, 3), (16, 32, 3)]
    assert [mip_factor(64, k) for k in range(5)] == [1, 2, 4, 4, 4]
    assert mip_factor(256, 3) == 8 and mip_factor(8, 2) == 1
    const = build_mips(torch.full((32, 64, 3), 0.7, dtype=DTYPE), 4)
    for m in const:
        torch.testing.assert_close(m, torch.full_like(m, 0.7))
    with pytest.raises(ValueError):
        build_mips(torch.zeros(33, 66, 3, dtype=DTYPE), 4)


def test_mips_are_prefiltered_lobes():
    # a level equals its filter applied to the (downsampled) base map, texel by texel
    env = torch.rand(16, 32, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    mips = build_mips(env, 3)
    d = texel_directions(16, 32).reshape(-1, 3)
    sa = row_solid_angles(16, 32)[:, None].expand(16, 32).reshape(-1)
    i = 77
    c = d @ d[i]
    w = ggx_ndf(c, 1.0) * c.clamp_min(0) * sa
    expect = (w[:, None] * env.reshape(-1, 3)).sum(0) / w.sum()
    torch.testing.assert_close(mips[2].reshape(-1, 3)[i], expect)


# -- specular light --------------------------------------------------------------------

def test_quadrature_zero_and_linearity():
    n, wo, rho = random_samples(5, 0, 0.3, 1.0)
    zero = torch.zeros(16, 32, 3, dtype=DTYPE)
    assert torch.equal(specular_quadrature(zero, n, wo, rho), torch.zeros(5, 3, dtype=DTYPE))
    one = specular_quadrature(torch.ones(16, 32, 3, dtype=DTYPE), n, wo, rho)
    three = specular_quadrature(torch.full((16, 32, 3), 3.0, dtype=DTYPE), n, wo, rho)
    torch.testing.assert_close(three, 3 * one)
    assert bool((one >= 0).all())


def test_delta_lobe_limit():
    # bright plateau around the reflection direction; a narrow lobe returns its
    # radiance times the projected-area factor r.n
    H, W = 16, 32
    env = torch.zeros(H, W, 3, dtype=DTYPE)
    env[5:8, 10:13] = torch.tensor([2.0, 1.0, 0.5], dtype=DTYPE)
    r = texel_directions(H, W)[6, 11][None]
    n = unit(r + torch.tensor([[0.0, 0.0, 0.6]], dtype=DTYPE))
    wo = reflect(r, n)
    rho = torch.tensor([0.05], dtype=DTYPE)
    q = specular_quadrature(env, n, wo, rho, 1024, 2048)
    expect = env[6, 11] * (r * n).sum()
    torch.testing.assert_close(q[0], expect, rtol=0.01, atol=0)
    p = specular_light_prefiltered(build_mips(env, 5), n, wo, rho)
    torch.testing.assert_close(p[0], expect, rtol=0.01, atol=0)


def test_prefiltered_zero_env_and_low_roughness():
    env = torch.zeros(16, 32, 3, dtype=DTYPE)
    n, wo, rho = random_samples(6, 1, 0.02, 1.0)
    assert torch.equal(specular_light_prefiltered(build_mips(env, 5), n, wo, rho), torch.zeros(6, 3, dtype=DTYPE))
    # at the roughness floor the lookup degenerates to mip 0 at r, weighted by r.n
    envs = smooth_envs(16, 32)
    n, wo, _ = random_samples(20, 2, 0.0, 0.0)
    rho = torch.full((20,), 0.02, dtype=DTYPE)
    for env in envs.values():
        r = reflect(wo, n)
        base = bilinear_lookup(env, r) * (wo * n).sum(-1, keepdim=True)
        torch.testing.assert_close(specular_light_prefiltered(build_mips(env, 5), n, wo, rho), base, rtol=0.01, atol=1e-4)


def test_lobe_mass_matches_quadrature():
    n, wo, rho = random_samples(30, 3, 0.2, 1.0)
    ones = torch.ones(16, 32, 3, dtype=DTYPE)
    q = specular_quadrature(ones, n, wo, rho, 256, 512)[:, 0]
    torch.testing.assert_close(lobe_norm(rho, (wo * n).sum(-1)), q, rtol=0.01, atol=1e-4)


@pytest.mark.parametrize("name", ["gradient", "sky"])
def test_prefiltered_against_fine_quadrature_wide_roughness(name):
    env = smooth_envs()[name]
    mips = build_mips(env, 5)
    n, wo, rho = random_samples(100, 11, 0.2, 1.0)
    q = specular_quadrature(env, n, wo, rho, 256, 512)
    p = specular_light_prefiltered(mips, n, wo, rho)
    assert bool(((p - q).abs() <= 0.05 * q.abs() + 1e-4).all()), float(((p - q).abs() / q.abs()).max())


def test_back_facing_specular_is_zero_and_finite():
    env = smooth_envs(16, 32)["sky"]
    n = unit([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    wo = unit([[0.3, 0.0, -1.0], [1.0, 0.0, 0.0]])
    rho = torch.tensor([0.5, 0.5], dtype=DTYPE)
    for quad in (False, True):
        light = splat_specular_light(build_mips(env, 5), n, wo, rho, use_quadrature=quad)
        assert bool(torch.isfinite(light).all())
        assert torch.equal(light, torch.zeros(2, 3, dtype=DTYPE))


# -- shade -------------------------------------------------------------------------------

def test_shade_examples():
    cd = torch.tensor([[0.2, 0.5, 0.7]], dtype=DTYPE)
    zero = torch.zeros(1, 3, dtype=DTYPE)
    expect = torch.as_tensor(gamma_encode(cd.numpy()), dtype=DTYPE)
    torch.testing.assert_close(shade(cd, torch.full((1, 3), 0.6, dtype=DTYPE), zero), expect, rtol=0, atol=1e-15)
    torch.testing.assert_close(shade(cd, zero, torch.full((1, 3), 5.0, dtype=DTYPE)), expect, rtol=0, atol=1e-15)
    # c_d = 0, s = 1, constant env: gamma of the quadrature light
    n, wo, rho = random_samples(4, 5, 0.4, 1.0)
    env = torch.full((16, 32, 3), 0.3, dtype=DTYPE)
    light = specular_quadrature(env, n, wo, rho)
    out = shade(torch.zeros(4, 3, dtype=DTYPE), torch.ones(4, 3, dtype=DTYPE), light)
    torch.testing.assert_close(out, torch.as_tensor(gamma_encode(light.numpy()), dtype=DTYPE).clamp(0, 1))


def test_gamma_tonemap_matches_encoder():
    x = torch.linspace(-0.1, 1.5, 2001, dtype=DTYPE)
    torch.testing.assert_close(gamma_tonemap(x), torch.as_tensor(gamma_encode(x.numpy()), dtype=DTYPE), rtol=0, atol=1e-14)


def test_shade_monotonic_in_diffuse_and_env():
    g = torch.Generator().manual_seed(0)
    cd = torch.rand(50, 3, generator=g, dtype=DTYPE) * 0.5
    s = torch.rand(50, 3, generator=g, dtype=DTYPE)
    n, wo, rho = random_samples(50, 6, 0.02, 1.0)
    env = smooth_envs(16, 32)["sky"]
    bright = env * 1.5
    a = shade(cd, s, splat_specular_light(build_mips(env, 5), n, wo, rho))
    b = shade(cd + 0.1, s, splat_specular_light(build_mips(env, 5), n, wo, rho))
    c = shade(cd, s, splat_specular_light(build_mips(bright, 5), n, wo, rho))
    assert bool((b >= a).all()) and bool((c >= a).all())


def test_prefiltered_gradients():
    env = smooth_envs(8, 16)["sky"].clone().requires_grad_(True)
    n, wo, rho = random_samples(3, 7, 0.3, 0.9)
    rho = rho.clone().requires_grad_(True)

    def f(e, r):
        return specular_light_prefiltered(build_mips(e, 3), n, wo, r)

    assert torch.autograd.gradcheck(f, (env, rho), eps=1e-6, atol=1e-6)
