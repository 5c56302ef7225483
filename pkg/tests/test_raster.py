import math

import numpy as np
import pytest
import torch

from conftest import front_camera, random_scene
from oracles import brute_force_render, composite_scalar, project_numpy
from specgs.config import RasterConfig
from specgs.raster import (
    CameraView,
    alpha_at_pixel,
    composite,
    conic_of,
    project,
    render,
    render_bands,
    splat_colors,
)
from specgs.scene import DTYPE, covariance, logit
from specgs.shading import build_mips


def one_splat(mean, scale, opacity=0.9):
    sc = random_scene(n=1)
    return sc.replace(
        means=torch.tensor([mean], dtype=DTYPE),
        log_scales=torch.full((1, 3), math.log(scale), dtype=DTYPE),
        rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=DTYPE),
        opacity_logits=logit(torch.tensor([opacity], dtype=DTYPE)),
    )


def axis_camera(size=32, f=40.0):
    return CameraView(size, size, f, f, size / 2, size / 2, np.eye(4))


# -- projection -------------------------------------------------------------------

def test_projection_isotropic_on_axis():
    cam = axis_camera()
    s, z = 0.1, 2.0
    cov = torch.eye(3, dtype=DTYPE)[None] * s * s
    p = project(torch.tensor([[0.0, 0.0, z]], dtype=DTYPE), cov, cam)
    expect = (cam.fx * s / z) ** 2 + 0.3
    torch.testing.assert_close(p.cov2d[0], expect * torch.eye(2, dtype=DTYPE))
    torch.testing.assert_close(p.mean2d[0], torch.tensor([16.0, 16.0], dtype=DTYPE))


def test_projection_against_finite_difference_jacobian():
    cam = front_camera(32)
    rng = np.random.default_rng(0)
    mean = rng.uniform(-0.3, 0.3, 3)
    cov = covariance(torch.tensor(rng.normal(scale=0.5, size=(1, 3)) - 2, dtype=DTYPE), torch.tensor(rng.normal(size=(1, 4)), dtype=DTYPE))[0].numpy()
    w2c = cam.world_to_camera.numpy()

    def pix(x):
        c = w2c[:3, :3] @ x + w2c[:3, 3]
        return np.array([cam.fx * c[0] / c[2] + cam.cx, cam.fy * c[1] / c[2] + cam.cy])

    h = 1e-6
    J = np.stack([(pix(mean + h * e) - pix(mean - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    oracle = J @ cov @ J.T + 0.3 * np.eye(2)
    p = project(torch.tensor(mean[None]), torch.tensor(cov[None]), cam)
    np.testing.assert_allclose(p.cov2d[0].numpy(), oracle, rtol=0.01)
    m2, c2, _ = project_numpy(mean, cov, w2c, cam.fx, cam.fy, cam.cx, cam.cy)
    np.testing.assert_allclose(p.cov2d[0].numpy(), c2, rtol=1e-12)
    np.testing.assert_allclose(p.mean2d[0].numpy(), m2, rtol=1e-12)


def test_projection_culling_and_focal_scaling():
    cam = axis_camera()
    cov = torch.eye(3, dtype=DTYPE)[None].expand(3, 3, 3) * 0.01
    means = torch.tensor([[0.0, 0.0, -1.0], [0.2, 0.1, 2.0], [50.0, 0.0, 2.0]], dtype=DTYPE)
    p = project(means, cov, cam)
    assert p.visible.tolist() == [False, True, False]
    cam2 = CameraView(32, 32, 80.0, 80.0, 16, 16, np.eye(4))
    p2 = project(means, cov, cam2)
    torch.testing.assert_close(p2.mean2d[1] - 16, 2 * (p.mean2d[1] - 16))


# -- per-pixel alpha and compositing ----------------------------------------------------

def test_alpha_examples():
    mean = torch.tensor([[5.0, 5.0]], dtype=DTYPE)
    cov = torch.tensor([[[4.0, 1.0], [1.0, 3.0]]], dtype=DTYPE)
    conic = conic_of(cov)
    op = torch.tensor([0.7], dtype=DTYPE)
    a, keep = alpha_at_pixel(mean, conic, op, mean)
    assert float(a) == pytest.approx(0.7) and bool(keep)
    a, _ = alpha_at_pixel(mean, conic, torch.tensor([1.0], dtype=DTYPE), mean)
    assert float(a) == pytest.approx(0.999)
    # a point on the 1-sigma Mahalanobis contour
    L = torch.linalg.cholesky(cov[0])
    px = mean + (L @ torch.tensor([0.6, 0.8], dtype=DTYPE))[None]
    a, _ = alpha_at_pixel(mean, conic, op, px)
    assert float(a) == pytest.approx(0.7 * math.exp(-0.5), rel=1e-12)
    a, keep = alpha_at_pixel(mean, conic, op, mean + 1e3)
    assert float(a) < 1e-100 and not bool(keep)


def test_composite_examples():
    red, blue = torch.tensor([1.0, 0, 0], dtype=DTYPE), torch.tensor([0, 0, 1.0], dtype=DTYPE)
    out, T, _, _ = composite(torch.tensor([[0.999]], dtype=DTYPE), red[None])
    torch.testing.assert_close(out[0], red * 0.999)
    out, T, _, _ = composite(torch.tensor([[0.5, 0.999]], dtype=DTYPE), torch.stack([red, blue]))
    torch.testing.assert_close(out[0], torch.tensor([0.5, 0.0, 0.4995], dtype=DTYPE))


def test_composite_against_scalar_loop():
    rng = np.random.default_rng(4)
    colors = rng.uniform(size=(10, 5))
    alphas = rng.uniform(0.0, 0.5, size=10)
    expect, alpha = composite_scalar(colors, alphas)
    for ordered in (True, False):
        out, T, _, _ = composite(torch.tensor(alphas[None]), torch.tensor(colors), ordered=ordered)
        np.testing.assert_allclose(out[0].numpy(), expect, rtol=0, atol=1e-12)
        assert abs((1 - float(T[0])) - alpha) < 1e-12


def test_composite_terminates_and_respects_order():
    a = torch.tensor([[0.99, 0.99, 0.99, 0.5]], dtype=DTYPE)
    v = torch.eye(4, dtype=DTYPE)
    out, T, done, w = composite(a, v)
    # after two 0.99 splats T = 1e-4; the third would drop it below and ends the pixel
    assert bool(done[0]) and w[0, 2] == 0 and w[0, 3] == 0
    with pytest.raises(ValueError):
        composite(a, v, depths=torch.tensor([1.0, 3.0, 2.0, 4.0], dtype=DTYPE), check_sorted=True)


def test_alpha_increases_with_contributing_alpha():
    v = torch.ones(3, 1, dtype=DTYPE)
    base = torch.tensor([[0.3, 0.4, 0.2]], dtype=DTYPE)
    _, T0, _, _ = composite(base, v)
    for j in range(3):
        up = base.clone()
        up[0, j] += 0.1
        _, T1, _, _ = composite(up, v)
        assert float(1 - T1[0]) > float(1 - T0[0])


# -- full renders -----------------------------------------------------------------------

def test_empty_scene_renders_black(camera):
    sc = random_scene(n=3).select(torch.zeros(3, dtype=torch.bool))
    out = render(sc, camera, "500")
    assert torch.equal(out.color, torch.zeros(16, 16, 3, dtype=DTYPE))
    assert torch.equal(out.alpha, torch.zeros(16, 16, dtype=DTYPE))
    assert torch.equal(out.id_feature, torch.zeros(16, 16, 16, dtype=DTYPE))


def test_single_splat_centre_pixel():
    sc = one_splat([0.0, 0.0, 3.0], 0.3, opacity=0.8)
    cam = CameraView(31, 31, 40.0, 40.0, 15.5, 15.5, np.eye(4))
    out = render(sc, cam, "600")
    p = project(sc.means, sc.covariances(), cam)
    rgb = splat_colors(sc, cam, "600", p.view_dir, build_mips(sc.env[1], sc.env_levels))
    torch.testing.assert_close(out.color[15, 15], rgb[0] * 0.8, rtol=0, atol=1e-15)
    torch.testing.assert_close(out.id_feature[15, 15], sc.encodings[1, 0] * 0.8, rtol=0, atol=1e-15)


def _brute(sc, cam, band):
    with torch.no_grad():
        p = project(sc.means, sc.covariances(), cam)
        b = sc.band_index(band)
        rgb = splat_colors(sc, cam, band, p.view_dir, build_mips(sc.env[sc.env_index(band)], sc.env_levels))
        values = torch.cat([rgb, sc.encodings[b]], -1).numpy()
        op = torch.sigmoid(sc.opacity_logits).clamp(1e-7, 1 - 1e-7).numpy()
    return brute_force_render(
        sc.means.numpy(), sc.covariances().detach().numpy(), op, values, cam.world_to_camera.numpy(),
        cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy,
    )


def test_render_matches_brute_force():
    sc = random_scene(n=25, seed=3, scale=(0.05, 0.2))
    cam = front_camera(20, eye=(0.5, -0.4, -2.5))
    out = render(sc, cam, "500")
    ref, alpha = _brute(sc, cam, "500")
    got = torch.cat([out.color, out.id_feature], -1).detach().numpy()
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-6)
    np.testing.assert_allclose(out.alpha.detach().numpy(), alpha, rtol=0, atol=1e-6)


def test_render_independent_of_tiles_threads_and_band_subset():
    sc = random_scene(n=40, seed=5, scale=(0.05, 0.2))
    cam = front_camera(37, eye=(0.1, 0.2, -2.2))
    ref = render_bands(sc, cam, raster=RasterConfig(tile_size=16), threads=1)
    for tile, threads in ((8, 4), (5, 3), (64, 2)):
        out = render_bands(sc, cam, raster=RasterConfig(tile_size=tile), threads=threads)
        for b in ref:
            assert torch.equal(out[b].color, ref[b].color)
            assert torch.equal(out[b].id_feature, ref[b].id_feature)
            assert torch.equal(out[b].alpha, ref[b].alpha)
    single = render(sc, cam, "600")
    assert torch.equal(single.color, ref["600"].color)


def test_depth_ties_break_by_index():
    sc = random_scene(n=2, seed=0)
    sc = sc.replace(
        means=torch.tensor([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], dtype=DTYPE),
        log_scales=torch.full((2, 3), math.log(0.2), dtype=DTYPE),
    )
    cam = front_camera(9)
    out = render_bands(sc, cam, ["500"], record_contributions=True)["500"]
    assert [i for i, _ in out.contributions[4][4]] == [0, 1]


def test_id_feature_classifies_covered_pixel():
    sc = one_splat([0.0, 0.0, 3.0], 0.5, opacity=0.95)
    enc = torch.zeros_like(sc.encodings)
    enc[:, 0, 2] = 5.0
    w = torch.zeros_like(sc.clf_weight)
    w[:, 2, 2] = 1.0
    sc = sc.replace(encodings=enc, clf_weight=w, clf_bias=torch.zeros_like(sc.clf_bias))
    out = render(sc, CameraView(15, 15, 30.0, 30.0, 7.5, 7.5, np.eye(4)), "500")
    logits = out.id_feature[7, 7] @ sc.clf_weight[0].T + sc.clf_bias[0]
    assert int(torch.argmax(logits)) == 2


def test_contribution_log_lists_used_splats():
    sc = random_scene(n=12, seed=8, scale=(0.1, 0.3))
    cam = front_camera(10)
    out = render_bands(sc, cam, ["500"], record_contributions=True)["500"]
    for r in range(10):
        for c in range(10):
            alphas = [a for _, a in out.contributions[r][c]]
            T = float(np.prod([1 - a for a in alphas])) if alphas else 1.0
            assert abs((1 - T) - float(out.alpha[r, c])) < 1e-12
