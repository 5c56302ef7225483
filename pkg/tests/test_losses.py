import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from conftest import random_scene
from specgs.config import LossConfig
from specgs.losses import (
    dssim_loss,
    identity_2d_loss,
    identity_3d_loss,
    knn_indices,
    l1_loss,
    render_loss_band,
    sample_splats,
    ssim,
    total_loss,
)
from specgs.scene import DTYPE


def test_l1_examples():
    a = torch.tensor([[0.2, 0.4], [0.6, 0.8]], dtype=DTYPE)
    assert float(l1_loss(a, a)) == 0.0
    assert float(l1_loss(a, a + 0.1)) == pytest.approx(0.1, abs=1e-15)
    with pytest.raises(ValueError):
        l1_loss(a, a[:1])
    x = a.clone().requires_grad_()
    l1_loss(x, a).backward()
    assert torch.equal(x.grad, torch.zeros_like(a))


def _skimage_ssim(a, b):
    return structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, channel_axis=-1
    )


def test_ssim_matches_skimage():
    rng = np.random.default_rng(0)
    for i in range(5):
        a = rng.uniform(size=(24 + i, 30, 3))
        b = np.clip(a + rng.normal(scale=0.05 * (i + 1), size=a.shape), 0, 1)
        got = float(ssim(torch.tensor(a), torch.tensor(b)))
        assert abs(got - _skimage_ssim(a, b)) < 1e-6


def test_ssim_identical_and_anticorrelated():
    rng = np.random.default_rng(1)
    a = torch.tensor(rng.uniform(size=(16, 16, 3)))
    assert float(ssim(a, a)) == pytest.approx(1.0, abs=1e-12)
    assert float(dssim_loss(a, a)) == pytest.approx(0.0, abs=1e-12)
    assert float(ssim(a, 1 - a)) < 0
    with pytest.raises(ValueError, match="smaller than"):
        ssim(a[:8], a[:8])


def test_identity_2d_loss_uniform_logits_is_log_k():
    K = 4
    feat = torch.zeros(5, 6, 16, dtype=DTYPE)
    mask = torch.randint(0, K, (5, 6))
    W, b = torch.zeros(K, 16, dtype=DTYPE), torch.zeros(K, dtype=DTYPE)
    assert float(identity_2d_loss(feat, mask, W, b)) == pytest.approx(math.log(K), abs=1e-12)
    with pytest.raises(ValueError):
        identity_2d_loss(feat, torch.full((5, 6), K), W, b)
    with pytest.raises(ValueError):
        identity_2d_loss(feat, mask[:2], W, b)


def test_identity_2d_loss_ignores_transparent_pixels():
    rng = np.random.default_rng(2)
    feat = torch.tensor(rng.normal(size=(4, 4, 16)))
    mask = torch.tensor(rng.integers(0, 3, size=(4, 4)))
    W, b = torch.tensor(rng.normal(size=(3, 16))), torch.tensor(rng.normal(size=3))
    alpha = torch.tensor(rng.uniform(size=(4, 4)))
    keep = alpha >= 0.5
    # oracle: explicit log-softmax over kept pixels
    total, n = 0.0, 0
    for r in range(4):
        for c in range(4):
            if keep[r, c]:
                z = W.numpy() @ feat[r, c].numpy() + b.numpy()
                total += -(z[mask[r, c]] - math.log(np.exp(z).sum()))
                n += 1
    got = identity_2d_loss(feat, mask, W, b, alpha)
    assert float(got) == pytest.approx(total / n, rel=1e-12)
    assert float(identity_2d_loss(feat, mask, W, b, torch.zeros(4, 4, dtype=DTYPE))) == 0.0


def _kl_oracle(means, enc, sample, k):
    total = 0.0
    for j in sample:
        d = [(float(np.linalg.norm(means[i] - means[j])), i) for i in range(len(means)) if i != j]
        nbrs = [i for _, i in sorted(d)[:k]]
        p = np.exp(enc[j] - enc[j].max())
        p /= p.sum()
        for i in nbrs:
            q = np.exp(enc[i] - enc[i].max())
            q /= q.sum()
            total += float(np.sum(p * (np.log(p) - np.log(q))))
    return total / (len(sample) * k)


def test_identity_3d_loss_against_exhaustive_oracle():
    sc = random_scene(n=10, seed=4)
    for m in (10, 4):
        got = identity_3d_loss(sc, "500", k=3, m=m, seed=2)
        sample = sample_splats(10, m, 2).tolist()
        oracle = _kl_oracle(sc.means.numpy(), sc.encodings[0].numpy(), sample, 3)
        assert abs(float(got) - oracle) < 1e-10


def test_identity_3d_loss_zero_for_equal_encodings_and_errors():
    sc = random_scene(n=8, seed=1)
    enc = sc.encodings.clone()
    enc[:] = enc[:, :1]
    assert float(identity_3d_loss(sc.replace(encodings=enc), "600", k=3)) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError):
        identity_3d_loss(sc, "500", k=8)


def test_knn_excludes_self_and_breaks_ties_by_index():
    pts = torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0, 2.0, 0]], dtype=DTYPE)
    nn = knn_indices(pts, torch.tensor([0, 3]), 2)
    assert nn[0].tolist() == [1, 2]
    assert 3 not in nn[1].tolist()


def test_render_loss_band_weighting():
    rng = np.random.default_rng(5)
    img = torch.tensor(rng.uniform(size=(12, 12, 3)))
    ref = torch.tensor(rng.uniform(size=(12, 12, 3)))
    w = LossConfig(gamma=0.2, gamma_2d=0.0, gamma_3d=0.0)
    t = render_loss_band(img, ref, w)
    expect = 0.8 * float(l1_loss(img, ref)) + 0.2 * float(dssim_loss(img, ref))
    assert float(t.total) == pytest.approx(expect, rel=1e-14)
    only_l1 = render_loss_band(img, ref, LossConfig(gamma=0.0, gamma_2d=0.0, gamma_3d=0.0))
    assert float(only_l1.dssim) == 0.0 and float(only_l1.total) == float(l1_loss(img, ref))
    assert float(total_loss([t.total, only_l1.total])) == float(t.total + only_l1.total)
    with pytest.raises(ValueError):
        LossConfig(gamma=1.5)
