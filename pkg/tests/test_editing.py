import pytest
import torch

from conftest import random_scene
from specgs.data import SpectralDataset, SynthSpec, ViewRecord, synth_scene
from specgs.editing import check_same_cameras, classify_splats, delete_group, finetune_edit, group_mask_render
from specgs.raster import CameraView, render
from specgs.scene import DTYPE, PARAM_NAMES


@pytest.fixture(scope="module")
def tiny():
    return synth_scene(SynthSpec(splats_per_group=4, band_centers=(500.0, 600.0), n_train=2, n_test=1, image_size=16))


def two_group_scene():
    """Groups 1 and 2 with one-hot encodings and a matching classifier."""
    sc = random_scene(n=10, seed=6, classes=3)
    group = torch.tensor([1] * 5 + [2] * 5)
    enc = torch.zeros_like(sc.encodings)
    enc[:, torch.arange(10), group] = 6.0
    w = torch.zeros_like(sc.clf_weight)
    for k in range(3):
        w[:, k, k] = 1.0
    return sc.replace(encodings=enc, clf_weight=w, clf_bias=torch.zeros_like(sc.clf_bias), tags=group), group


def test_classify_examples():
    sc, group = two_group_scene()
    cls = classify_splats(sc, "500")
    assert torch.equal(cls.group, group)
    flat = sc.replace(clf_weight=torch.zeros_like(sc.clf_weight))
    cls = classify_splats(flat, "full")
    assert torch.equal(cls.group, torch.zeros(10, dtype=torch.int64))
    torch.testing.assert_close(cls.confidence, torch.full((10,), 1 / 3, dtype=DTYPE))
    assert cls.as_list()[0] == (0, 0, pytest.approx(1 / 3))


def test_delete_group_is_set_difference(camera):
    sc, group = two_group_scene()
    kept = delete_group(sc, 1, "500")
    only_b = sc.select(group == 2)
    for n in PARAM_NAMES:
        assert torch.equal(getattr(kept, n), getattr(only_b, n))
    a, b = render(kept, camera, "600"), render(only_b, camera, "600")
    assert float((a.color - b.color).abs().max()) <= 1e-12
    same = delete_group(sc, 1, "500", confidence_threshold=1.01)
    assert same.num_gaussians == 10
    with pytest.raises(ValueError, match="unknown group id"):
        delete_group(sc, 3, "500")


def test_group_mask_render_examples(camera):
    sc, _ = two_group_scene()
    empty = sc.select(torch.zeros(10, dtype=torch.bool))
    assert not bool(group_mask_render(empty, camera, "500", 1).any())
    single = sc.select(torch.arange(10) < 5)
    out = render(single, camera, "500")
    assert torch.equal(group_mask_render(single, camera, "500", 1), out.alpha >= 0.5)


def test_finetune_zero_iterations_and_camera_checks(tiny):
    gt, ds = tiny
    res = finetune_edit(gt, ds, iterations=0)
    assert res.scene is gt and res.log_rows == []
    moved = [
        ViewRecord(v.name, CameraView(v.camera.width, v.camera.height, v.camera.fx + 1, v.camera.fy, v.camera.cx, v.camera.cy, v.camera.world_to_camera.numpy()), v.images, v.masks, v.split)
        for v in ds.views
    ]
    with pytest.raises(ValueError, match="camera mismatch"):
        finetune_edit(gt, SpectralDataset(ds.band_table, moved, ds.num_classes), reference=ds, iterations=1)
    with pytest.raises(ValueError, match="view count"):
        check_same_cameras(ds, SpectralDataset(ds.band_table, ds.views[:1], ds.num_classes))


def test_noop_edit_keeps_scene(tiny):
    gt, ds = tiny
    res = finetune_edit(gt, ds, iterations=10, reference=ds)
    for n in ("means", "log_scales", "rotations", "opacity_logits", "normal_params"):
        assert torch.equal(getattr(res.scene, n), getattr(gt, n))
    for v in ds.views:
        for b in ("500", "full"):
            before = render(gt, v.camera, b).color
            after = render(res.scene, v.camera, b).color
            assert float((after - before).abs().mean()) < 1e-3
