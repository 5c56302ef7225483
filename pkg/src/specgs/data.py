"""Datasets on disk and in memory, image I/O, and the synthetic oracle generator.

Layout under a dataset root::

    manifest.json
    band_<name>/view_<i>.png   display image (8-bit) ...
    band_<name>/view_<i>.npy   ... and its lossless float64 twin (preferred on load)
    masks_<name>/view_<i>.png  palette PNG, palette index = group id (0 = background)
    env/band_<name>.npy        ground-truth environment maps (synthetic sets only)

The full-spectra pseudo-band uses the directory name ``full``. The manifest
schema is documented in the README.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .color import DEFAULT_BAND_CENTERS, FULL_SPECTRA, BandTable, load_cmf, srgb_matrix
from .raster import CameraView, render_bands
from .scene import DTYPE, ENCODING_DIM, PARAM_NAMES, SpectralScene, logit
from .shading import texel_directions

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "specgs-dataset"
MANIFEST_VERSION = 1
# NeRF transform matrices use OpenGL camera axes (y up, z backward)
_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


@dataclass
class ViewRecord:
    name: str
    camera: CameraView
    images: dict[str, torch.Tensor]  # band name -> (H, W, 3) display-domain image
    masks: dict[str, torch.Tensor] = field(default_factory=dict)  # band name -> (H, W) int64
    split: str = "train"


@dataclass
class SpectralDataset:
    band_table: BandTable
    views: list[ViewRecord]
    num_classes: int

    def __post_init__(self):
        if not self.views:
            raise ValueError("dataset has no views")
        for v in self.views:
            for band in self.band_table.names:
                if band not in v.images:
                    raise ValueError(f"view '{v.name}' is missing the image for band '{band}'")
            shapes = {tuple(img.shape) for img in v.images.values()}
            shapes |= {tuple(m.shape) + (3,) for m in v.masks.values()}
            if len(shapes) != 1:
                raise ValueError(f"view '{v.name}' has images of different sizes: {sorted(shapes)}")
            (shape,) = shapes
            if shape != (v.camera.height, v.camera.width, 3):
                raise ValueError(f"view '{v.name}' image size {shape[:2]} does not match its camera")
            for band, m in v.masks.items():
                if m.numel() and int(m.max()) >= self.num_classes:
                    raise ValueError(f"view '{v.name}' band '{band}' has mask id {int(m.max())} >= {self.num_classes}")

    def split(self, name: str) -> list[ViewRecord]:
        return [v for v in self.views if v.split == name]


# -- images -------------------------------------------------------------------

def _parent(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def save_png(img, path: str | Path) -> None:
    arr = np.asarray(torch.as_tensor(img).detach().cpu().numpy(), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("display images must be (H, W, 3)")
    Image.fromarray(np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8), "RGB").save(_parent(path))


def load_png(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L"):
            raise ValueError(f"unsupported image mode '{im.mode}' in {path}")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr)


def save_float(img, path: str | Path) -> None:
    np.save(_parent(path), np.ascontiguousarray(torch.as_tensor(img).detach().cpu().numpy(), dtype=np.float64))


def load_float(path: str | Path) -> torch.Tensor:
    arr = np.load(path, allow_pickle=False)
    if arr.dtype != np.float64:
        raise ValueError(f"unsupported float image dtype {arr.dtype} in {path}")
    return torch.from_numpy(arr)


def _palette() -> list[int]:
    rng = np.random.default_rng(1234)
    colors = rng.integers(40, 256, size=(256, 3))
    colors[0] = 0
    return colors.astype(np.uint8).reshape(-1).tolist()


def save_mask(mask, path: str | Path) -> None:
    arr = np.asarray(torch.as_tensor(mask).cpu().numpy())
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("mask ids must fit in 0..255")
    im = Image.fromarray(arr.astype(np.uint8), "P")
    im.putpalette(_palette())
    im.save(_parent(path))


def load_mask(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise ValueError(f"mask {path} must be a palette or greyscale PNG, got '{im.mode}'")
        return torch.from_numpy(np.asarray(im, dtype=np.int64).copy())


def load_image(path: str | Path) -> torch.Tensor:
    """Display image; a sibling ``.npy`` file takes precedence over the PNG."""
    path = Path(path)
    twin = path.with_suffix(".npy")
    if twin.exists():
        return load_float(twin)
    if not path.exists():
        raise FileNotFoundError(path)
    return load_png(path)


# -- manifest -------------------------------------------------------------------

def _band_dir(name: str) -> str:
    return "full" if name == FULL_SPECTRA else f"band_{name}"


def _mask_dir(name: str) -> str:
    return f"masks_{name}"


def camera_to_frame(cam: CameraView) -> dict:
    w2c = cam.world_to_camera.numpy()
    c2w = np.eye(4)
    c2w[:3, :3] = w2c[:3, :3].T
    c2w[:3, 3] = -w2c[:3, :3].T @ w2c[:3, 3]
    c2w_gl = c2w @ _GL_TO_CV
    return {
        "transform_matrix": c2w_gl.tolist(),
        # exact copy of the pose as used for rendering; inverting c2w costs an ulp
        "world_to_camera": w2c.tolist(),
        "camera_angle_x": 2.0 * math.atan(0.5 * cam.width / cam.fx),
        "fl_x": cam.fx,
        "fl_y": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "w": cam.width,
        "h": cam.height,
        "near": cam.near,
        "far": cam.far,
    }


def frame_to_camera(frame: dict, defaults: dict, where: str) -> CameraView:
    get = lambda k: frame.get(k, defaults.get(k))  # noqa: E731
    c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
    if c2w.shape != (4, 4):
        raise ValueError(f"{where}: transform_matrix must be 4x4")
    R = c2w[:3, :3]
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-4:
        raise ValueError(f"{where}: camera rotation is not orthonormal")
    c2w_cv = c2w @ _GL_TO_CV
    w2c = np.eye(4)
    w2c[:3, :3] = c2w_cv[:3, :3].T
    w2c[:3, 3] = -c2w_cv[:3, :3].T @ c2w_cv[:3, 3]
    if "world_to_camera" in frame:
        exact = np.asarray(frame["world_to_camera"], dtype=np.float64)
        if exact.shape != (4, 4) or np.abs(exact - w2c).max() > 1e-9:
            raise ValueError(f"{where}: world_to_camera disagrees with transform_matrix")
        w2c = exact
    W, H = int(get("w")), int(get("h"))
    fx = get("fl_x")
    if fx is None:
        fov = get("camera_angle_x")
        if fov is None:
            raise ValueError(f"{where}: needs fl_x or camera_angle_x")
        fx = 0.5 * W / math.tan(0.5 * float(fov))
    fy = get("fl_y") or fx
    cx = get("cx")
    cy = get("cy")
    return CameraView(
        W,
        H,
        float(fx),
        float(fy),
        W / 2.0 if cx is None else float(cx),
        H / 2.0 if cy is None else float(cy),
        w2c,
        near=float(get("near") or 0.01),
        far=float(get("far") or 100.0),
    )


def save_dataset(ds: SpectralDataset, root: str | Path, write_float: bool = True) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for v in ds.views:
        images, masks = {}, {}
        for band, img in v.images.items():
            d = root / _band_dir(band)
            d.mkdir(exist_ok=True)
            rel = f"{_band_dir(band)}/{v.name}.png"
            save_png(img, root / rel)
            if write_float:
                save_float(img, (root / rel).with_suffix(".npy"))
            images[band] = rel
        for band, m in v.masks.items():
            d = root / _mask_dir(band)
            d.mkdir(exist_ok=True)
            rel = f"{_mask_dir(band)}/{v.name}.png"
            save_mask(m, root / rel)
            masks[band] = rel
        frames.append({"name": v.name, "split": v.split, **camera_to_frame(v.camera), "images": images, "masks": masks})
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "bands": ds.band_table.to_list(),
        "num_classes": ds.num_classes,
        "frames": frames,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(root: str | Path) -> SpectralDataset:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')}")
    frames = manifest.get("frames") or []
    if not frames:
        raise ValueError(f"{path}: manifest lists no frames")
    band_table = BandTable.from_list(manifest["bands"])
    defaults = {k: manifest.get(k) for k in ("camera_angle_x", "w", "h", "near", "far")}
    views = []
    for i, fr in enumerate(frames):
        name = fr.get("name", f"view_{i:03d}")
        cam = frame_to_camera(fr, defaults, f"frame '{name}'")
        images, masks = {}, {}
        for band in band_table.names:
            rel = fr.get("images", {}).get(band)
            if rel is None:
                raise ValueError(f"view '{name}' is missing the image for band '{band}'")
            try:
                images[band] = load_image(root / rel)
            except FileNotFoundError:
                raise FileNotFoundError(f"view '{name}' band '{band}': image file {root / rel} not found") from None
        for band, rel in (fr.get("masks") or {}).items():
            if not (root / rel).exists():
                raise FileNotFoundError(f"view '{name}' band '{band}': mask file {root / rel} not found")
            masks[band] = load_mask(root / rel)
        views.append(ViewRecord(name, cam, images, masks, fr.get("split", "train")))
    return SpectralDataset(band_table, views, int(manifest["num_classes"]))


# -- synthetic oracle scenes ------------------------------------------------------

@dataclass
class SynthSpec:
    n_groups: int = 2
    splats_per_group: int = 15
    band_centers: tuple = DEFAULT_BAND_CENTERS
    band_width_nm: float = 40.0
    n_train: int = 16
    n_test: int = 4
    image_size: int = 64
    env_height: int = 16
    env_width: int = 32
    env_levels: int = 5
    fov_deg: float = 40.0
    camera_distance: float = 2.4
    seed: int = 0


def band_hues(band_table: BandTable) -> dict[str, np.ndarray]:
    """Display hue of each band: the clipped RGB weight at the band centre, max 1.

    The full-spectra band maps to white.
    """
    cmf, m = load_cmf(), srgb_matrix("xyz_to_srgb_combined")
    out = {}
    for b in band_table:
        if b.is_full:
            out[b.name] = np.ones(3)
            continue
        w = np.clip(m.m @ cmf.at(b.center_nm), 0.0, None)
        out[b.name] = 0.15 + 0.85 * w / w.max()
    return out


def _group_reflectance(rng: np.random.Generator, wavelengths: np.ndarray) -> np.ndarray:
    """A smooth reflectance spectrum: a broad bump on a floor."""
    peak = rng.uniform(450.0, 630.0)
    width = rng.uniform(50.0, 90.0)
    return 0.2 + 0.6 * np.exp(-0.5 * ((wavelengths - peak) / width) ** 2)


def _smooth_env(rng: np.random.Generator, H: int, W: int, tint: np.ndarray) -> np.ndarray:
    d = texel_directions(H, W).numpy()
    sun = rng.normal(size=3)
    sun[2] = abs(sun[2]) + 0.5
    sun /= np.linalg.norm(sun)
    sky = 0.35 + 0.15 * d[..., 2:3] + 0.1 * (d @ rng.normal(size=3))[..., None]
    lobe = 0.8 * np.exp(4.0 * ((d @ sun)[..., None] - 1.0))
    return np.clip(sky + lobe, 0.05, None) * tint


def _cluster(rng, center, count, radius=0.28):
    pts = []
    while len(pts) < count:
        p = rng.uniform(-1, 1, size=3)
        if np.linalg.norm(p) <= 1:
            pts.append(center + radius * p)
    return np.asarray(pts)


def orbit_cameras(n: int, size: int, fov_deg: float, distance: float, seed: int, offset: float = 0.0) -> list[CameraView]:
    """Cameras on a sphere around the origin (Fibonacci spiral, upper band), looking inward."""
    cams = []
    golden = math.pi * (3.0 - math.sqrt(5.0))
    for i in range(n):
        t = (i + 0.5 + offset) / n
        z = 0.85 - 1.3 * t  # elevation band, avoids the poles
        r = math.sqrt(max(1 - z * z, 0.0))
        phi = golden * (i + offset * 7) + 0.3 * seed
        eye = distance * np.array([r * math.cos(phi), z, r * math.sin(phi)])
        cams.append(CameraView.look_at(eye, [0, 0, 0], [0, 1, 0], size, size, math.radians(fov_deg)))
    return cams


def synth_ground_truth(spec: SynthSpec) -> SpectralScene:
    rng = np.random.default_rng(spec.seed)
    bt = BandTable.from_centers(spec.band_centers, spec.band_width_nm)
    K = spec.n_groups + 1
    hues = band_hues(bt)
    centers_x = np.linspace(-0.5, 0.5, spec.n_groups) if spec.n_groups > 1 else np.zeros(1)
    means, tags = [], []
    for g in range(spec.n_groups):
        means.append(_cluster(rng, np.array([centers_x[g], 0.0, 0.0]), spec.splats_per_group))
        tags += [g + 1] * spec.splats_per_group
    means = np.concatenate(means)
    N, B = len(means), len(bt)
    scene = SpectralScene.create(
        means, bt, K, spec.env_height, spec.env_width, spec.env_levels, seed=spec.seed
    )

    log_scales = np.log(rng.uniform(0.07, 0.12, size=(N, 3)))
    log_scales[:, 2] = np.log(rng.uniform(0.02, 0.035, size=N))  # flat splats
    rot = rng.normal(size=(N, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    opacity = rng.uniform(0.75, 0.95, size=N)

    wl = np.array([b.center_nm if not b.is_full else 0.0 for b in bt])
    diffuse = np.zeros((B, N, 3))
    spec_tint = np.zeros((B, N, 3))
    rough = np.zeros((B, N))
    group_of = np.asarray(tags) - 1
    spectral_idx = [i for i, b in enumerate(bt) if not b.is_full]
    for g in range(spec.n_groups):
        refl = _group_reflectance(rng, wl[spectral_idx])
        tint = rng.uniform(0.15, 0.35)
        rho = rng.uniform(0.35, 0.7)
        sel = group_of == g
        jitter = rng.uniform(0.9, 1.1, size=(sel.sum(), 1))
        for j, bi in enumerate(spectral_idx):
            c = np.clip(refl[j] * hues[bt.bands[bi].name] * jitter, 0.02, 0.95)
            diffuse[bi, sel] = c
            spec_tint[bi, sel] = tint
            rough[bi, sel] = rho
        # the full-spectra look is close to, but not exactly, the band average
        full = bt.full_index
        diffuse[full, sel] = np.clip(diffuse[spectral_idx][:, sel].mean(0) * 1.15, 0.02, 0.95)
        spec_tint[full, sel] = tint
        rough[full, sel] = rho

    enc = np.zeros((B, N, ENCODING_DIM))
    enc[:, np.arange(N), (group_of + 1) % ENCODING_DIM] = 4.0
    clf_w = np.zeros((B, K, ENCODING_DIM))
    for k in range(K):
        clf_w[:, k, k % ENCODING_DIM] = 2.0
    clf_b = np.zeros((B, K))
    clf_b[:, 0] = 1.0  # background wins where features are faint

    # one light layout for every band, tinted by the band's hue; the
    # full-spectra light relates to the band average like the diffuse colour
    base = _smooth_env(rng, spec.env_height, spec.env_width, np.ones(3))
    env = np.stack([base * hues[b.name] for b in bt])
    env[bt.full_index] = 1.15 * env[spectral_idx].mean(0)

    t = lambda a: torch.as_tensor(a, dtype=DTYPE)  # noqa: E731
    return scene.replace(
        log_scales=t(log_scales),
        rotations=t(rot),
        opacity_logits=logit(t(opacity)),
        diffuse_logits=logit(t(diffuse)),
        specular_logits=logit(t(spec_tint)),
        roughness_logits=logit(t(rough)),
        encodings=t(enc),
        clf_weight=t(clf_w),
        clf_bias=t(clf_b),
        env=t(env),
        tags=torch.as_tensor(tags, dtype=torch.int64),
        full_active=True,
        priors_initialized=True,
    )


def classify_pixels(id_feature, alpha, weight, bias, alpha_threshold: float = 0.5) -> torch.Tensor:
    """Per-pixel argmax class of composited features; 0 where alpha is below threshold."""
    logits = id_feature @ weight.T + bias
    ids = torch.argmax(logits, dim=-1)  # first maximum on ties
    return torch.where(alpha >= alpha_threshold, ids, torch.zeros_like(ids))


def render_dataset(scene: SpectralScene, cams: list[CameraView], splits: list[str], threads: int = 1) -> SpectralDataset:
    views = []
    with torch.no_grad():
        for i, (cam, split) in enumerate(zip(cams, splits)):
            outs = render_bands(scene, cam, threads=threads)
            images = {b: o.color.clone() for b, o in outs.items()}
            masks = {}
            for b, o in outs.items():
                bi = scene.band_index(b)
                masks[b] = classify_pixels(o.id_feature, o.alpha, scene.clf_weight[bi], scene.clf_bias[bi])
            views.append(ViewRecord(f"view_{i:03d}", cam, images, masks, split))
    return SpectralDataset(scene.band_table, views, scene.num_classes)


def synth_scene(spec: SynthSpec | None = None, threads: int = 1) -> tuple[SpectralScene, SpectralDataset]:
    """Ground-truth scene plus its exactly rendered train/test dataset."""
    spec = spec or SynthSpec()
    scene = synth_ground_truth(spec)
    cams = orbit_cameras(spec.n_train, spec.image_size, spec.fov_deg, spec.camera_distance, spec.seed)
    cams += orbit_cameras(spec.n_test, spec.image_size, spec.fov_deg, spec.camera_distance, spec.seed, offset=0.37)
    splits = ["train"] * spec.n_train + ["test"] * spec.n_test
    return scene, render_dataset(scene, cams, splits, threads)


# -- perturbation -------------------------------------------------------------------

DEFAULT_PERTURBATION = {
    "means": 0.02,
    "log_scales": 0.15,
    "rotations": 0.1,
    "opacity_logits": 0.4,
    "normal_params": 0.05,
    "diffuse_logits": 0.4,
    "specular_logits": 0.3,
    "roughness_logits": 0.3,
    "encodings": 0.0,
    "clf_weight": 0.0,
    "clf_bias": 0.0,
    "env": 0.15,
}


def perturb_scene(scene: SpectralScene, magnitudes: dict[str, float] | None = None, seed: int = 0) -> SpectralScene:
    """Add seeded Gaussian noise of the given std to each named parameter.

    Environment noise is multiplicative (exp of the noise) so radiance stays
    non-negative. Unnamed parameters are left as they are.
    """
    magnitudes = DEFAULT_PERTURBATION if magnitudes is None else magnitudes
    unknown = set(magnitudes) - set(PARAM_NAMES)
    if unknown:
        raise ValueError(f"unknown parameters to perturb: {sorted(unknown)}")
    gen = torch.Generator().manual_seed(seed)
    changes = {}
    for name in PARAM_NAMES:  # fixed order keeps the noise stream reproducible
        mag = float(magnitudes.get(name, 0.0))
        value = getattr(scene, name).detach()
        if mag == 0.0:
            changes[name] = value.clone()
            continue
        noise = torch.randn(value.shape, generator=gen, dtype=DTYPE) * mag
        changes[name] = value * torch.exp(noise) if name == "env" else value + noise
    if "rotations" in changes:
        q = changes["rotations"]
        changes["rotations"] = q / q.norm(dim=-1, keepdim=True)
    return scene.replace(**changes)
