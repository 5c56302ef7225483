"""Explicit scene representation: spectral Gaussians, environment lights, classifiers.

Geometry (mean, scale, rotation, opacity, normal perturbation) is shared by all
bands. Appearance logits, identity encodings, classifier weights and environment
maps carry a leading band axis ordered like the scene's ``BandTable``.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .color import BandTable

DTYPE = torch.float64
ENCODING_DIM = 16
SIGMOID_EPS = 1e-7

# learnable tensors, in checkpoint and optimizer order
PARAM_NAMES = (
    "means",
    "log_scales",
    "rotations",
    "opacity_logits",
    "normal_params",
    "diffuse_logits",
    "specular_logits",
    "roughness_logits",
    "encodings",
    "clf_weight",
    "clf_bias",
    "env",
)
GEOMETRY_PARAMS = ("means", "log_scales", "rotations", "opacity_logits", "normal_params")
PER_SPLAT_BANDED = ("diffuse_logits", "specular_logits", "roughness_logits", "encodings")
BRDF_PARAMS = ("diffuse_logits", "specular_logits", "roughness_logits")
# groups whose leading axis is the band (env only when it is per band)
BANDED_PARAMS = PER_SPLAT_BANDED + ("clf_weight", "clf_bias", "env")


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    """Sigmoid kept strictly inside (0, 1)."""
    return torch.sigmoid(x).clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)


def logit(p) -> torch.Tensor:
    p = torch.as_tensor(p, dtype=DTYPE)
    return torch.log(p) - torch.log1p(-p)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def covariance(log_scales: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    """R diag(exp(log_scale))^2 R^T for any leading batch shape."""
    R = quat_to_rotmat(rotations)
    s2 = torch.exp(2.0 * log_scales)
    return (R * s2.unsqueeze(-2)) @ R.transpose(-1, -2)


def splat_normal(
    log_scales: torch.Tensor,
    rotations: torch.Tensor,
    normal_params: torch.Tensor,
    view_dir: torch.Tensor,
) -> torch.Tensor:
    """Shading normal of each splat.

    The base normal is the rotated axis of the smallest scale; the two
    normal parameters displace it inside the tangent plane spanned by the
    other two axes. The result is flipped to face ``view_dir`` (the direction
    from the splat toward the camera).
    """
    R = quat_to_rotmat(rotations)
    k = torch.argmin(log_scales.detach(), dim=-1)
    cols = R.transpose(-1, -2)  # row i = axis i

    def axis(idx):
        return torch.gather(cols, -2, idx[..., None, None].expand(idx.shape + (1, 3))).squeeze(-2)

    base, t1, t2 = axis(k), axis((k + 1) % 3), axis((k + 2) % 3)
    n = base + normal_params[..., :1] * t1 + normal_params[..., 1:2] * t2
    n = n / n.norm(dim=-1, keepdim=True)
    facing = (n * view_dir).sum(-1, keepdim=True)
    return torch.where(facing < 0, -n, n)


@dataclass
class Decoded:
    diffuse: torch.Tensor  # (N, 3)
    specular: torch.Tensor  # (N, 3)
    roughness: torch.Tensor  # (N,)
    opacity: torch.Tensor  # (N,)


@dataclass
class SpectralScene:
    band_table: BandTable
    means: torch.Tensor
    log_scales: torch.Tensor
    rotations: torch.Tensor
    opacity_logits: torch.Tensor
    normal_params: torch.Tensor
    diffuse_logits: torch.Tensor  # (B, N, 3)
    specular_logits: torch.Tensor  # (B, N, 3)
    roughness_logits: torch.Tensor  # (B, N)
    encodings: torch.Tensor  # (B, N, 16)
    clf_weight: torch.Tensor  # (B, K, 16)
    clf_bias: torch.Tensor  # (B, K)
    env: torch.Tensor  # (B or 1, He, We, 3), linear radiance
    env_levels: int = 5
    tags: torch.Tensor = field(default=None)  # (N,) int64 provenance label, -1 if unknown
    full_active: bool = False
    priors_initialized: bool = False

    def __post_init__(self):
        if self.tags is None:
            self.tags = torch.full((self.num_gaussians,), -1, dtype=torch.int64)
        self.validate()

    # -- shape bookkeeping -------------------------------------------------
    @property
    def num_gaussians(self) -> int:
        return self.means.shape[0]

    @property
    def num_bands(self) -> int:
        return len(self.band_table)

    @property
    def num_classes(self) -> int:
        return self.clf_weight.shape[1]

    @property
    def shared_env(self) -> bool:
        return self.env.shape[0] == 1 and self.num_bands > 1

    def validate(self):
        N, B = self.num_gaussians, self.num_bands
        expect = {
            "means": (N, 3),
            "log_scales": (N, 3),
            "rotations": (N, 4),
            "opacity_logits": (N,),
            "normal_params": (N, 2),
            "diffuse_logits": (B, N, 3),
            "specular_logits": (B, N, 3),
            "roughness_logits": (B, N),
            "encodings": (B, N, ENCODING_DIM),
            "clf_bias": (B, self.num_classes),
            "clf_weight": (B, self.num_classes, ENCODING_DIM),
        }
        for name, shape in expect.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        if self.env.ndim != 4 or self.env.shape[0] not in (1, B) or self.env.shape[-1] != 3:
            raise ValueError(f"env has shape {tuple(self.env.shape)}")
        if tuple(self.tags.shape) != (N,):
            raise ValueError("tags must have one entry per Gaussian")

    def band_index(self, band) -> int:
        return self.band_table.index(band)

    def env_index(self, band) -> int:
        return 0 if self.env.shape[0] == 1 else self.band_index(band)

    def params(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def decode(self, band) -> Decoded:
        b = self.band_index(band)
        return Decoded(
            diffuse=sigmoid(self.diffuse_logits[b]),
            specular=sigmoid(self.specular_logits[b]),
            roughness=sigmoid(self.roughness_logits[b]),
            opacity=sigmoid(self.opacity_logits),
        )

    def covariances(self) -> torch.Tensor:
        return covariance(self.log_scales, self.rotations)

    # -- copies and subsets ------------------------------------------------
    def replace(self, **changes) -> "SpectralScene":
        fields = {name: getattr(self, name) for name in PARAM_NAMES}
        fields.update(
            band_table=self.band_table,
            env_levels=self.env_levels,
            tags=self.tags,
            full_active=self.full_active,
            priors_initialized=self.priors_initialized,
        )
        fields.update(changes)
        return SpectralScene(**fields)

    def clone(self) -> "SpectralScene":
        copies = {n: t.detach().clone() for n, t in self.params().items()}
        return self.replace(tags=self.tags.clone(), **copies)

    def select(self, keep: torch.Tensor) -> "SpectralScene":
        """New scene holding the Gaussians where ``keep`` (bool mask or index) selects."""
        keep = torch.as_tensor(keep)
        if keep.dtype == torch.bool:
            keep = torch.nonzero(keep, as_tuple=False).flatten()
        out = {}
        for name in GEOMETRY_PARAMS:
            out[name] = getattr(self, name).detach()[keep].clone()
        for name in PER_SPLAT_BANDED:
            out[name] = getattr(self, name).detach()[:, keep].clone()
        for name in ("clf_weight", "clf_bias", "env"):
            out[name] = getattr(self, name).detach().clone()
        return self.replace(tags=self.tags[keep].clone(), **out)

    def concat(self, other: "SpectralScene") -> "SpectralScene":
        """Append ``other``'s Gaussians; lights and classifiers come from ``self``."""
        out = {}
        for name in GEOMETRY_PARAMS:
            out[name] = torch.cat([getattr(self, name).detach(), getattr(other, name).detach()], 0)
        for name in PER_SPLAT_BANDED:
            out[name] = torch.cat([getattr(self, name).detach(), getattr(other, name).detach()], 1)
        for name in ("clf_weight", "clf_bias", "env"):
            out[name] = getattr(self, name).detach().clone()
        return self.replace(tags=torch.cat([self.tags, other.tags]), **out)

    # -- construction ------------------------------------------------------
    @classmethod
    def create(
        cls,
        means,
        band_table: BandTable,
        num_classes: int,
        env_height: int = 64,
        env_width: int = 128,
        env_levels: int = 5,
        share_env: bool = False,
        scale: float = 0.05,
        seed: int = 0,
    ) -> "SpectralScene":
        """Neutral initial scene around the given points (point-cloud style init)."""
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        gen = torch.Generator().manual_seed(seed)
        means = torch.as_tensor(np.asarray(means), dtype=DTYPE).reshape(-1, 3).clone()
        N, B = means.shape[0], len(band_table)
        rot = torch.zeros(N, 4, dtype=DTYPE)
        rot[:, 0] = 1.0
        return cls(
            band_table=band_table,
            means=means,
            log_scales=torch.full((N, 3), math.log(scale), dtype=DTYPE),
            rotations=rot,
            opacity_logits=torch.full((N,), float(logit(0.1)), dtype=DTYPE),
            normal_params=torch.zeros(N, 2, dtype=DTYPE),
            diffuse_logits=torch.zeros(B, N, 3, dtype=DTYPE),
            specular_logits=torch.full((B, N, 3), float(logit(0.1)), dtype=DTYPE),
            roughness_logits=torch.zeros(B, N, dtype=DTYPE),
            encodings=0.01 * torch.randn(B, N, ENCODING_DIM, generator=gen, dtype=DTYPE),
            clf_weight=0.1 * torch.randn(B, num_classes, ENCODING_DIM, generator=gen, dtype=DTYPE),
            clf_bias=torch.zeros(B, num_classes, dtype=DTYPE),
            env=torch.full((1 if share_env else B, env_height, env_width, 3), 0.5, dtype=DTYPE),
            env_levels=env_levels,
        )


# -- checkpoint format -----------------------------------------------------
#
# bytes 0..7   magic b"SPECGS\0\1"
# bytes 8..15  header length H, little-endian uint64
# next H bytes UTF-8 JSON header (sorted keys, no whitespace) with
#              {"version", "band_table", "env_levels", "full_active",
#               "priors_initialized", "arrays": [{"name","dtype","shape","offset","nbytes"}]}
# remainder    raw little-endian array payloads, C order, in header order

CHECKPOINT_MAGIC = b"SPECGS\x00\x01"
CHECKPOINT_VERSION = 1
_ARRAY_ORDER = PARAM_NAMES + ("tags",)


def scene_to_bytes(scene: SpectralScene) -> bytes:
    arrays, payload, offset = [], io.BytesIO(), 0
    for name in _ARRAY_ORDER:
        arr = getattr(scene, name).detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes(order="C")
        arrays.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payload.write(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "band_table": scene.band_table.to_list(),
        "env_levels": scene.env_levels,
        "full_active": scene.full_active,
        "priors_initialized": scene.priors_initialized,
        "arrays": arrays,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload.getvalue()


def scene_from_bytes(data: bytes) -> SpectralScene:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a scene checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode())
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    base = 16 + hlen
    tensors = {}
    for a in header["arrays"]:
        raw = data[base + a["offset"] : base + a["offset"] + a["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(a["dtype"])).reshape(a["shape"])
        tensors[a["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    missing = set(_ARRAY_ORDER) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint is missing arrays: {sorted(missing)}")
    tags = tensors.pop("tags")
    return SpectralScene(
        band_table=BandTable.from_list(header["band_table"]),
        env_levels=header["env_levels"],
        full_active=header["full_active"],
        priors_initialized=header["priors_initialized"],
        tags=tags,
        **tensors,
    )


def save_scene(scene: SpectralScene, path: str | Path) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path: str | Path) -> SpectralScene:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene checkpoint not found: {path}")
    return scene_from_bytes(path.read_bytes())
