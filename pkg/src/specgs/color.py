"""CIE colour science: spectra to XYZ, XYZ to sRGB, and per-band RGB weights.

Per-band renders are recombined into a display image by weighting each band's
radiance with the colour-matching functions sampled at the band centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np

from .config import SRGB_D65_XYZ_TO_RGB

FULL_SPECTRA = "full"

_SRGB_THRESHOLD = 0.0031308

# libm pow element by element: numpy's SIMD pow is not correctly rounded and
# its code path depends on the host CPU, which would make display images
# machine-dependent in the last bit
_pow = np.vectorize(math.pow, otypes=[np.float64])


@dataclass(frozen=True)
class CmfTable:
    wavelengths_nm: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    fz: np.ndarray

    def __post_init__(self):
        n = len(self.wavelengths_nm)
        if not (len(self.fx) == len(self.fy) == len(self.fz) == n):
            raise ValueError("CMF columns must match the wavelength count")
        if np.any(np.diff(self.wavelengths_nm) <= 0):
            raise ValueError("CMF wavelengths must be strictly ascending")
        if min(self.fx.min(), self.fy.min(), self.fz.min()) < 0:
            raise ValueError("CMF values must be non-negative")
        if self.wavelengths_nm[0] > 380 or self.wavelengths_nm[-1] < 780:
            raise ValueError("CMF table must cover 380-780 nm")

    def at(self, wavelengths_nm) -> np.ndarray:
        """Linearly interpolated (fx, fy, fz), shape (..., 3)."""
        wl = np.asarray(wavelengths_nm, dtype=np.float64)
        lo, hi = self.wavelengths_nm[0], self.wavelengths_nm[-1]
        if np.any(wl < lo) or np.any(wl > hi):
            raise ValueError(f"wavelength out of range [{lo}, {hi}] nm")
        return np.stack(
            [np.interp(wl, self.wavelengths_nm, f) for f in (self.fx, self.fy, self.fz)],
            axis=-1,
        )


@lru_cache(maxsize=None)
def load_cmf() -> CmfTable:
    """The bundled CIE 1931 2-degree observer (360-830 nm, 5 nm steps)."""
    text = resources.files("specgs").joinpath("data/cie1931_2deg_5nm.txt").read_text()
    return parse_cmf(text)


def parse_cmf(text: str) -> CmfTable:
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append([float(v) for v in line.split()])
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError("CMF file needs four columns: wavelength, x, y, z")
    return CmfTable(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


@dataclass(frozen=True)
class Spd:
    wavelengths_nm: np.ndarray
    power: np.ndarray
    delta_lambda_nm: float

    def __post_init__(self):
        object.__setattr__(self, "wavelengths_nm", np.asarray(self.wavelengths_nm, dtype=np.float64))
        object.__setattr__(self, "power", np.asarray(self.power, dtype=np.float64))
        if self.wavelengths_nm.shape != self.power.shape:
            raise ValueError("wavelengths and power must have the same length")
        if np.any(self.power < 0):
            raise ValueError("spectral power must be non-negative")
        if len(self.wavelengths_nm) > 1:
            steps = np.diff(self.wavelengths_nm)
            if not np.allclose(steps, self.delta_lambda_nm, rtol=0, atol=1e-9):
                raise ValueError("SPD samples must be uniformly spaced by delta_lambda_nm")

    @classmethod
    def uniform(cls, start_nm: float, stop_nm: float, step_nm: float, power=1.0) -> "Spd":
        wl = np.arange(start_nm, stop_nm + step_nm / 2, step_nm, dtype=np.float64)
        return cls(wl, np.broadcast_to(np.asarray(power, dtype=np.float64), wl.shape).copy(), step_nm)


@dataclass(frozen=True)
class ColorMatrix:
    m: np.ndarray
    kind: str = "xyz_to_linear_rgb"

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("colour matrix must be 3x3")
        if self.kind not in ("xyz_to_linear_rgb", "xyz_to_srgb_combined"):
            raise ValueError(f"unknown colour matrix kind '{self.kind}'")
        if abs(np.linalg.det(m)) < 1e-12:
            raise ValueError("colour matrix must be invertible")
        object.__setattr__(self, "m", m)


def srgb_matrix(kind: str = "xyz_to_linear_rgb", m=SRGB_D65_XYZ_TO_RGB) -> ColorMatrix:
    return ColorMatrix(np.asarray(m, dtype=np.float64), kind)


@dataclass(frozen=True)
class Band:
    name: str
    center_nm: float | None = None
    delta_nm: float | None = None

    @property
    def is_full(self) -> bool:
        return self.name == FULL_SPECTRA


@dataclass(frozen=True)
class BandTable:
    bands: tuple[Band, ...] = field(default_factory=tuple)

    def __post_init__(self):
        bands = tuple(self.bands)
        object.__setattr__(self, "bands", bands)
        if sum(b.is_full for b in bands) != 1:
            raise ValueError("band table needs exactly one full-spectra band")
        centers = [b.center_nm for b in bands if not b.is_full]
        if len(set(centers)) != len(centers):
            raise ValueError("band centres must be unique")
        names = [b.name for b in bands]
        if len(set(names)) != len(names):
            raise ValueError("band names must be unique")

    @classmethod
    def from_centers(cls, centers_nm: Sequence[float], delta_nm: float = 40.0) -> "BandTable":
        bands = [Band(f"{c:g}", float(c), float(delta_nm)) for c in centers_nm]
        return cls(tuple(bands) + (Band(FULL_SPECTRA),))

    def __len__(self):
        return len(self.bands)

    def __iter__(self):
        return iter(self.bands)

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.bands]

    @property
    def spectral(self) -> list[Band]:
        return [b for b in self.bands if not b.is_full]

    @property
    def full_index(self) -> int:
        return self.names.index(FULL_SPECTRA)

    def index(self, band: str | Band) -> int:
        name = band.name if isinstance(band, Band) else str(band)
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown band '{name}'") from None

    def __getitem__(self, band: str) -> Band:
        return self.bands[self.index(band)]

    def to_list(self) -> list[dict]:
        return [
            {"name": b.name, "center_nm": b.center_nm, "delta_nm": b.delta_nm}
            for b in self.bands
        ]

    @classmethod
    def from_list(cls, items: list[dict]) -> "BandTable":
        return cls(tuple(Band(d["name"], d.get("center_nm"), d.get("delta_nm")) for d in items))


DEFAULT_BAND_CENTERS = (460.0, 500.0, 540.0, 580.0, 620.0)


def tristimulus(spd: Spd, cmf: CmfTable | None = None) -> np.ndarray:
    """XYZ = sum over samples of cmf(lambda) * L(lambda) * dlambda."""
    cmf = cmf or load_cmf()
    if spd.power.size == 0:
        raise ValueError("empty spectrum")
    f = cmf.at(spd.wavelengths_nm)
    return (f * spd.power[:, None]).sum(axis=0) * spd.delta_lambda_nm


def chromaticity(xyz) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    return xyz[:2] / xyz.sum()


def xyz_to_linear_rgb(xyz, m: ColorMatrix) -> np.ndarray:
    if m.kind != "xyz_to_linear_rgb":
        raise ValueError("expected an xyz_to_linear_rgb matrix")
    return np.asarray(xyz, dtype=np.float64) @ m.m.T


def gamma_encode(rgb_linear, mode: str = "srgb", gamma: float = 2.2) -> np.ndarray:
    x = np.maximum(np.asarray(rgb_linear, dtype=np.float64), 0.0)
    if mode == "power":
        return _pow(x, 1.0 / gamma)
    if mode != "srgb":
        raise ValueError(f"unknown gamma mode '{mode}'")
    hi = 1.055 * _pow(np.maximum(x, _SRGB_THRESHOLD), 1.0 / 2.4) - 0.055
    return np.where(x <= _SRGB_THRESHOLD, 12.92 * x, hi)


def gamma_decode(rgb_gamma, mode: str = "srgb", gamma: float = 2.2) -> np.ndarray:
    y = np.maximum(np.asarray(rgb_gamma, dtype=np.float64), 0.0)
    if mode == "power":
        return _pow(y, gamma)
    if mode != "srgb":
        raise ValueError(f"unknown gamma mode '{mode}'")
    hi = _pow((np.maximum(y, 0.04045) + 0.055) / 1.055, 2.4)
    return np.where(y <= _SRGB_THRESHOLD * 12.92, y / 12.92, hi)


def clip01(rgb) -> np.ndarray:
    return np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)


def band_rgb_weight(lambda_nm: float, delta_lambda_nm: float, cmf: CmfTable, m: ColorMatrix) -> np.ndarray:
    """RGB per unit band radiance: (M @ cmf(lambda)) * dlambda."""
    if m.kind != "xyz_to_srgb_combined":
        raise ValueError("band weights need an xyz_to_srgb_combined matrix")
    return (m.m @ cmf.at(lambda_nm)) * delta_lambda_nm


def combine_bands(
    band_images: Sequence[np.ndarray],
    band_table: BandTable,
    cmf: CmfTable | None = None,
    m: ColorMatrix | None = None,
    gamma_mode: str = "srgb",
    gamma: float = 2.2,
) -> np.ndarray:
    """Recombine per-band radiance images (one per non-full band) into a display image."""
    cmf = cmf or load_cmf()
    m = m or srgb_matrix("xyz_to_srgb_combined")
    bands = band_table.spectral
    if len(band_images) != len(bands):
        raise ValueError(f"expected {len(bands)} band images, got {len(band_images)}")
    shape = np.shape(band_images[0])
    for img in band_images:
        if np.shape(img) != shape:
            raise ValueError(f"band image dimensions differ: {np.shape(img)} vs {shape}")
    # scalar radiance maps (H, W) broadcast against the RGB weight
    acc = np.zeros(shape if len(shape) == 3 else shape + (3,), dtype=np.float64)
    for img, band in zip(band_images, bands):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[..., None]
        acc = acc + band_rgb_weight(band.center_nm, band.delta_nm, cmf, m) * img
    return clip01(gamma_encode(acc, gamma_mode, gamma))
