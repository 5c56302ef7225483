"""PSNR / SSIM and the per-band evaluation table."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch

from .config import Config
from .losses import ssim as _ssim
from .raster import render_bands
from .scene import SpectralScene


def psnr(img: torch.Tensor, ref: torch.Tensor, max_val: float = 1.0) -> float:
    """10 log10(max^2 / MSE); identical images give +inf."""
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(img.shape)} vs {tuple(ref.shape)}")
    mse = float(((img - ref) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def ssim(img: torch.Tensor, ref: torch.Tensor) -> float:
    return float(_ssim(img, ref))


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


@dataclass
class EvalTable:
    per_view: list[dict]  # {"view", "band", "psnr", "ssim"}
    per_band: dict[str, dict]  # band -> {"psnr", "ssim", "views"}
    average: dict  # {"psnr", "ssim"}

    def to_tsv(self) -> str:
        lines = ["band\tpsnr\tssim\tviews"]
        for band, r in self.per_band.items():
            lines.append(f"{band}\t{_fmt(r['psnr'])}\t{_fmt(r['ssim'])}\t{r['views']}")
        lines.append(f"average\t{_fmt(self.average['psnr'])}\t{_fmt(self.average['ssim'])}\t")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        def enc(d):
            return {k: (_fmt(v) if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}

        data = {
            "per_view": [enc(r) for r in self.per_view],
            "per_band": {b: enc(r) for b, r in self.per_band.items()},
            "average": enc(self.average),
        }
        return json.dumps(data, indent=1, sort_keys=True) + "\n"


def _mean(values: list[float]) -> float:
    # sorted so the result does not depend on view order
    return math.fsum(sorted(values)) / len(values)


def summarize(per_view: list[dict], band_order: list[str]) -> EvalTable:
    per_band = {}
    for band in band_order:
        rows = [r for r in per_view if r["band"] == band]
        if rows:
            per_band[band] = {
                "psnr": _mean([r["psnr"] for r in rows]),
                "ssim": _mean([r["ssim"] for r in rows]),
                "views": len(rows),
            }
    average = {
        "psnr": _mean([r["psnr"] for r in per_band.values()]),
        "ssim": _mean([r["ssim"] for r in per_band.values()]),
    }
    return EvalTable(per_view, per_band, average)


def evaluate(
    scene: SpectralScene,
    dataset,
    split: str = "test",
    bands: list[str] | None = None,
    cfg: Config | None = None,
    threads: int | None = None,
) -> EvalTable:
    """Render every view of ``split`` and average PSNR / SSIM per band, then over bands."""
    cfg = cfg or Config()
    views = sorted(dataset.split(split), key=lambda v: v.name)
    if not views:
        raise ValueError(f"dataset has no '{split}' views to evaluate")
    bands = bands or scene.band_table.names
    rows = []
    with torch.no_grad():
        for v in views:
            outs = render_bands(scene, v.camera, bands, cfg.raster, cfg.shading, cfg.color, threads=threads)
            for b in bands:
                rows.append(
                    {"view": v.name, "band": b, "psnr": psnr(outs[b].color, v.images[b]), "ssim": ssim(outs[b].color, v.images[b])}
                )
    return summarize(rows, list(bands))
