"""Spectral degradation profiling and image-quality metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Union

import numpy as np
from matplotlib import colormaps
from PIL import Image

from sfim import losses
from sfim.errors import ShapeError, SfimIOError
from sfim.imageio import save_image
from sfim.tensor import Tensor

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
TOP_FRACTION = 0.001
LOG_SCALE = 1.0

ArrayOrTensor = Union[np.ndarray, Tensor]


def _array(x: ArrayOrTensor) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    return data


def _pair(a: ArrayOrTensor, b: ArrayOrTensor) -> tuple[np.ndarray, np.ndarray]:
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


@dataclass
class SpectralDiffMap:
    """``|A(degraded) − A(clean)|`` per channel, DC centered; ``summary`` averages channels."""

    per_channel: np.ndarray
    summary: np.ndarray
    log_summary: np.ndarray


def spectral_diff(degraded: ArrayOrTensor, clean: ArrayOrTensor, log_scale: float = LOG_SCALE) -> SpectralDiffMap:
    """
    Maps are indexed ``[ky, kx]`` with DC at ``(H // 2, W // 2)``; rows are
    vertical frequency, columns horizontal frequency.

    A slit flare smears highlights across the slit (a vertical slit gives a
    horizontal streak), so its energy concentrates in the bins with zero
    frequency along the streak: the ``kx = 0`` column for a vertical slit and
    the ``ky = 0`` row for a horizontal one.
    """
    d, c = _pair(degraded, clean)
    diff = np.abs(np.abs(np.fft.fft2(d)) - np.abs(np.fft.fft2(c)))
    per_channel = np.fft.fftshift(diff, axes=(-2, -1))
    summary = per_channel.mean(axis=0)
    return SpectralDiffMap(per_channel, summary, np.log1p(log_scale * summary))


def spatial_diff(degraded: ArrayOrTensor, clean: ArrayOrTensor) -> np.ndarray:
    d, c = _pair(degraded, clean)
    return np.abs(d - c).mean(axis=0)


def flare_prior_score(diff: SpectralDiffMap) -> float:
    """Share of off-DC spectral energy held by the strongest 0.1% of bins."""
    energy = diff.summary ** 2
    h, w = energy.shape
    mask = np.ones_like(energy, dtype=bool)
    mask[h // 2, w // 2] = False
    values = energy[mask]
    total = values.sum()
    if values.size == 0 or total <= 0.0:
        return 0.0
    k = max(1, math.ceil(TOP_FRACTION * values.size))
    top = np.partition(values, values.size - k)[values.size - k:]
    return float(top.sum() / total)


def psnr(restored: ArrayOrTensor, target: ArrayOrTensor) -> float:
    """PSNR at peak 1.0 from one MSE over all channels and pixels; a batch averages its images."""
    r, g = _pair(restored, target)
    if r.ndim == 3:
        r, g = r[None], g[None]
    mse = ((r - g) ** 2).reshape(r.shape[0], -1).mean(axis=1)
    scores = [PSNR_CAP if m == 0.0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / m)) for m in mse]
    return float(np.mean(scores))


def ssim(restored: ArrayOrTensor, target: ArrayOrTensor) -> float:
    r, g = _pair(restored, target)
    return losses.ssim_index(Tensor(r), Tensor(g)).item()


@dataclass
class QualityReport:
    psnr: float
    ssim: float

    def to_record(self) -> dict:
        return asdict(self)


def quality(restored: ArrayOrTensor, target: ArrayOrTensor) -> QualityReport:
    return QualityReport(psnr=psnr(restored, target), ssim=ssim(restored, target))


def heatmap_pixels(values: np.ndarray, colormap: Literal["gray", "viridis"] = "gray") -> np.ndarray:
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0.0:
        # blank maps render black in every colormap
        shape = values.shape if colormap == "gray" else values.shape + (3,)
        return np.zeros(shape, dtype=np.uint8)
    norm = values / peak
    if colormap == "gray":
        return np.round(norm * 255.0).astype(np.uint8)
    rgba = colormaps["viridis"](norm)
    return np.round(rgba[..., :3] * 255.0).astype(np.uint8)


def export_heatmap(diff: Union[SpectralDiffMap, np.ndarray], path: Union[str, Path],
                   colormap: Literal["gray", "viridis"] = "gray", log: bool = True) -> Path:
    """Write an 8-bit PNG of the (log-compressed) summary map."""
    if isinstance(diff, SpectralDiffMap):
        values = diff.log_summary if log else diff.summary
    else:
        values = np.log1p(LOG_SCALE * diff) if log else diff
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.ascontiguousarray(heatmap_pixels(values, colormap))).save(path, format="PNG")
    except OSError as exc:
        raise SfimIOError(f"cannot write heatmap {path}: {exc}") from exc
    return path


@dataclass
class AnalysisResult:
    flare_prior_score: float
    quality: QualityReport
    spatial_path: Path
    spectral_path: Path

    def to_record(self) -> dict:
        return {"flare_prior_score": self.flare_prior_score, **self.quality.to_record(),
                "spatial_diff": str(self.spatial_path), "spectral_diff": str(self.spectral_path)}


def analyze_pair(degraded: ArrayOrTensor, clean: ArrayOrTensor, out_dir: Union[str, Path],
                 colormap: Literal["gray", "viridis"] = "viridis") -> AnalysisResult:
    out_dir = Path(out_dir)
    diff = spectral_diff(degraded, clean)
    spatial = spatial_diff(degraded, clean)
    spatial_path = save_image(out_dir / "spatial_diff.png", spatial / spatial.max() if spatial.max() > 0 else spatial)
    spectral_path = export_heatmap(diff, out_dir / "spectral_diff.png", colormap)
    result = AnalysisResult(flare_prior_score(diff), quality(degraded, clean), spatial_path, spectral_path)
    logger.info("flare prior score %.4f, psnr %.2f dB", result.flare_prior_score, result.quality.psnr)
    return result
