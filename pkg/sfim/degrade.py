"""
Synthetic under-display-camera degradations.

A display aperture mask gives a Fraunhofer PSF (``|FFT(mask)|²``, centered and
normalized). ``degrade_image`` boosts highlights, convolves with the PSF,
applies transmittance, blurs, adds noise and clips. ``make_dataset`` writes
paired SFTN files plus a manifest.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy import ndimage

from sfim.errors import ConfigError, SfimIOError
from sfim.formats import load_tensor, save_tensor
from sfim.imageio import IMAGE_SUFFIXES, load_image
from sfim.settings import get_settings

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
MANIFEST_JSONL = "manifest.jsonl"
MANIFEST_CSV = "manifest.csv"

ApertureKind = Literal["open", "vertical_slit", "horizontal_slit", "grid", "circular"]


# ---------------------------------------------------------------- apertures and PSFs

class ApertureConfig(BaseModel):
    kind: ApertureKind = "grid"
    size: int = Field(32, ge=2, le=512)
    slit_width: int = Field(2, ge=1)
    period: int = Field(8, ge=2)
    opening: int = Field(2, ge=1)
    radius: float = Field(8.0, gt=0)


def make_aperture(config: ApertureConfig) -> np.ndarray:
    n = config.size
    mask = np.zeros((n, n))
    if config.kind == "open":
        mask[:] = 1.0
    elif config.kind == "vertical_slit":
        start = (n - config.slit_width) // 2
        mask[:, start:start + config.slit_width] = 1.0
    elif config.kind == "horizontal_slit":
        start = (n - config.slit_width) // 2
        mask[start:start + config.slit_width, :] = 1.0
    elif config.kind == "grid":
        open_rows = (np.arange(n) % config.period) < config.opening
        mask[np.ix_(open_rows, open_rows)] = 1.0
    else:
        yy, xx = np.mgrid[:n, :n] - (n - 1) / 2.0
        mask[np.hypot(yy, xx) <= config.radius] = 1.0
    return mask


def aperture_to_psf(mask: np.ndarray, size: int) -> np.ndarray:
    """Centered ``size×size`` kernel proportional to ``|FFT2(mask)|²``, summing to 1."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2 or size < 1:
        raise ConfigError(f"aperture must be 2-D and the PSF size positive, got {mask.shape} / {size}")
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ConfigError("aperture transmission must lie in [0, 1]")
    if not np.any(mask > 0.0):
        raise ConfigError("aperture mask is entirely opaque")
    extent = max(mask.shape[0], mask.shape[1], size)
    power = np.fft.fftshift(np.abs(np.fft.fft2(mask, s=(extent, extent))) ** 2)
    center = extent // 2
    start = center - size // 2
    psf = power[start:start + size, start:start + size]
    return psf / psf.sum()


def psf_anisotropy(psf: np.ndarray) -> float:
    """Ratio of horizontal to vertical second moment of the PSF marginals."""
    rows, cols = psf.shape
    horizontal = psf.sum(axis=0)
    vertical = psf.sum(axis=1)
    spread_x = float(np.sum(horizontal * (np.arange(cols) - (cols - 1) / 2.0) ** 2))
    spread_y = float(np.sum(vertical * (np.arange(rows) - (rows - 1) / 2.0) ** 2))
    return (spread_x + 1e-12) / (spread_y + 1e-12)


# ---------------------------------------------------------------- degradation

class DegradationSpec(BaseModel):
    aperture: Optional[ApertureConfig] = ApertureConfig()  # None means a delta PSF
    psf_size: int = Field(31, ge=1)
    noise_sigma: float = Field(0.01, ge=0, le=1)
    blur_sigma: float = Field(0.8, ge=0, le=16)
    transmittance: float = Field(0.7, gt=0, le=1)
    highlight_threshold: float = Field(0.9, ge=0, le=1)
    highlight_gain: float = Field(8.0, ge=1)
    channel_scales: Optional[Tuple[float, ...]] = None  # per-channel PSF strength

    @classmethod
    def identity(cls) -> "DegradationSpec":
        return cls(aperture=None, noise_sigma=0.0, blur_sigma=0.0, transmittance=1.0, highlight_gain=1.0)

    def psf(self) -> np.ndarray:
        if self.aperture is None:
            return np.ones((1, 1))
        return aperture_to_psf(make_aperture(self.aperture), self.psf_size)


def load_spec(payload: Union[Dict[str, Any], str, Path]) -> DegradationSpec:
    """Validate a spec from a mapping, or from a JSON/YAML file path."""
    try:
        if isinstance(payload, (str, Path)):
            text = Path(payload).read_text(encoding="utf-8")
            payload = yaml.safe_load(text) or {}
        return DegradationSpec.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"invalid degradation spec: {exc}") from exc
    except OSError as exc:
        raise SfimIOError(f"cannot read spec {payload}: {exc}") from exc
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"invalid degradation spec: {exc}") from exc


def degrade_image(clean: np.ndarray, spec: DegradationSpec, seed: int = 0) -> np.ndarray:
    """Apply the degradation pipeline to a ``C×H×W`` image in [0, 1]."""
    x = np.array(clean, dtype=np.float64)
    if x.ndim != 3:
        raise ConfigError(f"expected a C×H×W image, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ConfigError("clean image values must be finite and lie in [0, 1]")
    if spec.channel_scales is not None and len(spec.channel_scales) != x.shape[0]:
        raise ConfigError(f"{len(spec.channel_scales)} channel scales for {x.shape[0]} channels")

    if spec.highlight_gain != 1.0:
        x = np.where(x > spec.highlight_threshold, x * spec.highlight_gain, x)
    if spec.aperture is not None:
        psf = spec.psf()
        scales = spec.channel_scales or (1.0,) * x.shape[0]
        x = np.stack([ndimage.convolve(x[c], psf * s, mode="reflect") for c, s in enumerate(scales)])
    x = x * spec.transmittance
    if spec.blur_sigma > 0.0:
        x = ndimage.gaussian_filter(x, sigma=(0.0, spec.blur_sigma, spec.blur_sigma), mode="reflect")
    if spec.noise_sigma > 0.0:
        x = x + np.random.default_rng(seed).normal(0.0, spec.noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0)


class SpecDistribution(BaseModel):
    """Ranges from which one spec per dataset item is drawn."""

    apertures: Tuple[ApertureKind, ...] = ("grid", "vertical_slit", "horizontal_slit")
    aperture_size: int = Field(32, ge=2)
    psf_size: int = Field(31, ge=1)
    noise_sigma: Tuple[float, float] = (0.0, 0.02)
    blur_sigma: Tuple[float, float] = (0.0, 1.2)
    transmittance: Tuple[float, float] = (0.6, 0.95)
    highlight_gain: Tuple[float, float] = (8.0, 8.0)

    @model_validator(mode="after")
    def _ordered(self) -> "SpecDistribution":
        for name in ("noise_sigma", "blur_sigma", "transmittance", "highlight_gain"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is reversed: ({lo}, {hi})")
        if not self.apertures:
            raise ValueError("at least one aperture kind is required")
        return self

    def sample(self, rng: np.random.Generator) -> DegradationSpec:
        kind = self.apertures[int(rng.integers(len(self.apertures)))]
        return DegradationSpec(
            aperture=ApertureConfig(kind=kind, size=self.aperture_size),
            psf_size=self.psf_size,
            noise_sigma=float(rng.uniform(*self.noise_sigma)),
            blur_sigma=float(rng.uniform(*self.blur_sigma)),
            transmittance=float(rng.uniform(*self.transmittance)),
            highlight_gain=float(rng.uniform(*self.highlight_gain)),
        )


# ---------------------------------------------------------------- scenes

def splitmix64(seed: int, index: int) -> int:
    """Per-item seed derived from the master seed."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _background(rng: np.random.Generator, channels: int, size: int, low: float, high: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size] / max(size - 1, 1)
    tint = rng.uniform(0.6, 1.0, size=(channels, 1, 1))
    ramp = low + (high - low) * (0.5 * xx + 0.5 * yy)
    return tint * ramp[None]


def point_lights(rng: np.random.Generator, channels: int = 3, size: int = 64) -> np.ndarray:
    """Bright discs on a dark background: flare-dominant."""
    image = _background(rng, channels, size, 0.02, 0.12)
    yy, xx = np.mgrid[:size, :size]
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        radius = rng.uniform(1.0, max(1.5, size / 24))
        image[:, np.hypot(yy - cy, xx - cx) <= radius] = 1.0
    return image


def texture(rng: np.random.Generator, channels: int = 3, size: int = 64) -> np.ndarray:
    """Mixed sinusoids and a checker: blur- and noise-dominant."""
    yy, xx = np.mgrid[:size, :size] / size
    field = np.zeros((size, size))
    for _ in range(4):
        fy, fx = rng.uniform(1.0, size / 6, size=2)
        field += np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    checker = ((np.floor(yy * 8) + np.floor(xx * 8)) % 2) - 0.5
    field = 0.5 + 0.08 * field + 0.15 * checker
    tint = rng.uniform(0.7, 1.0, size=(channels, 1, 1))
    return np.clip(tint * field[None], 0.0, 0.85)


def test_card(channels: int = 3, size: int = 128) -> np.ndarray:
    """Fixed bright-light card: dark ramp, three lights and a textured band."""
    rng = np.random.default_rng(2024)
    image = _background(rng, channels, size, 0.03, 0.15)
    yy, xx = np.mgrid[:size, :size]
    for cy, cx, r in ((0.25, 0.25, 3.0), (0.3, 0.7, 2.0), (0.7, 0.5, 4.0)):
        image[:, np.hypot(yy - cy * size, xx - cx * size) <= r * size / 128] = 1.0
    band = slice(int(0.82 * size), int(0.95 * size))
    image[:, band, :] = texture(rng, channels, size)[:, band, :]
    return image


# ---------------------------------------------------------------- datasets

@dataclass
class PairRecord:
    id: str
    degraded: str
    clean: str
    scene: str
    seed: int
    spec: Dict[str, Any]

    def row(self) -> Dict[str, Any]:
        spec = self.spec
        aperture = spec.get("aperture") or {}
        return {
            "id": self.id,
            "degraded": self.degraded,
            "clean": self.clean,
            "scene": self.scene,
            "seed": self.seed,
            "aperture": aperture.get("kind", "none"),
            "noise_sigma": spec["noise_sigma"],
            "blur_sigma": spec["blur_sigma"],
            "transmittance": spec["transmittance"],
            "highlight_gain": spec["highlight_gain"],
        }


MANIFEST_COLUMNS = ["id", "degraded", "clean", "scene", "seed", "aperture",
                    "noise_sigma", "blur_sigma", "transmittance", "highlight_gain"]


def source_images(source: Union[str, Path]) -> List[Path]:
    source = Path(source)
    if source.is_file() and source.suffix.lower() in IMAGE_SUFFIXES:
        return [source]
    if not source.is_dir():
        raise SfimIOError(f"image source {source} does not exist")
    files = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"source directory {source} holds no images")
    return files


def _crop(image: np.ndarray, rng: np.random.Generator, size: Optional[int]) -> np.ndarray:
    _, h, w = image.shape
    if size is None or h < size or w < size:
        return image
    top = int(rng.integers(h - size + 1))
    left = int(rng.integers(w - size + 1))
    return image[:, top:top + size, left:left + size]


def make_pair(index: int, seed: int, distribution: SpecDistribution, size: Optional[int] = 64, channels: int = 3,
              sources: Optional[Sequence[Path]] = None,
              spec: Optional[DegradationSpec] = None) -> Tuple[np.ndarray, np.ndarray, DegradationSpec, str, int]:
    item_seed = splitmix64(seed, index)
    rng = np.random.default_rng(item_seed)
    if sources:
        clean = _crop(load_image(sources[index % len(sources)]), rng, size)
        scene = "file"
    elif rng.uniform() < 0.5:
        clean, scene = point_lights(rng, channels, size or 64), "lights"
    else:
        clean, scene = texture(rng, channels, size or 64), "texture"
    spec = spec or distribution.sample(rng)
    degraded = degrade_image(clean, spec, seed=int(rng.integers(2 ** 63)))
    return degraded, clean, spec, scene, item_seed


def make_dataset(out_dir: Union[str, Path], n: int, seed: int = 0,
                 distribution: Optional[SpecDistribution] = None, size: Optional[int] = 64, channels: int = 3,
                 source: Optional[Union[str, Path]] = None, spec: Optional[DegradationSpec] = None,
                 workers: Optional[int] = None) -> List[PairRecord]:
    """Generate ``n`` pairs into ``out_dir``; identical arguments give identical bytes."""
    if n < 0:
        raise ConfigError(f"pair count must be >= 0, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    distribution = distribution or SpecDistribution()
    sources = source_images(source) if source is not None else None
    workers = workers or get_settings().threads or min(4, os.cpu_count() or 1)

    def build(index: int) -> PairRecord:
        degraded, clean, item_spec, scene, item_seed = make_pair(index, seed, distribution, size, channels,
                                                                 sources, spec)
        pair_id = f"pair_{index:05d}"
        save_tensor(out_dir / f"{pair_id}_degraded.sftn", degraded)
        save_tensor(out_dir / f"{pair_id}_clean.sftn", clean)
        return PairRecord(pair_id, f"{pair_id}_degraded.sftn", f"{pair_id}_clean.sftn", scene, item_seed,
                          item_spec.model_dump(mode="json"))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        records = list(pool.map(build, range(n)))

    with (out_dir / MANIFEST_JSONL).open("w", encoding="utf-8") as jf:
        for record in records:
            jf.write(json.dumps(asdict(record), sort_keys=True) + "\n")
    pd.DataFrame([r.row() for r in records], columns=MANIFEST_COLUMNS).to_csv(
        out_dir / MANIFEST_CSV, index=False, encoding="utf-8")
    logger.info("wrote %d pairs to %s", len(records), out_dir)
    return records


def read_manifest(data_dir: Union[str, Path]) -> List[PairRecord]:
    path = Path(data_dir) / MANIFEST_JSONL
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise SfimIOError(f"cannot read manifest {path}: {exc}") from exc
    return [PairRecord(**json.loads(line)) for line in lines if line.strip()]


def load_pairs(data_dir: Union[str, Path]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """``(degraded, clean)`` arrays in manifest order."""
    data_dir = Path(data_dir)
    return [(load_tensor(data_dir / r.degraded), load_tensor(data_dir / r.clean)) for r in read_manifest(data_dir)]
