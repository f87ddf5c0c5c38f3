"""Image files: 8-bit PNG through Pillow, exact float data as SFTN tensors."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from sfim.errors import ConfigError, SfimIOError
from sfim.formats import load_tensor, save_tensor

PathLike = Union[str, Path]
TENSOR_SUFFIXES = {".sftn", ".raw"}
IMAGE_SUFFIXES = {".png"} | TENSOR_SUFFIXES


def is_tensor_file(path: PathLike) -> bool:
    return Path(path).suffix.lower() in TENSOR_SUFFIXES


def load_image(path: PathLike) -> np.ndarray:
    """Return a ``C×H×W`` float64 array; PNG values are scaled to [0, 1]."""
    path = Path(path)
    if is_tensor_file(path):
        array = load_tensor(path)
        if array.ndim == 2:
            array = array[None]
        if array.ndim != 3:
            raise ConfigError(f"{path}: expected a C×H×W tensor, got shape {array.shape}")
        return array
    try:
        with Image.open(path) as img:
            if img.mode not in ("RGB", "RGBA"):
                img = img.convert("RGBA" if "A" in img.getbands() else "RGB")
            pixels = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise SfimIOError(f"no such image: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise SfimIOError(f"cannot read image {path}: {exc}") from exc
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_uint8(array: np.ndarray) -> np.ndarray:
    return np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: PathLike, array: np.ndarray) -> Path:
    """Write ``C×H×W`` data; PNG output is quantized to 8 bits (1, 3 or 4 channels)."""
    path = Path(path)
    array = np.asarray(array, dtype=np.float64)
    if is_tensor_file(path):
        save_tensor(path, array)
        return path
    if array.ndim == 2:
        array = array[None]
    channels = array.shape[0]
    if channels not in (1, 3, 4):
        raise ConfigError(f"PNG output needs 1, 3 or 4 channels, got {channels}")
    pixels = np.ascontiguousarray(to_uint8(array).transpose(1, 2, 0))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels[..., 0] if channels == 1 else pixels).save(path, format="PNG")
    except OSError as exc:
        raise SfimIOError(f"cannot write image {path}: {exc}") from exc
    return path
