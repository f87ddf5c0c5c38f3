"""
Desk-scale trend runs: restored vs degraded PSNR, FFT loss on/off, AMIB Base vs full.

Each variant trains from the same run config and seed set; held-out metrics
are collected into a pandas frame and summarized by median per variant.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from sfim.analyze import psnr
from sfim.config import RunConfig, load_run_config
from sfim.losses import fft_loss
from sfim.model import AMIB_ROWS, SfimModel
from sfim.tensor import Tensor
from sfim.train import Pair, restore_image, split_holdout, train, training_pairs

logger = logging.getLogger(__name__)

DESK_PRESET = Path(__file__).resolve().parent.parent / "presets" / "desk.yaml"

Variant = Callable[[RunConfig], RunConfig]

VARIANTS: Dict[str, Variant] = {
    "baseline": lambda c: c,
    "no-fft": lambda c: c.model_copy(update={"loss": c.loss.without_fft()}),
    "amib-base": lambda c: c.model_copy(update={"model": c.model.model_copy(update={"amib": AMIB_ROWS["amib-base"]})}),
}


def holdout_metrics(model: SfimModel, pairs: Sequence[Pair]) -> Dict[str, float]:
    """Holdout means of restored and degraded PSNR and of the spectral amplitude L1."""
    restored_psnr, degraded_psnr, amplitude = [], [], []
    for degraded, clean in pairs:
        restored = restore_image(model, degraded)
        restored_psnr.append(psnr(restored, clean))
        degraded_psnr.append(psnr(degraded, clean))
        amplitude.append(fft_loss(Tensor(restored), Tensor(clean))[0].item())
    return {
        "restored_psnr": float(np.mean(restored_psnr)),
        "degraded_psnr": float(np.mean(degraded_psnr)),
        "amplitude_l1": float(np.mean(amplitude)),
    }


def run_trends(config: Optional[RunConfig] = None, seeds: Sequence[int] = (0, 1, 2),
               variants: Sequence[str] = tuple(VARIANTS), out_dir: Union[str, Path] = "runs/trends",
               max_steps: Optional[int] = None) -> pd.DataFrame:
    """One training run per (variant, seed); one row of held-out metrics each."""
    config = config or load_run_config(DESK_PRESET)
    out_dir = Path(out_dir)
    rows: List[dict] = []
    for seed in seeds:
        pairs = training_pairs(config, seed)
        _, holdout = split_holdout(pairs, config.validation.holdout)
        for name in variants:
            variant = VARIANTS[name](config)
            result = train(variant, pairs, seed=seed, out_dir=out_dir / f"{name}-seed{seed}", max_steps=max_steps)
            metrics = holdout_metrics(result.model, holdout)
            logger.info("%s seed %d: restored %.2f dB, degraded %.2f dB",
                        name, seed, metrics["restored_psnr"], metrics["degraded_psnr"])
            rows.append({"variant": name, "seed": seed, "final_loss": result.final_loss, **metrics})
    frame = pd.DataFrame(rows)
    frame["psnr_gain"] = frame["restored_psnr"] - frame["degraded_psnr"]
    return frame


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.groupby("variant")[["restored_psnr", "degraded_psnr", "psnr_gain", "amplitude_l1"]].median()
