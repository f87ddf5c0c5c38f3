"""
Training objectives.

Per level: Charbonnier plus weighted (1 − SSIM), amplitude and phase terms, where the
amplitude and phase terms are unnormalized L1 sums over every frequency bin.
The ECFNet-style variant replaces the two spectral terms by a complex L1 sum.
All terms are computed per image and averaged over the batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from sfim import ops
from sfim.errors import ShapeError
from sfim.model import MultiLevelOutput
from sfim.tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2

FftVariant = Literal["amp_phase", "complex_l1", "none"]


class LossWeights(BaseModel):
    ssim_weight: float = Field(1.0, ge=0)
    amplitude_weight: float = Field(1.0, ge=0)  # also weights the complex-L1 term
    phase_weight: float = Field(1.0, ge=0)
    fft_variant: FftVariant = "amp_phase"
    charbonnier_eps: float = Field(1e-3, gt=0)
    charbonnier_mode: Literal["global", "per_pixel"] = "global"

    def without_fft(self) -> "LossWeights":
        return self.model_copy(update={"amplitude_weight": 0.0, "phase_weight": 0.0})

    @classmethod
    def ecfnet(cls, weight: float = 1.0) -> "LossWeights":
        """Charbonnier plus ``weight`` times the complex L1 spectrum distance."""
        return cls(ssim_weight=0.0, amplitude_weight=weight, phase_weight=0.0, fft_variant="complex_l1")


def _check_pair(restored: Tensor, target: Tensor) -> None:
    if restored.shape != target.shape:
        raise ShapeError(f"restored {restored.shape} and target {target.shape} differ")
    if restored.ndim not in (3, 4):
        raise ShapeError(f"expected C×H×W or N×C×H×W images, got {restored.shape}")


def _per_image(values: Tensor) -> Tensor:
    """Sum over C, H, W and average over the batch."""
    totals = ops.sum(values, axis=(-3, -2, -1))
    return ops.mean(totals) if totals.ndim else totals


def charbonnier(restored: Tensor, target: Tensor, eps: float = 1e-3, mode: str = "global") -> Tensor:
    """``sqrt(‖R − G‖² + ε²)`` with the squared Frobenius norm of each image."""
    _check_pair(restored, target)
    diff = ops.sub(restored, target)
    if mode == "per_pixel":
        per_pixel = ops.sqrt(ops.add_scalar(ops.square(diff), eps * eps))
        return ops.mean(ops.mean(per_pixel, axis=(-3, -2, -1)))
    norms = ops.sqrt(ops.add_scalar(ops.sum(ops.square(diff), axis=(-3, -2, -1)), eps * eps))
    return ops.mean(norms)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _local_stats(x: Tensor, y: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    height, width = x.shape[-2:]
    if height < SSIM_WINDOW or width < SSIM_WINDOW:
        # whole-image statistics when the window does not fit
        def blur(t: Tensor) -> Tensor:
            return ops.mean(t, axis=(-2, -1), keepdims=True)
    else:
        channels = x.shape[-3]
        window = Tensor(np.broadcast_to(gaussian_window(), (channels, 1, SSIM_WINDOW, SSIM_WINDOW)))

        def blur(t: Tensor) -> Tensor:
            return ops.depthwise_conv2d(t, window)

    mu_x, mu_y = blur(x), blur(y)
    var_x = ops.sub(blur(ops.square(x)), ops.square(mu_x))
    var_y = ops.sub(blur(ops.square(y)), ops.square(mu_y))
    cov = ops.sub(blur(ops.mul(x, y)), ops.mul(mu_x, mu_y))
    return mu_x, mu_y, var_x, var_y, cov


def ssim_index(restored: Tensor, target: Tensor) -> Tensor:
    """Mean SSIM (per channel, then averaged), batch-averaged; a scalar tensor."""
    _check_pair(restored, target)
    mu_x, mu_y, var_x, var_y, cov = _local_stats(restored, target)
    numerator = ops.mul(ops.add_scalar(ops.scale(ops.mul(mu_x, mu_y), 2.0), SSIM_C1),
                        ops.add_scalar(ops.scale(cov, 2.0), SSIM_C2))
    denominator = ops.mul(ops.add_scalar(ops.add(ops.square(mu_x), ops.square(mu_y)), SSIM_C1),
                          ops.add_scalar(ops.add(var_x, var_y), SSIM_C2))
    ssim_map = ops.div(numerator, denominator)
    return ops.mean(ops.mean(ssim_map, axis=(-3, -2, -1)))


def ssim_loss(restored: Tensor, target: Tensor) -> Tensor:
    return ops.add_scalar(ops.neg(ssim_index(restored, target)), 1.0)


def fft_loss(restored: Tensor, target: Tensor) -> Tuple[Tensor, Tensor]:
    """(Σ | |F_R| − |F_G| |, Σ | wrap(φ_R − φ_G) |) over every bin and channel."""
    _check_pair(restored, target)
    spec_r, spec_g = ops.fft2(restored), ops.fft2(target)
    amplitude = _per_image(ops.abs(ops.sub(spec_r.abs(), spec_g.abs())))
    phase = _per_image(ops.abs(ops.wrap_phase(ops.sub(spec_r.angle(), spec_g.angle()))))
    return amplitude, phase


def ecfnet_fft_loss(restored: Tensor, target: Tensor) -> Tensor:
    """Σ (|ΔRe F| + |ΔIm F|) over every bin and channel."""
    _check_pair(restored, target)
    spec_r, spec_g = ops.fft2(restored), ops.fft2(target)
    real = ops.abs(ops.sub(spec_r.real, spec_g.real))
    imag = ops.abs(ops.sub(spec_r.imag, spec_g.imag))
    return _per_image(ops.add(real, imag))


@dataclass
class LevelTerms:
    level: int
    charbonnier: float
    ssim: float
    amplitude: float = 0.0
    phase: float = 0.0
    complex_l1: float = 0.0
    total: float = 0.0


@dataclass
class LossReport:
    levels: List[LevelTerms]
    total: float
    objective: Tensor = field(repr=False, compare=False)

    def to_record(self) -> dict:
        return {"total": self.total, "levels": [asdict(t) for t in self.levels]}


def level_loss(restored: Tensor, target: Tensor, weights: LossWeights, level: int = 1) -> Tuple[Tensor, LevelTerms]:
    char = charbonnier(restored, target, weights.charbonnier_eps, weights.charbonnier_mode)
    ssim_term = ssim_loss(restored, target)
    terms = LevelTerms(level=level, charbonnier=char.item(), ssim=ssim_term.item())
    objective = char
    if weights.ssim_weight:
        objective = ops.add(objective, ops.scale(ssim_term, weights.ssim_weight))
    if weights.fft_variant == "amp_phase":
        amplitude, phase = fft_loss(restored, target)
        terms.amplitude, terms.phase = amplitude.item(), phase.item()
        if weights.amplitude_weight:
            objective = ops.add(objective, ops.scale(amplitude, weights.amplitude_weight))
        if weights.phase_weight:
            objective = ops.add(objective, ops.scale(phase, weights.phase_weight))
    elif weights.fft_variant == "complex_l1":
        complex_l1 = ecfnet_fft_loss(restored, target)
        terms.complex_l1 = complex_l1.item()
        if weights.amplitude_weight:
            objective = ops.add(objective, ops.scale(complex_l1, weights.amplitude_weight))
    terms.total = objective.item()
    return objective, terms


def total_loss(outputs: Union[MultiLevelOutput, Sequence[Tensor]], targets: Sequence[Tensor],
               weights: LossWeights) -> LossReport:
    """Sum of per-level losses; restored images and ``targets`` are finest-first pyramids."""
    restored = outputs.restored if isinstance(outputs, MultiLevelOutput) else list(outputs)
    if len(restored) != len(targets):
        raise ShapeError(f"{len(restored)} restored levels for {len(targets)} targets")
    objective = None
    levels = []
    for i, (r, g) in enumerate(zip(restored, targets), start=1):
        level_objective, terms = level_loss(r, g, weights, i)
        objective = level_objective if objective is None else ops.add(objective, level_objective)
        levels.append(terms)
    return LossReport(levels=levels, total=objective.item(), objective=objective)
