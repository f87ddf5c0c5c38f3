"""Central finite-difference verification of recorded gradients."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from sfim.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

RELATIVE_FLOOR = 1e-8


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), RELATIVE_FLOOR)


@dataclass
class GradCheckReport:
    name: str
    groups: Dict[str, float] = field(default_factory=dict)
    samples: int = 0
    error: Optional[str] = None

    @property
    def worst(self) -> float:
        if self.error is not None:
            return math.inf
        return max(self.groups.values(), default=0.0)

    @property
    def worst_group(self) -> Optional[str]:
        if not self.groups:
            return None
        return max(self.groups, key=self.groups.get)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.error is None and self.worst < tolerance

    def to_record(self) -> dict:
        return {"name": self.name, "worst": self.worst, "worst_group": self.worst_group,
                "samples": self.samples, "error": self.error}


def default_group(name: str) -> str:
    """``enc.level2.fdb0.fsas.qkv.weight`` -> ``enc.level2.fdb0.fsas.qkv``."""
    return name.rsplit(".", 1)[0] if "." in name else name


def _allocate(groups: Dict[str, List[str]], params: Mapping[str, Tensor], samples: int) -> Dict[str, int]:
    per_group = max(1, math.ceil(samples / max(len(groups), 1)))
    return {g: min(per_group, sum(params[n].size for n in names)) for g, names in groups.items()}


def gradient_check(forward: Callable[[], Tensor], params: Mapping[str, Tensor], samples: int = 200,
                   h: float = 1e-5, seed: int = 0, name: str = "check",
                   group_of: Callable[[str], str] = default_group) -> GradCheckReport:
    """
    Compare backward() against central differences on randomly sampled entries.

    ``forward`` must rebuild the scalar loss from the current parameter values
    and be deterministic. Failures are recorded in the report, never raised.
    """
    report = GradCheckReport(name=name)
    try:
        for p in params.values():
            p.zero_grad()
        with Tape() as tape:
            loss = forward()
        tape.backward(loss)
        analytic = {n: p.grad.copy() for n, p in params.items()}

        groups: Dict[str, List[str]] = {}
        for n in params:
            groups.setdefault(group_of(n), []).append(n)
        budget = _allocate(groups, params, samples)

        rng = np.random.default_rng(seed)
        for group, names in groups.items():
            sizes = np.array([params[n].size for n in names])
            picks = rng.choice(int(sizes.sum()), size=budget[group], replace=False)
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            worst = 0.0
            for flat in picks:
                owner = int(np.searchsorted(offsets, flat, side="right") - 1)
                tensor = params[names[owner]]
                index = np.unravel_index(int(flat - offsets[owner]), tensor.shape)
                original = tensor.data[index]
                try:
                    tensor.data[index] = original + h
                    plus = forward().item()
                    tensor.data[index] = original - h
                    minus = forward().item()
                finally:
                    tensor.data[index] = original
                numeric = (plus - minus) / (2.0 * h)
                worst = max(worst, relative_error(float(analytic[names[owner]][index]), numeric))
                report.samples += 1
            report.groups[group] = worst
    except Exception as exc:  # noqa: BLE001 - reported, never raised
        report.error = f"{type(exc).__name__}: {exc}"
        logger.warning("gradient check %s failed: %s", name, report.error)
    else:
        logger.info("gradient check %s: worst relative error %.3e over %d samples",
                    name, report.worst, report.samples)
    return report
