"""
Progressive training and restoration.

Every batch is a pure function of ``(seed, step)`` (``default_rng([seed, step])``),
so a run resumed from a checkpoint reproduces the uninterrupted trajectory.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import sys
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from sfim import analyze
from sfim.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from sfim.config import RunConfig, TrainPhase
from sfim.degrade import load_pairs, make_pair
from sfim.errors import ConfigError, NumericError
from sfim.losses import total_loss
from sfim.model import ModelConfig, SfimModel, build, forward, image_pyramid
from sfim.optim import AdamW, cosine_lr
from sfim.settings import get_settings
from sfim.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

Pair = Tuple[np.ndarray, np.ndarray]
LOG_NAME = "train.log.jsonl"
# live float64 buffers per feature element of one block, forward and backward
ACTIVATION_FACTOR = 48

__all__ = ["TrainPhase", "TrainState", "TrainResult", "train", "restore_image", "restore", "estimate_memory_mb"]


@dataclass
class TrainState:
    seed: int
    step: int = 0
    phase: int = 0
    phase_step: int = 0
    best_psnr: float = -math.inf
    best_step: int = -1

    def to_record(self) -> dict:
        record = asdict(self)
        record["best_psnr"] = None if math.isinf(self.best_psnr) else self.best_psnr
        return record

    @classmethod
    def from_record(cls, record: dict) -> "TrainState":
        best = record.get("best_psnr")
        return cls(seed=int(record["seed"]), step=int(record["step"]), phase=int(record["phase"]),
                   phase_step=int(record["phase_step"]),
                   best_psnr=-math.inf if best is None else float(best), best_step=int(record["best_step"]))


@dataclass
class TrainResult:
    model: SfimModel
    state: TrainState
    checkpoints: List[Path] = field(default_factory=list)
    log_path: Optional[Path] = None
    losses: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None


# ---------------------------------------------------------------- data

def split_holdout(pairs: Sequence[Pair], holdout: int) -> Tuple[List[Pair], List[Pair]]:
    """The last ``holdout`` pairs validate; small sets keep at most a fifth aside."""
    n_val = min(holdout, len(pairs) // 5)
    if n_val == 0:
        return list(pairs), []
    return list(pairs[:-n_val]), list(pairs[-n_val:])


def sample_batch(pairs: Sequence[Pair], rng: np.random.Generator, patch: int, batch: int) -> Tuple[np.ndarray, np.ndarray]:
    """Random crops with random horizontal flips."""
    degraded, clean = [], []
    for _ in range(batch):
        d, c = pairs[int(rng.integers(len(pairs)))]
        _, h, w = d.shape
        if h < patch or w < patch:
            raise ConfigError(f"patch {patch} exceeds training image size {h}×{w}")
        top, left = int(rng.integers(h - patch + 1)), int(rng.integers(w - patch + 1))
        d, c = d[:, top:top + patch, left:left + patch], c[:, top:top + patch, left:left + patch]
        if rng.uniform() < 0.5:
            d, c = d[..., ::-1], c[..., ::-1]
        degraded.append(d)
        clean.append(c)
    return np.stack(degraded), np.stack(clean)


def training_pairs(config: RunConfig, seed: int) -> List[Pair]:
    """Pairs from `data.path` when set, otherwise generated procedurally."""
    if config.data.path:
        return load_pairs(config.data.path)
    data_seed = config.data.seed if config.data.seed is not None else seed
    return [make_pair(i, data_seed, config.data.distribution, config.data.size, config.model.image_channels)[:2]
            for i in range(config.data.pairs)]


@dataclass
class _StepPlan:
    step: int
    phase: int
    phase_step: int


def _plan(config: RunConfig, state: TrainState, max_steps: Optional[int]) -> Iterator[_StepPlan]:
    step, taken = state.step, 0
    for k in range(state.phase, len(config.phases)):
        start = state.phase_step if k == state.phase else 0
        for phase_step in range(start, config.phases[k].steps):
            if max_steps is not None and taken >= max_steps:
                return
            yield _StepPlan(step, k, phase_step)
            step += 1
            taken += 1


class BatchPrefetcher:
    """Builds upcoming batches on a worker thread behind a bounded queue."""

    _DONE = object()

    def __init__(self, plans: Sequence[_StepPlan], make, depth: int):
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
        self._plans = plans
        self._make = make
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True, name="sfim-prefetch")
        self._thread.start()

    def _run(self) -> None:
        try:
            for plan in self._plans:
                if self._stop.is_set():
                    return
                self._queue.put((plan, self._make(plan)))
        except BaseException as exc:  # noqa: BLE001 - handed to the consumer
            self._queue.put(exc)
        finally:
            self._queue.put(self._DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        while self._thread.is_alive():
            try:
                self._queue.get(timeout=0.05)
            except queue.Empty:
                pass
        self._thread.join()


# ---------------------------------------------------------------- budget

def estimate_memory_mb(model_config: ModelConfig, parameters: int, patch: int, batch: int) -> float:
    """Parameters, gradients and both moments, plus a coarse activation bound."""
    param_bytes = 4 * parameters * 8
    activations = 0
    for i, width in enumerate(model_config.widths, start=1):
        side = patch / 2 ** (i - 1)
        blocks = model_config.encoder_blocks[i - 1] + model_config.decoder_blocks[i - 1]
        if model_config.placement[i - 1] == "sdb":
            blocks *= model_config.rdb_per_sdb
        activations += batch * width * side * side * (blocks + 4) * ACTIVATION_FACTOR * 8
    return (param_bytes + activations) / 2 ** 20


# ---------------------------------------------------------------- training

class _Log:
    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def validate(model: SfimModel, pairs: Sequence[Pair]) -> analyze.QualityReport:
    scores = []
    for degraded, clean in pairs:
        restored = forward(model, Tensor(degraded)).restored[0].data
        scores.append(analyze.quality(np.clip(restored, 0.0, 1.0), clean))
    return analyze.QualityReport(psnr=float(np.mean([s.psnr for s in scores])),
                                 ssim=float(np.mean([s.ssim for s in scores])))


def train(config: RunConfig, pairs: Optional[Sequence[Pair]] = None, seed: Optional[int] = None,
          out_dir: Optional[Union[str, Path]] = None, resume: Optional[Union[str, Path]] = None,
          max_steps: Optional[int] = None) -> TrainResult:
    """
    Run the phases of ``config``; checkpoints land in ``out_dir``.

    ``phase{k}.sfck`` closes phase k, ``best.sfck`` tracks validation PSNR and
    ``last.sfck`` holds the final parameters, including after a non-finite
    loss aborts the run.
    """
    seed = config.seed if seed is None else seed
    out_dir = Path(out_dir or config.output_dir)
    pairs = list(pairs) if pairs is not None else training_pairs(config, seed)
    if not pairs:
        raise ConfigError("training needs at least one pair")
    train_pairs, val_pairs = split_holdout(pairs, config.validation.holdout)

    if resume is not None:
        ckpt = load_checkpoint(resume, expected=config.model)
        model = ckpt.to_model()
        state = TrainState.from_record(ckpt.state["train"])
        opt_state = ckpt.optimizer_state()
        if state.seed != seed:
            raise ConfigError(f"checkpoint was trained with seed {state.seed}, not {seed}")
    else:
        model = build(config.model, seed)
        state = TrainState(seed=seed)
        opt_state = None
    optimizer = AdamW(model.parameters(), config.optimizer, opt_state)

    budget = get_settings().max_memory_mb
    for phase in config.phases:
        needed = estimate_memory_mb(config.model, model.num_parameters(), phase.patch, phase.batch)
        if needed > budget:
            raise ConfigError(f"phase with patch {phase.patch} and batch {phase.batch} needs ~{needed:.0f} MB, "
                              f"above the {budget} MB limit (SFIM_MAX_MEMORY_MB)")

    log = _Log(out_dir / LOG_NAME)
    result = TrainResult(model=model, state=state, log_path=log.path)

    def checkpoint(name: str) -> None:
        path = save_checkpoint(out_dir / name, model, {"train": state.to_record()}, optimizer.state)
        if path not in result.checkpoints:
            result.checkpoints.append(path)

    def make_batch(plan: _StepPlan):
        phase = config.phases[plan.phase]
        return sample_batch(train_pairs, np.random.default_rng([seed, plan.step]), phase.patch, phase.batch)

    plans = list(_plan(config, state, max_steps))
    prefetcher = BatchPrefetcher(plans, make_batch, config.prefetch) if config.prefetch else None
    batches = iter(prefetcher) if prefetcher else ((p, make_batch(p)) for p in plans)
    show = config.progress and sys.stderr.isatty()
    levels = config.model.levels

    try:
        for plan, (degraded, clean) in tqdm(batches, total=len(plans), disable=not show, desc="train"):
            phase = config.phases[plan.phase].inherit(config.optimizer)
            lr = cosine_lr(plan.phase_step, phase.steps, phase.lr_max, phase.lr_min)
            optimizer.zero_grad()
            with Tape() as tape:
                outputs = forward(model, Tensor(degraded))
                report = total_loss(outputs, image_pyramid(Tensor(clean), levels), config.loss)
            if not math.isfinite(report.total):
                raise NumericError(f"non-finite loss at step {plan.step}")
            tape.backward(report.objective)
            optimizer.step(lr)
            result.losses.append(report.total)

            state.step, state.phase, state.phase_step = plan.step + 1, plan.phase, plan.phase_step + 1
            if plan.phase_step == 0 or state.step % config.log_every == 0:
                log.write({"event": "step", "step": state.step, "phase": plan.phase + 1, "lr": lr,
                           **report.to_record()})
            if val_pairs and state.step % config.validation.every == 0:
                scores = validate(model, val_pairs)
                log.write({"event": "val", "step": state.step, **scores.to_record()})
                if scores.psnr > state.best_psnr:
                    state.best_psnr, state.best_step = scores.psnr, state.step
                    checkpoint("best.sfck")
            if state.phase_step == phase.steps:
                state.phase, state.phase_step = plan.phase + 1, 0
                checkpoint(f"phase{plan.phase + 1}.sfck")
                logger.info("phase %d done at step %d (loss %.5f)", plan.phase + 1, state.step, report.total)
    except NumericError:
        checkpoint("last.sfck")
        logger.error("training aborted at step %d; last good parameters kept in last.sfck", state.step)
        raise
    finally:
        if prefetcher is not None:
            prefetcher.close()

    checkpoint("last.sfck")
    return result


# ---------------------------------------------------------------- restoration

def _feather(length: int, overlap: int, lead: bool, trail: bool) -> np.ndarray:
    ramp = np.ones(length)
    if overlap > 0:
        edge = np.arange(1, overlap + 1) / (overlap + 1)
        if lead:
            ramp[:overlap] = edge[: min(overlap, length)]
        if trail:
            ramp[-overlap:] = edge[::-1][-min(overlap, length):]
    return ramp


def _tile_starts(extent: int, tile: int, overlap: int) -> List[int]:
    if extent <= tile:
        return [0]
    stride = tile - overlap
    starts = list(range(0, extent - tile, stride))
    return starts + [extent - tile]


def restore_image(model: SfimModel, image: np.ndarray, tile: Optional[int] = None, overlap: int = 16) -> np.ndarray:
    """Level-1 restoration of a ``C×H×W`` image, optionally tile by tile with feathered seams."""
    image = np.asarray(image, dtype=np.float64)
    _, height, width = image.shape
    if tile is None or (height <= tile and width <= tile):
        return np.clip(forward(model, Tensor(image)).restored[0].data, 0.0, 1.0)
    if tile <= overlap:
        raise ConfigError(f"tile size {tile} must exceed the overlap {overlap}")
    total = np.zeros_like(image)
    weight = np.zeros((height, width))
    rows, cols = _tile_starts(height, tile, overlap), _tile_starts(width, tile, overlap)
    for top in rows:
        for left in cols:
            patch = image[:, top:top + tile, left:left + tile]
            out = forward(model, Tensor(patch)).restored[0].data
            th, tw = patch.shape[-2:]
            w = np.outer(_feather(th, overlap, top > 0, top + th < height),
                         _feather(tw, overlap, left > 0, left + tw < width))
            total[:, top:top + th, left:left + tw] += out * w
            weight[top:top + th, left:left + tw] += w
    return np.clip(total / weight, 0.0, 1.0)


@dataclass
class RestoreResult:
    image: np.ndarray
    quality: Optional[analyze.QualityReport] = None


def restore(checkpoint: Union[str, Path, Checkpoint, SfimModel], image: np.ndarray,
            ground_truth: Optional[np.ndarray] = None, tile: Optional[int] = None,
            overlap: int = 16) -> RestoreResult:
    if isinstance(checkpoint, SfimModel):
        model = checkpoint
    else:
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        model = ckpt.to_model()
    if image.shape[0] != model.config.image_channels:
        raise ConfigError(f"checkpoint expects {model.config.image_channels}-channel images, "
                          f"got {image.shape[0]} channels")
    restored = restore_image(model, image, tile, overlap)
    report = analyze.quality(restored, ground_truth) if ground_truth is not None else None
    return RestoreResult(restored, report)
