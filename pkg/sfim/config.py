"""Run-config files: YAML sections validated into :class:`RunConfig`."""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from sfim.degrade import SpecDistribution
from sfim.errors import ConfigError
from sfim.losses import LossWeights
from sfim.model import ModelConfig
from sfim.optim import OptimizerConfig


class TrainPhase(BaseModel):
    steps: int = Field(..., ge=0)
    patch: int = Field(..., ge=1)
    batch: int = Field(4, ge=1)
    lr_max: Optional[float] = Field(None, gt=0)  # None inherits the optimizer section
    lr_min: Optional[float] = Field(None, ge=0)

    def inherit(self, optimizer: OptimizerConfig) -> "TrainPhase":
        return self.model_copy(update={
            "lr_max": optimizer.lr_max if self.lr_max is None else self.lr_max,
            "lr_min": optimizer.lr_min if self.lr_min is None else self.lr_min,
        })


class DataConfig(BaseModel):
    path: Optional[str] = None  # existing dataset directory; procedural pairs when unset
    pairs: int = Field(200, ge=1)
    size: int = Field(64, ge=8)
    seed: Optional[int] = None  # defaults to the run seed
    distribution: SpecDistribution = SpecDistribution()


class ValidationConfig(BaseModel):
    every: int = Field(200, ge=1)
    holdout: int = Field(20, ge=0)


class RunConfig(BaseModel):
    model: ModelConfig = ModelConfig()
    loss: LossWeights = LossWeights()
    optimizer: OptimizerConfig = OptimizerConfig()
    phases: List[TrainPhase] = Field(default_factory=list)
    data: DataConfig = DataConfig()
    validation: ValidationConfig = ValidationConfig()
    output_dir: str = "runs/desk"
    seed: int = 0
    log_every: int = Field(10, ge=1)
    prefetch: int = Field(2, ge=0)  # bounded queue depth; 0 builds batches inline
    progress: bool = True

    @model_validator(mode="after")
    def _check_phases(self) -> "RunConfig":
        self.phases = [phase.inherit(self.optimizer) for phase in self.phases]
        multiple = self.model.pad_multiple
        for i, phase in enumerate(self.phases):
            if phase.patch % multiple:
                raise ValueError(f"phase {i + 1} patch {phase.patch} is not a multiple of {multiple}")
            if i and phase.patch < self.phases[i - 1].patch:
                raise ValueError("phase patch sizes must be nondecreasing")
            if phase.lr_min > phase.lr_max:
                raise ValueError(f"phase {i + 1} has lr_min above lr_max")
        return self

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.phases)


def parse_run_config(payload: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(payload or {})
    except ValidationError as exc:
        raise ConfigError(f"invalid run config: {exc}") from exc


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if payload is not None and not isinstance(payload, dict):
        raise ConfigError(f"{path} must hold a mapping of sections")
    return parse_run_config(payload)
