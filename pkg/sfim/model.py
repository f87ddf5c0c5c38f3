"""
The multi-level restoration network: configuration, construction and forward pass.

Wiring per level (level 1 is the full-resolution image):

* encoder: a 3×3 stem with GELU on the level's pyramid image; at coarser levels
  the FAM merges in the finer level's encoder output; then the level's blocks.
* fusion: the AMIB of each level mixes all encoder outputs at that level's scale.
* decoder, coarse to fine: fused features plus the resized, 1×1-projected
  features carried up from the coarser level, then the level's blocks. Every
  level but the finest ends in a SAM, which restores that level's image and produces the
  carried features and the attention map; level 1 adds a 3×3 head to its input.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from sfim import ops
from sfim.blocks import (
    AmibParams,
    AmibSwitches,
    ConvParams,
    FamParams,
    FdbParams,
    Initializer,
    ParamGroup,
    SamParams,
    SdbParams,
    amib_forward,
    fam_forward,
    fdb_forward,
    sam_forward,
    sdb_forward,
)
from sfim.errors import ConfigError, NonFiniteError, ShapeError
from sfim.tensor import Tensor, block_scope

logger = logging.getLogger(__name__)

BlockType = Literal["sdb", "fdb"]
MAX_LEVELS = 4


class ModelConfig(BaseModel):
    levels: int = Field(4, ge=1, le=MAX_LEVELS)
    channels: Tuple[int, ...] = (48, 96, 192, 192)
    block_types: Optional[Tuple[BlockType, ...]] = None  # default: sdb at level 1, fdb below
    encoder_blocks: Tuple[int, ...] = (1, 4, 20, 20)
    decoder_blocks: Tuple[int, ...] = (1, 4, 20, 20)
    rdb_per_sdb: int = Field(8, ge=1)
    rdb_layers: int = Field(3, ge=1)
    growth: Optional[int] = Field(None, ge=1)  # default: half the level width
    patch: int = Field(8, ge=1)
    image_channels: Literal[3, 4] = 3
    amib: AmibSwitches = AmibSwitches()
    ca_reduction: int = Field(8, ge=1)
    sa_kernel: int = Field(7, ge=1)
    dffn_weight_mode: Literal["shared", "per_channel"] = "shared"

    @model_validator(mode="after")
    def _check_lengths(self) -> "ModelConfig":
        for name in ("channels", "encoder_blocks", "decoder_blocks"):
            values = getattr(self, name)
            if len(values) < self.levels:
                raise ValueError(f"{name} lists {len(values)} entries for {self.levels} levels")
            if any(v < 1 for v in values[: self.levels]):
                raise ValueError(f"{name} entries must be >= 1")
        if self.block_types is not None and len(self.block_types) < self.levels:
            raise ValueError(f"block_types lists {len(self.block_types)} entries for {self.levels} levels")
        if self.sa_kernel % 2 == 0:
            raise ValueError("sa_kernel must be odd")
        return self

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.channels[: self.levels])

    @property
    def placement(self) -> Tuple[BlockType, ...]:
        if self.block_types is not None:
            return tuple(self.block_types[: self.levels])
        return ("sdb",) + ("fdb",) * (self.levels - 1)

    @property
    def pad_multiple(self) -> int:
        return 2 ** (self.levels - 1) * self.patch

    def growth_for(self, width: int) -> int:
        return self.growth if self.growth is not None else max(1, width // 2)

    def with_embedding(self, dim: int) -> "ModelConfig":
        return self.model_copy(update={"channels": (dim, 2 * dim, 4 * dim, 4 * dim)})

    def config_json(self) -> str:
        return self.model_dump_json()


def load_model_config(payload: dict) -> ModelConfig:
    try:
        return ModelConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc


# ablation axes exposed as named configurations
AMIB_ROWS = {
    "amib-base": AmibSwitches(mib=False, ca=False, sa=False),
    "amib-mib": AmibSwitches(mib=True, ca=False, sa=False),
    "amib-mib-ca": AmibSwitches(mib=True, ca=True, sa=False),
    "amib-full": AmibSwitches(mib=True, ca=True, sa=True),
}


def ablation_config(name: str, base: Optional[ModelConfig] = None) -> ModelConfig:
    """
    Named variants of ``base`` (default config when omitted).

    ``amib-base|amib-mib|amib-mib-ca|amib-full``, ``embed-<d>``, ``levels-<n>``
    and ``placement-<S|F per level>`` (e.g. ``placement-SSFF``; SDB levels use a
    single block).
    """
    base = base or ModelConfig()
    if name in AMIB_ROWS:
        return base.model_copy(update={"amib": AMIB_ROWS[name]})
    match = re.fullmatch(r"(embed|levels|placement)-(\w+)", name)
    if match is None:
        raise ConfigError(f"unknown ablation {name!r}")
    axis, value = match.groups()
    try:
        if axis == "embed":
            return load_model_config({**base.with_embedding(int(value)).model_dump()})
        if axis == "levels":
            return load_model_config({**base.model_dump(), "levels": int(value)})
    except ValueError as exc:
        raise ConfigError(f"invalid ablation {name!r}: {exc}") from exc
    letters = value.upper()
    if len(letters) != base.levels or set(letters) - {"S", "F"}:
        raise ConfigError(f"placement {value!r} must give S or F for each of {base.levels} levels")
    types = tuple("sdb" if c == "S" else "fdb" for c in letters)
    enc = tuple(1 if t == "sdb" else n for t, n in zip(types, base.encoder_blocks))
    dec = tuple(1 if t == "sdb" else n for t, n in zip(types, base.decoder_blocks))
    return load_model_config({**base.model_dump(), "block_types": types, "encoder_blocks": enc, "decoder_blocks": dec})


# ---------------------------------------------------------------- parameters

@dataclass(eq=False)
class LevelParams(ParamGroup):
    stem: ConvParams
    encoder: List[ParamGroup]
    amib: AmibParams
    decoder: List[ParamGroup]
    fam: Optional[FamParams] = None
    skip: Optional[ConvParams] = None
    sam: Optional[SamParams] = None
    head: Optional[ConvParams] = None
    block_type: str = "fdb"


@dataclass(eq=False)
class SfimModel(ParamGroup):
    level: List[LevelParams]
    config: ModelConfig = field(default_factory=ModelConfig)

    def output_projections(self) -> List[ConvParams]:
        """Every image-producing conv: the finest head and each coarser SAM's image conv."""
        convs = []
        for lvl in self.level:
            convs.extend(c for c in (lvl.head, lvl.sam.to_image if lvl.sam is not None else None) if c is not None)
        return convs

    def zero_output_projections(self) -> "SfimModel":
        """Zero every image-producing conv, making restoration the identity at all levels."""
        for conv in self.output_projections():
            conv.zero_()
        return self

    def randomize_output_projections(self, rng: np.random.Generator, scale: float = 0.1) -> "SfimModel":
        """Small random image convs, so every parameter reaches the outputs."""
        for conv in self.output_projections():
            conv.weight.data[...] = rng.uniform(-scale, scale, size=conv.weight.shape)
        return self

    def state_arrays(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_arrays(self, arrays: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
            p.data[...] = value


def _block(init: Initializer, config: ModelConfig, block_type: str, width: int) -> ParamGroup:
    if block_type == "sdb":
        return SdbParams.init(init, width, config.growth_for(width), config.rdb_per_sdb, config.rdb_layers)
    return FdbParams.init(init, width, config.patch, config.dffn_weight_mode)


def build(config: ModelConfig, seed: int = 0) -> SfimModel:
    """
    Deterministically initialize a model from ``seed``. Image convs start at
    zero, so a fresh model returns its input at every level.
    """
    init = Initializer(np.random.default_rng(seed))
    widths = config.widths
    levels: List[LevelParams] = []
    for i, (width, block_type) in enumerate(zip(widths, config.placement), start=1):
        levels.append(LevelParams(
            stem=init.conv(width, config.image_channels, 3),
            fam=FamParams.init(init, widths[i - 2], width) if i >= 2 else None,
            encoder=[_block(init, config, block_type, width) for _ in range(config.encoder_blocks[i - 1])],
            amib=AmibParams.init(init, widths, i, config.amib, config.ca_reduction, config.sa_kernel),
            decoder=[_block(init, config, block_type, width) for _ in range(config.decoder_blocks[i - 1])],
            skip=init.conv(width, widths[i], 1) if i < config.levels else None,
            sam=SamParams.init(init, width, config.image_channels) if i >= 2 else None,
            head=init.conv(config.image_channels, width, 3) if i == 1 else None,
            block_type=block_type,
        ))
    model = SfimModel(levels, config).zero_output_projections()
    for name, p in model.named_parameters():
        p.name = name
    logger.info("built %d-level model with %d parameters (seed %d)", config.levels, model.num_parameters(), seed)
    return model


# ---------------------------------------------------------------- forward

@dataclass
class MultiLevelOutput:
    restored: List[Tensor]
    attention: List[Tensor]


def half_size(height: int, width: int) -> Tuple[int, int]:
    return max(1, (height + 1) // 2), max(1, (width + 1) // 2)


def image_pyramid(image: Tensor, levels: int) -> List[Tensor]:
    """``[I_1, …, I_L]`` by successive bilinear halving."""
    pyramid = [image]
    for _ in range(levels - 1):
        pyramid.append(ops.interpolate(pyramid[-1], half_size(*pyramid[-1].shape[-2:])))
    return pyramid


def level_size(height: int, width: int, level: int) -> Tuple[int, int]:
    scale = 2 ** (level - 1)
    return math.ceil(height / scale), math.ceil(width / scale)


def _run_blocks(x: Tensor, blocks: List[ParamGroup], block_type: str, scope: str) -> Tensor:
    run = sdb_forward if block_type == "sdb" else fdb_forward
    for j, params in enumerate(blocks):
        with block_scope(f"{scope}.{block_type}{j}"):
            x = run(x, params)
    return x


def check_image(image: Tensor, channels: int) -> None:
    if not np.all(np.isfinite(image.data)):
        raise NonFiniteError("input")
    if image.data.min() < 0.0 or image.data.max() > 1.0:
        raise ConfigError("input image values must lie in [0, 1]")
    if image.ndim not in (3, 4) or image.shape[-3] != channels:
        raise ShapeError(f"model expects {channels}-channel images, got shape {image.shape}")


def forward(model: SfimModel, image: Tensor) -> MultiLevelOutput:
    """Restore ``image`` (``C×H×W`` or ``N×C×H×W``); outputs are cropped to the input size."""
    config = model.config
    check_image(image, config.image_channels)
    height, width = image.shape[-2:]
    multiple = config.pad_multiple
    padded = ops.pad2d(image, (0, -height % multiple, 0, -width % multiple), "reflect")
    pyramid = image_pyramid(padded, config.levels)

    encoded: List[Tensor] = []
    for i, (lvl, level_image) in enumerate(zip(model.level, pyramid), start=1):
        scope = f"enc.level{i}"
        with block_scope(scope):
            x = ops.gelu(lvl.stem(level_image))
            if lvl.fam is not None:
                x = fam_forward(x, encoded[-1], lvl.fam)
        encoded.append(_run_blocks(x, lvl.encoder, lvl.block_type, scope))

    fused = []
    for i, lvl in enumerate(model.level, start=1):
        with block_scope(f"fuse.level{i}"):
            fused.append(amib_forward(encoded, i, lvl.amib))

    restored: List[Optional[Tensor]] = [None] * config.levels
    attention: List[Tensor] = []
    carried: Optional[Tensor] = None
    for i in range(config.levels, 0, -1):
        lvl = model.level[i - 1]
        scope = f"dec.level{i}"
        h = fused[i - 1]
        if carried is not None:
            with block_scope(scope):
                h = ops.add(h, ops.interpolate(lvl.skip(carried), h.shape[-2:]))
        d = _run_blocks(h, lvl.decoder, lvl.block_type, scope)
        with block_scope(scope):
            if lvl.sam is not None:
                sam = sam_forward(d, pyramid[i - 1], lvl.sam)
                carried = sam.features
                restored[i - 1] = sam.restored
                attention.insert(0, sam.attention)
            else:
                restored[i - 1] = ops.add(lvl.head(d), pyramid[i - 1])

    cropped = []
    for i, out in enumerate(restored, start=1):
        h_i, w_i = level_size(height, width, i)
        cropped.append(ops.crop2d(out, 0, 0, h_i, w_i))
    attention = [ops.crop2d(s, 0, 0, *level_size(height, width, i))
                 for i, s in enumerate(attention, start=2)]
    return MultiLevelOutput(cropped, attention)
