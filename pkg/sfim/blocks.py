"""
Restoration building blocks as parameter groups plus pure forward functions.

Every ``*_forward`` is a function of (input, params) only and never mutates
its parameters. Features are ``C×H×W`` or ``N×C×H×W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from sfim import ops
from sfim.errors import ConfigError, ShapeError
from sfim.tensor import Tensor, block_scope, parameter

DEFAULT_PATCH = 8


# ---------------------------------------------------------------- parameter groups

@dataclass(eq=False)
class ParamGroup:
    """Base for parameter containers; walks Tensor, ParamGroup and list fields."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for f in fields(self):
            value = getattr(self, f.name)
            key = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield key, value
            elif isinstance(value, ParamGroup):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, ParamGroup):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_(self) -> "ParamGroup":
        for _, p in self.named_parameters():
            p.data[...] = 0.0
        return self


@dataclass(eq=False)
class ConvParams(ParamGroup):
    weight: Tensor
    bias: Optional[Tensor] = None

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]

    def __call__(self, x: Tensor, padding_mode: str = "reflect") -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, padding=self.kernel // 2, padding_mode=padding_mode)


@dataclass(eq=False)
class DepthwiseParams(ParamGroup):
    weight: Tensor
    bias: Optional[Tensor] = None

    def __call__(self, x: Tensor) -> Tensor:
        k = self.weight.shape[-1]
        return ops.depthwise_conv2d(x, self.weight, self.bias, padding=k // 2)


@dataclass(eq=False)
class NormParams(ParamGroup):
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)


class Initializer:
    """He-uniform convolutions, identity norms; all draws come from one generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def _uniform(self, shape: Tuple[int, ...], fan_in: int) -> Tensor:
        bound = math.sqrt(6.0 / fan_in)
        return parameter(self.rng.uniform(-bound, bound, size=shape))

    def conv(self, c_out: int, c_in: int, kernel: int, bias: bool = True) -> ConvParams:
        if min(c_out, c_in, kernel) < 1:
            raise ConfigError(f"invalid conv widths {c_in}->{c_out} (kernel {kernel})")
        weight = self._uniform((c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        return ConvParams(weight, parameter(np.zeros(c_out)) if bias else None)

    def depthwise(self, channels: int, multiplier: int, kernel: int) -> DepthwiseParams:
        weight = self._uniform((channels, multiplier, kernel, kernel), kernel * kernel)
        return DepthwiseParams(weight, parameter(np.zeros(channels * multiplier)))

    def norm(self, channels: int) -> NormParams:
        return NormParams(parameter(np.ones(channels)), parameter(np.zeros(channels)))


# ---------------------------------------------------------------- spatial-domain blocks

@dataclass(eq=False)
class RdbParams(ParamGroup):
    layers: List[ConvParams]
    fusion: ConvParams
    base: int = 0
    growth: int = 0

    @classmethod
    def init(cls, init: Initializer, base: int, growth: int, n_layers: int = 3) -> "RdbParams":
        layers = [init.conv(growth, base + c * growth, 3) for c in range(n_layers)]
        fusion = init.conv(base, base + n_layers * growth, 1)
        return cls(layers, fusion, base, growth)


def rdb_forward(x: Tensor, params: RdbParams) -> Tensor:
    """Dense GELU-conv layers over the running concatenation, 1×1 fusion, residual."""
    width = x.shape[x.ndim - 3]
    if width != params.base:
        raise ShapeError(f"RDB expects {params.base} channels, got {width}")
    features = [x]
    for layer in params.layers:
        features.append(ops.gelu(layer(ops.concat_channels(features))))
    return ops.add(x, params.fusion(ops.concat_channels(features)))


@dataclass(eq=False)
class SdbParams(ParamGroup):
    rdbs: List[RdbParams]

    @classmethod
    def init(cls, init: Initializer, base: int, growth: int, n_rdb: int = 8, n_layers: int = 3) -> "SdbParams":
        return cls([RdbParams.init(init, base, growth, n_layers) for _ in range(n_rdb)])


def sdb_forward(x: Tensor, params: SdbParams) -> Tensor:
    for i, rdb in enumerate(params.rdbs):
        with block_scope(f"rdb{i}"):
            x = rdb_forward(x, rdb)
    return x


# ---------------------------------------------------------------- patches

def _patch_grid(height: int, width: int, patch: int) -> Tuple[int, int]:
    return -(-height // patch), -(-width // patch)


def patch_unfold(x: Tensor, patch: int = DEFAULT_PATCH) -> Tensor:
    """``(…, C, H, W)`` -> ``(…, C·nh·nw, P, P)``; reflect-pads bottom/right to a multiple of P."""
    *lead, channels, height, width = x.shape
    nh, nw = _patch_grid(height, width, patch)
    x = ops.pad2d(x, (0, nh * patch - height, 0, nw * patch - width), "reflect")
    k = len(lead)
    x = ops.reshape(x, (*lead, channels, nh, patch, nw, patch))
    x = ops.transpose(x, (*range(k), k, k + 1, k + 3, k + 2, k + 4))
    return ops.reshape(x, (*lead, channels * nh * nw, patch, patch))


def patch_fold(patches: Tensor, channels: int, height: int, width: int, patch: int = DEFAULT_PATCH) -> Tensor:
    """Exact inverse of :func:`patch_unfold`, cropping the padding away."""
    *lead, _, _, _ = patches.shape
    nh, nw = _patch_grid(height, width, patch)
    if patches.shape[-3] != channels * nh * nw:
        raise ShapeError(f"{patches.shape[-3]} patches do not tile {channels}×{height}×{width} at P={patch}")
    k = len(lead)
    x = ops.reshape(patches, (*lead, channels, nh, nw, patch, patch))
    x = ops.transpose(x, (*range(k), k, k + 1, k + 3, k + 2, k + 4))
    x = ops.reshape(x, (*lead, channels, nh * patch, nw * patch))
    return ops.crop2d(x, 0, 0, height, width)


def spectral_correlation(q: Tensor, k: Tensor, patch: int = DEFAULT_PATCH) -> Tensor:
    """Per-patch circular cross-correlation of q against k via the frequency domain."""
    if q.shape != k.shape:
        raise ShapeError(f"query {q.shape} and key {k.shape} differ")
    channels, height, width = q.shape[-3:]
    product = ops.fft2(patch_unfold(q, patch)) * ops.fft2(patch_unfold(k, patch)).conj()
    return patch_fold(ops.ifft2(product), channels, height, width, patch)


# ---------------------------------------------------------------- frequency-domain blocks

@dataclass(eq=False)
class FsasParams(ParamGroup):
    norm: NormParams
    to_qkv: ConvParams
    qkv_dw: DepthwiseParams
    attn_norm: NormParams
    project_out: ConvParams
    patch: int = DEFAULT_PATCH

    @classmethod
    def init(cls, init: Initializer, channels: int, patch: int = DEFAULT_PATCH) -> "FsasParams":
        return cls(
            norm=init.norm(channels),
            to_qkv=init.conv(3 * channels, channels, 1),
            qkv_dw=init.depthwise(3 * channels, 1, 3),
            attn_norm=init.norm(channels),
            project_out=init.conv(channels, channels, 1),
            patch=patch,
        )


def fsas_forward(x: Tensor, params: FsasParams) -> Tensor:
    with block_scope("fsas"):
        hidden = params.qkv_dw(params.to_qkv(params.norm(x)))
        q, k, v = ops.split_channels(hidden, 3)
        attention = spectral_correlation(q, k, params.patch)
        return ops.add(x, params.project_out(ops.mul(params.attn_norm(attention), v)))


@dataclass(eq=False)
class DffnParams(ParamGroup):
    norm: NormParams
    project_in: ConvParams
    freq_weight: Tensor
    project_out: ConvParams
    patch: int = DEFAULT_PATCH

    @classmethod
    def init(cls, init: Initializer, channels: int, patch: int = DEFAULT_PATCH,
             weight_mode: str = "shared") -> "DffnParams":
        if weight_mode == "shared":
            shape: Tuple[int, ...] = (patch, patch)
        elif weight_mode == "per_channel":
            shape = (2 * channels, patch, patch)
        else:
            raise ConfigError(f"unknown DFFN weight mode {weight_mode!r}")
        return cls(
            norm=init.norm(channels),
            project_in=init.conv(2 * channels, channels, 1),
            freq_weight=parameter(np.ones(shape)),
            project_out=init.conv(channels, channels, 1),
            patch=patch,
        )


def frequency_filter(z: Tensor, weight: Tensor, patch: int = DEFAULT_PATCH) -> Tensor:
    """Scale every patch spectrum of ``z`` by ``weight`` (P×P shared, or C×P×P)."""
    *lead, channels, height, width = z.shape
    nh, nw = _patch_grid(height, width, patch)
    patches = ops.reshape(patch_unfold(z, patch), (*lead, channels, nh * nw, patch, patch))
    if weight.ndim == 2:
        w = ops.reshape(weight, (1,) * (len(lead) + 2) + (patch, patch))
    elif weight.shape[0] == channels:
        w = ops.reshape(weight, (1,) * len(lead) + (channels, 1, patch, patch))
    else:
        raise ShapeError(f"frequency weight {weight.shape} does not match {channels} channels")
    filtered = ops.ifft2(ops.fft2(patches) * w)
    filtered = ops.reshape(filtered, (*lead, channels * nh * nw, patch, patch))
    return patch_fold(filtered, channels, height, width, patch)


def dffn_forward(x: Tensor, params: DffnParams) -> Tensor:
    with block_scope("dffn"):
        z = frequency_filter(params.project_in(params.norm(x)), params.freq_weight, params.patch)
        return ops.add(x, params.project_out(ops.geglu(z)))


@dataclass(eq=False)
class FdbParams(ParamGroup):
    fsas: FsasParams
    dffn: DffnParams

    @classmethod
    def init(cls, init: Initializer, channels: int, patch: int = DEFAULT_PATCH,
             weight_mode: str = "shared") -> "FdbParams":
        return cls(FsasParams.init(init, channels, patch), DffnParams.init(init, channels, patch, weight_mode))


def fdb_forward(x: Tensor, params: FdbParams) -> Tensor:
    return dffn_forward(fsas_forward(x, params.fsas), params.dffn)


# ---------------------------------------------------------------- attention

@dataclass(eq=False)
class CaParams(ParamGroup):
    fc1: ConvParams
    fc2: ConvParams

    @classmethod
    def init(cls, init: Initializer, channels: int, reduction: int = 8) -> "CaParams":
        hidden = max(1, channels // reduction)
        return cls(init.conv(hidden, channels, 1), init.conv(channels, hidden, 1))


def channel_weights(z: Tensor, params: CaParams) -> Tensor:
    """Per-channel score in (0, 1), shaped ``(…, C, 1, 1)``."""

    def mlp(pooled: Tensor) -> Tensor:
        return params.fc2(ops.relu(params.fc1(pooled)))

    return ops.sigmoid(ops.add(mlp(ops.global_avg_pool(z)), mlp(ops.global_max_pool(z))))


def channel_attention(z: Tensor, params: CaParams) -> Tensor:
    with block_scope("ca"):
        return ops.mul(z, channel_weights(z, params))


@dataclass(eq=False)
class SaParams(ParamGroup):
    conv: ConvParams

    @classmethod
    def init(cls, init: Initializer, kernel: int = 7) -> "SaParams":
        return cls(init.conv(1, 2, kernel))


def spatial_weights(z: Tensor, params: SaParams) -> Tensor:
    """Per-site score in (0, 1), shaped ``(…, 1, H, W)``."""
    pooled = ops.concat_channels([ops.spatial_mean(z), ops.spatial_max(z)])
    return ops.sigmoid(params.conv(pooled))


def spatial_attention(z: Tensor, params: SaParams) -> Tensor:
    with block_scope("sa"):
        return ops.mul(z, spatial_weights(z, params))


# ---------------------------------------------------------------- multi-level integration

@dataclass(eq=False)
class MibParams(ParamGroup):
    fuse: ConvParams

    @classmethod
    def init(cls, init: Initializer, widths: Sequence[int], level: int) -> "MibParams":
        return cls(init.conv(widths[level - 1], sum(widths), 1))


def _check_level(features: Sequence[Tensor], level: int) -> None:
    if not 1 <= level <= len(features):
        raise ShapeError(f"level {level} is outside 1..{len(features)}")


def mib_fuse(features: Sequence[Tensor], level: int, params: MibParams) -> Tensor:
    """Resize every level's features to level ``level``, concatenate, project with 1×1."""
    _check_level(features, level)
    size = features[level - 1].shape[-2:]
    resized = [ops.interpolate(f, size) for f in features]
    return params.fuse(ops.concat_channels(resized))


class AmibSwitches(BaseModel):
    """Which AMIB stages run; all off is the bypass ("Base") configuration."""

    model_config = ConfigDict(frozen=True)

    mib: bool = True
    ca: bool = True
    sa: bool = True


@dataclass(eq=False)
class AmibParams(ParamGroup):
    mib: Optional[MibParams] = None
    gate_dw: Optional[DepthwiseParams] = None
    mix: Optional[ConvParams] = None
    ca: Optional[CaParams] = None
    sa: Optional[SaParams] = None

    @classmethod
    def init(cls, init: Initializer, widths: Sequence[int], level: int, switches: AmibSwitches = AmibSwitches(),
             ca_reduction: int = 8, sa_kernel: int = 7) -> "AmibParams":
        channels = widths[level - 1]
        params = cls()
        if switches.mib:
            params.mib = MibParams.init(init, widths, level)
            params.gate_dw = init.depthwise(channels, 2, 3)
            params.mix = init.conv(channels, 2 * channels, 1)
        if switches.ca:
            params.ca = CaParams.init(init, channels, ca_reduction)
        if switches.sa:
            params.sa = SaParams.init(init, sa_kernel)
        return params

    @property
    def switches(self) -> AmibSwitches:
        return AmibSwitches(mib=self.mib is not None, ca=self.ca is not None, sa=self.sa is not None)


def gated_mix(z1: Tensor, z2: Tensor, mix: ConvParams) -> Tensor:
    """``Conv1×1([σ(z1)⊙z2 ; σ(z2)⊙z1])``."""
    return mix(ops.concat_channels([ops.mul(ops.sigmoid(z1), z2), ops.mul(ops.sigmoid(z2), z1)]))


def amib_forward(features: Sequence[Tensor], level: int, params: AmibParams) -> Tensor:
    _check_level(features, level)
    z = features[level - 1]
    with block_scope("amib"):
        if params.mib is not None:
            z1, z2 = ops.split_channels(params.gate_dw(mib_fuse(features, level, params.mib)), 2)
            z = gated_mix(z1, z2, params.mix)
        if params.ca is not None:
            z = channel_attention(z, params.ca)
        if params.sa is not None:
            z = spatial_attention(z, params.sa)
    return z


# ---------------------------------------------------------------- level adapters

@dataclass(eq=False)
class SamParams(ParamGroup):
    to_image: ConvParams
    to_attention: ConvParams
    feature: ConvParams

    @classmethod
    def init(cls, init: Initializer, channels: int, image_channels: int) -> "SamParams":
        return cls(
            to_image=init.conv(image_channels, channels, 3),
            to_attention=init.conv(channels, image_channels, 3),
            feature=init.conv(channels, channels, 3),
        )


@dataclass
class SamOutput:
    features: Tensor
    attention: Tensor
    restored: Tensor


def sam_forward(f: Tensor, image: Tensor, params: SamParams) -> SamOutput:
    """Features out are ``(F + conv(F)) ⊙ S + F`` rather than ``F ⊙ S + F``; zero convs reduce it to the latter."""
    with block_scope("sam"):
        restored = ops.add(params.to_image(f), image)
        attention = ops.sigmoid(params.to_attention(restored))
        refined = ops.add(f, params.feature(f))
        return SamOutput(ops.add(ops.mul(refined, attention), f), attention, restored)


@dataclass(eq=False)
class FamParams(ParamGroup):
    adapter: ConvParams
    conv: ConvParams

    @classmethod
    def init(cls, init: Initializer, prev_channels: int, channels: int) -> "FamParams":
        return cls(init.conv(channels, prev_channels, 1), init.conv(channels, channels, 3))


def fam_forward(x_cur: Tensor, y_prev: Tensor, params: FamParams) -> Tensor:
    """``y + conv(x_cur ⊙ y)``, ``y`` being the finer level's output resized and projected to this width."""
    with block_scope("fam"):
        y_c = params.adapter(ops.interpolate(y_prev, x_cur.shape[-2:]))
        return ops.add(y_c, params.conv(ops.mul(x_cur, y_c)))
