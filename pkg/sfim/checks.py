"""
Invariant suites behind ``sfim gradcheck`` and ``sfim selftest``.

Every gradient case reduces its output to ``sum(out ⊙ R)`` with a fixed random
``R``, so the checked gradients are of order one whatever the op computes.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Tuple

import numpy as np
from rich.table import Table

from sfim import blocks, ops
from sfim.analyze import psnr
from sfim.blocks import AmibSwitches, Initializer
from sfim.checkpoint import checkpoint_bytes, parse_checkpoint
from sfim.degrade import ApertureConfig, DegradationSpec, aperture_to_psf, degrade_image, make_aperture
from sfim.errors import CheckFailure, ConfigError
from sfim.gradcheck import GradCheckReport, gradient_check
from sfim.losses import LossWeights, charbonnier, fft_loss, total_loss
from sfim.model import ModelConfig, build, forward, image_pyramid
from sfim.optim import cosine_lr
from sfim.tensor import Tensor, parameter

logger = logging.getLogger(__name__)

Scope = Literal["tensor", "blocks", "model"]
Case = Tuple[Callable[[], Tensor], Dict[str, Tensor]]

BLOCK_TYPES = ("rdb", "sdb", "fsas", "dffn", "fdb", "ca", "sa", "mib", "amib", "sam", "fam")
TOLERANCE = 1e-4

# 2-level, width-8 instance used for the whole-model check
CHECK_MODEL = ModelConfig(levels=2, channels=(8, 16), encoder_blocks=(1, 1), decoder_blocks=(1, 1),
                          rdb_per_sdb=1, rdb_layers=2, patch=4)
CHECK_IMAGE = (3, 32, 32)


class Probe:
    """Fixed random weights per output shape; turns any output into a scalar."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights: Dict[Tuple[int, ...], np.ndarray] = {}

    def __call__(self, out: Tensor) -> Tensor:
        if out.shape not in self.weights:
            self.weights[out.shape] = self.rng.standard_normal(out.shape)
        return ops.sum(ops.mul(out, Tensor(self.weights[out.shape])))


# ---------------------------------------------------------------- tensor scope

def _tensor_cases(rng: np.random.Generator) -> Dict[str, Case]:
    probe = Probe(rng)

    def p(*shape, low=-1.0, high=1.0):
        return parameter(rng.uniform(low, high, size=shape))

    a, b = p(2, 3, 5, 5), p(2, 3, 5, 5)
    pos = p(2, 3, 5, 5, low=0.5, high=2.0)
    row = p(1, 3, 1, 1)
    x = p(2, 3, 7, 6)
    w, bias = p(4, 3, 3, 3), p(4)
    dw = p(3, 2, 3, 3)
    g, beta = p(3, low=0.5, high=1.5), p(3)
    img = p(3, 6, 5)
    half = p(4, 4, 4)
    other = p(3, 6, 5)

    return {
        "add": (lambda: probe(ops.add(a, row)), {"a": a, "row": row}),
        "mul": (lambda: probe(ops.mul(a, b)), {"a": a, "b": b}),
        "div": (lambda: probe(ops.div(a, pos)), {"a": a, "pos": pos}),
        "sqrt": (lambda: probe(ops.sqrt(pos)), {"pos": pos}),
        "sigmoid": (lambda: probe(ops.sigmoid(a)), {"a": a}),
        "gelu": (lambda: probe(ops.gelu(a)), {"a": a}),
        "geglu": (lambda: probe(ops.geglu(half)), {"half": half}),
        "mean": (lambda: probe(ops.mean(a, axis=(-2, -1), keepdims=True)), {"a": a}),
        "amax": (lambda: probe(ops.amax(a, axis=1)), {"a": a}),
        "pad2d": (lambda: probe(ops.pad2d(img, (2, 1, 3, 2), "reflect")), {"img": img}),
        "conv2d": (lambda: probe(ops.conv2d(x, w, bias, padding=1)), {"x": x, "w": w, "bias": bias}),
        "conv2d.stride2": (lambda: probe(ops.conv2d(x, w, None, stride=2, padding=1, padding_mode="zero")),
                           {"x": x, "w": w}),
        "depthwise_conv2d": (lambda: probe(ops.depthwise_conv2d(x, dw, None, padding=1)), {"x": x, "dw": dw}),
        "layer_norm": (lambda: probe(ops.layer_norm(x, g, beta)), {"x": x, "g": g, "beta": beta}),
        "interpolate": (lambda: probe(ops.interpolate(img, (11, 3))), {"img": img}),
        "pools": (lambda: probe(ops.add(ops.global_avg_pool(x), ops.global_max_pool(x))), {"x": x}),
        "fft2": (lambda: probe(ops.fft2(img).abs()), {"img": img}),
        "ifft2": (lambda: probe(ops.ifft2(ops.fft2(img) * ops.fft2(other).conj())), {"img": img, "other": other}),
    }


# ---------------------------------------------------------------- blocks scope

def _block_cases(rng: np.random.Generator, channels: int = 4, size: int = 8, patch: int = 4) -> Dict[str, Case]:
    probe = Probe(rng)
    init = Initializer(rng)

    def feat(c=channels, s=size):
        return parameter(rng.uniform(-1.0, 1.0, size=(c, s, s)))

    def case(run: Callable[[], Tensor], params: blocks.ParamGroup, *inputs: Tensor) -> Case:
        named = dict(params.named_parameters())
        named.update({f"input{i}": t for i, t in enumerate(inputs)})
        return (lambda: probe(run()), named)

    def sam_case() -> Case:
        _, named = case(lambda: x, sam, x, image)
        return (lambda: _sam_scalar(probe, blocks.sam_forward(x, image, sam)), named)

    x, prev = feat(), feat(2 * channels, size // 2)
    widths = (channels, 2 * channels)
    pyramid = [feat(), feat(2 * channels, size // 2)]
    image = parameter(rng.uniform(0.0, 1.0, size=(3, size, size)))

    rdb = blocks.RdbParams.init(init, channels, 2, 2)
    sdb = blocks.SdbParams.init(init, channels, 2, 2, 2)
    fsas = blocks.FsasParams.init(init, channels, patch)
    dffn = blocks.DffnParams.init(init, channels, patch, "per_channel")
    fdb = blocks.FdbParams.init(init, channels, patch)
    ca = blocks.CaParams.init(init, channels, 2)
    sa = blocks.SaParams.init(init, 3)
    mib = blocks.MibParams.init(init, widths, 1)
    amib = blocks.AmibParams.init(init, widths, 2, AmibSwitches(), 2, 3)
    sam = blocks.SamParams.init(init, channels, 3)
    fam = blocks.FamParams.init(init, 2 * channels, channels)

    cases = {
        "rdb": case(lambda: blocks.rdb_forward(x, rdb), rdb, x),
        "sdb": case(lambda: blocks.sdb_forward(x, sdb), sdb, x),
        "fsas": case(lambda: blocks.fsas_forward(x, fsas), fsas, x),
        "dffn": case(lambda: blocks.dffn_forward(x, dffn), dffn, x),
        "fdb": case(lambda: blocks.fdb_forward(x, fdb), fdb, x),
        "ca": case(lambda: blocks.channel_attention(x, ca), ca, x),
        "sa": case(lambda: blocks.spatial_attention(x, sa), sa, x),
        "mib": case(lambda: blocks.mib_fuse(pyramid, 1, mib), mib, *pyramid),
        "amib": case(lambda: blocks.amib_forward(pyramid, 2, amib), amib, *pyramid),
        "sam": sam_case(),
        "fam": case(lambda: blocks.fam_forward(x, prev, fam), fam, x, prev),
    }
    return cases


def _sam_scalar(probe: Probe, out: blocks.SamOutput) -> Tensor:
    return ops.add(ops.add(probe(out.features), probe(out.attention)), probe(out.restored))


# ---------------------------------------------------------------- model scope

def _model_case(rng: np.random.Generator) -> Case:
    model = build(CHECK_MODEL, seed=int(rng.integers(2 ** 31))).randomize_output_projections(rng)
    degraded = Tensor(rng.uniform(0.1, 0.9, size=CHECK_IMAGE))
    targets = image_pyramid(Tensor(rng.uniform(0.1, 0.9, size=CHECK_IMAGE)), CHECK_MODEL.levels)
    # spectral L1 terms have kinks; the smooth terms carry the check
    weights = LossWeights(fft_variant="none")

    def run() -> Tensor:
        return total_loss(forward(model, degraded), targets, weights).objective

    return run, model.parameters()


# ---------------------------------------------------------------- runners

def run_gradcheck(scope: Scope, seed: int = 0, samples: int = 200) -> List[GradCheckReport]:
    rng = np.random.default_rng(seed)
    if scope == "tensor":
        cases = _tensor_cases(rng)
    elif scope == "blocks":
        cases = _block_cases(rng)
    elif scope == "model":
        cases = {"model": _model_case(rng)}
    else:
        raise ConfigError(f"unknown gradcheck scope {scope!r}")
    reports = [gradient_check(run, params, samples=samples, seed=seed, name=f"{scope}.{name}")
               for name, (run, params) in cases.items()]
    if scope == "blocks":
        coverage = block_coverage(reports)
        missing = [t for t in BLOCK_TYPES if not coverage[t]]
        if missing:
            raise CheckFailure(f"block suite does not cover {', '.join(missing)}")
    return reports


def block_coverage(reports: List[GradCheckReport]) -> Counter:
    """Block types checked by ``reports``, counted by case name."""
    return Counter(r.name.split(".", 1)[1] for r in reports if r.name.startswith("blocks."))


@dataclass
class SelftestResult:
    name: str
    passed: bool
    detail: str = ""


def _naive_conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    c_out, c_in, k, _ = w.shape
    _, h, wd = x.shape
    out = np.zeros((c_out, h - k + 1, wd - k + 1))
    for o in range(c_out):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                out[o, i, j] = np.sum(x[:, i:i + k, j:j + k] * w[o])
    return out


def _direct_dft(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return fh @ x @ fw


def selftest(seed: int = 0) -> List[SelftestResult]:
    """Fast oracle and invariant checks; nothing here trains."""
    rng = np.random.default_rng(seed)
    results: List[SelftestResult] = []

    def record(name: str, ok: bool, detail: str = "") -> None:
        results.append(SelftestResult(name, bool(ok), detail))

    x, w = rng.standard_normal((3, 7, 6)), rng.standard_normal((2, 3, 3, 3))
    err = np.max(np.abs(ops.conv2d(Tensor(x), Tensor(w)).data - _naive_conv(x, w)))
    record("conv2d oracle", err < 1e-8, f"{err:.2e}")

    img = rng.standard_normal((5, 7))
    err = np.max(np.abs(ops.fft2(Tensor(img)).numpy() - _direct_dft(img)))
    record("fft2 oracle", err < 1e-8, f"{err:.2e}")

    r = Tensor(rng.uniform(size=(3, 8, 8)))
    record("charbonnier floor", abs(charbonnier(r, r).item() - 1e-3) < 1e-15)
    amplitude, phase = fft_loss(r, r)
    record("fft loss floor", amplitude.item() == 0.0 and phase.item() == 0.0)
    record("psnr cap", psnr(r, r) == 100.0)

    psf = aperture_to_psf(make_aperture(ApertureConfig(kind="grid")), 31)
    record("psf normalization", abs(psf.sum() - 1.0) < 1e-12, f"{abs(psf.sum() - 1.0):.1e}")
    clean = rng.uniform(size=(3, 16, 16))
    record("identity degradation", np.array_equal(degrade_image(clean, DegradationSpec.identity()), clean))

    record("cosine schedule", cosine_lr(0, 10, 2e-4, 1e-7) == 2e-4 and abs(cosine_lr(10, 10, 2e-4, 1e-7) - 1e-7) < 1e-20)

    model = build(CHECK_MODEL, seed)
    payload = checkpoint_bytes(model, {"note": "selftest"})
    record("checkpoint roundtrip", checkpoint_bytes(parse_checkpoint(payload).to_model(), {"note": "selftest"}) == payload)

    restored = forward(model, Tensor(clean)).restored[0].data
    record("fresh model is the identity", np.array_equal(restored, clean))

    for report in run_gradcheck("tensor", seed, samples=40):
        record(f"gradient {report.name}", report.passed(TOLERANCE), f"{report.worst:.2e}")
    for failed in (r for r in results if not r.passed):
        logger.warning("selftest check failed: %s %s", failed.name, failed.detail)
    return results


def gradcheck_table(reports: List[GradCheckReport], tolerance: float = TOLERANCE) -> Table:
    table = Table(title="gradient checks")
    table.add_column("case")
    table.add_column("worst rel. error", justify="right")
    table.add_column("worst group")
    table.add_column("samples", justify="right")
    table.add_column("status")
    for r in reports:
        status = "[green]ok" if r.passed(tolerance) else f"[red]{r.error or 'FAIL'}"
        table.add_row(r.name, f"{r.worst:.2e}", r.worst_group or "-", str(r.samples), status)
    return table


def selftest_table(results: List[SelftestResult]) -> Table:
    table = Table(title="selftest")
    table.add_column("check")
    table.add_column("detail", justify="right")
    table.add_column("status")
    for r in results:
        table.add_row(r.name, r.detail, "[green]ok" if r.passed else "[red]FAIL")
    return table
