import math

import numpy as np
import pytest

from sfim import ops
from sfim.checks import TOLERANCE, run_gradcheck
from sfim.errors import ShapeError
from sfim.tensor import Tape, Tensor, parameter


def naive_conv(x, w, stride=1):
    c_out, _, k, _ = w.shape
    _, h, wd = x.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                patch = x[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = np.sum(patch * w[o])
    return out


def direct_dft(x):
    h, w = x.shape
    fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return fh @ x @ fw


@pytest.mark.parametrize("seed", range(50))
def test_conv2d_matches_naive_loops(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    x = rng.standard_normal((c_in, int(rng.integers(k, 9)), int(rng.integers(k, 9))))
    w = rng.standard_normal((c_out, c_in, k, k))
    b = rng.standard_normal(c_out)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
    expected = naive_conv(x, w, stride) + b[:, None, None]
    np.testing.assert_allclose(out, expected, atol=1e-8)


@pytest.mark.parametrize("seed", range(50))
def test_depthwise_conv2d_matches_naive_loops(seed):
    rng = np.random.default_rng(100 + seed)
    channels, m = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    x = rng.standard_normal((channels, 6, 7))
    w = rng.standard_normal((channels, m, 3, 3))
    out = ops.depthwise_conv2d(Tensor(x), Tensor(w)).data
    for c in range(channels):
        for j in range(m):
            expected = naive_conv(x[c:c + 1], w[c, j][None, None])[0]
            np.testing.assert_allclose(out[c * m + j], expected, atol=1e-8)


def test_conv2d_same_padding_keeps_size(rng):
    x = Tensor(rng.standard_normal((2, 3, 9, 7)))
    w = Tensor(rng.standard_normal((5, 3, 3, 3)))
    assert ops.conv2d(x, w, padding=1).shape == (2, 5, 9, 7)


def test_conv2d_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(rng.standard_normal((3, 5, 5))), Tensor(rng.standard_normal((2, 4, 3, 3))))


def test_conv2d_rejects_oversize_kernel(rng):
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(rng.standard_normal((1, 2, 2))), Tensor(rng.standard_normal((1, 1, 3, 3))))


def test_batched_conv_equals_per_image(rng):
    x = rng.standard_normal((3, 2, 6, 6))
    w = Tensor(rng.standard_normal((4, 2, 3, 3)))
    batched = ops.conv2d(Tensor(x), w, padding=1).data
    for n in range(3):
        np.testing.assert_allclose(batched[n], ops.conv2d(Tensor(x[n]), w, padding=1).data, atol=1e-12)


@pytest.mark.parametrize("pad", [1, 3, (2, 0, 1, 4), 9])
def test_reflect_padding_matches_numpy(rng, pad):
    x = rng.standard_normal((2, 4, 5))
    t, b, l, r = (pad,) * 4 if isinstance(pad, int) else pad
    expected = np.pad(x, ((0, 0), (t, b), (l, r)), mode="reflect")
    np.testing.assert_array_equal(ops.pad2d(Tensor(x), pad).data, expected)


def test_zero_padding(rng):
    x = rng.standard_normal((1, 2, 2))
    out = ops.pad2d(Tensor(x), 1, "zero").data
    assert out.shape == (1, 4, 4)
    assert out[0, 0].sum() == 0.0


def test_broadcast_rules():
    a = Tensor(np.ones((2, 3, 4, 4)))
    assert ops.add(a, Tensor(np.ones((1, 3, 1, 1)))).shape == (2, 3, 4, 4)
    assert ops.mul(a, Tensor(2.0)).shape == (2, 3, 4, 4)
    with pytest.raises(ShapeError):
        ops.add(a, Tensor(np.ones((3, 1, 1))))
    with pytest.raises(ShapeError):
        ops.add(a, Tensor(np.ones((2, 2, 4, 4))))


def test_broadcast_gradient_sums_over_expanded_axes():
    a = parameter(np.ones((2, 3, 2, 2)))
    b = parameter(np.ones((1, 3, 1, 1)))
    with Tape() as tape:
        loss = ops.sum(ops.mul(a, b))
    tape.backward(loss)
    np.testing.assert_array_equal(b.grad, np.full((1, 3, 1, 1), 8.0))


def test_layer_norm_statistics(rng):
    # per-site variance must dominate eps for the unit-variance property
    x = Tensor(rng.standard_normal((8, 5, 5)) * 100.0 + 3.0)
    out = ops.layer_norm(x).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-8)


def test_layer_norm_affine(rng):
    x = Tensor(rng.standard_normal((3, 4, 4)))
    w, b = Tensor([1.0, 2.0, 3.0]), Tensor([0.5, 0.0, -0.5])
    base = ops.layer_norm(x).data
    out = ops.layer_norm(x, w, b).data
    np.testing.assert_allclose(out, base * w.data[:, None, None] + b.data[:, None, None])


def test_gelu_reference_values():
    out = ops.gelu(Tensor([0.0, 1.0, -1.0])).data
    np.testing.assert_allclose(out, [0.0, 0.8411919906, -0.1588080094], atol=1e-9)


def test_geglu_halves_channels(rng):
    x = rng.standard_normal((4, 3, 3))
    out = ops.geglu(Tensor(x)).data
    np.testing.assert_allclose(out, x[:2] * ops.gelu(Tensor(x[2:])).data)
    with pytest.raises(ShapeError):
        ops.geglu(Tensor(np.ones((3, 2, 2))))


def test_sigmoid_is_stable_for_large_inputs():
    out = ops.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_interpolate_same_size_is_identity(rng):
    x = Tensor(rng.standard_normal((2, 5, 6)))
    assert ops.interpolate(x, (5, 6)) is x


def test_interpolate_preserves_constants():
    out = ops.interpolate(Tensor(np.full((1, 4, 6), 0.7)), (9, 3)).data
    np.testing.assert_allclose(out, 0.7)


def test_bilinear_downsample_by_two_averages_pairs():
    m = ops.bilinear_matrix(4, 2)
    np.testing.assert_allclose(m, [[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]])


def test_amax_splits_gradient_over_ties():
    x = parameter([[1.0, 3.0, 3.0]])
    with Tape() as tape:
        loss = ops.sum(ops.amax(x, axis=1))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [[0.0, 0.5, 0.5]])


@pytest.mark.parametrize("shape", [(1, 1), (2, 3), (5, 7), (8, 8), (6, 4)])
def test_fft2_matches_direct_dft(rng, shape):
    x = rng.standard_normal(shape)
    np.testing.assert_allclose(ops.fft2(Tensor(x)).numpy(), direct_dft(x), atol=1e-9)


@pytest.mark.parametrize("h,w", [(1, 1), (2, 3), (5, 8), (17, 31), (32, 32), (64, 64)])
def test_fft_roundtrip_and_parseval(rng, h, w):
    x = rng.standard_normal((2, h, w))
    spectrum = ops.fft2(Tensor(x))
    np.testing.assert_allclose(ops.ifft2(spectrum).data, x, atol=1e-12)
    energy = np.sum(spectrum.real.data ** 2 + spectrum.imag.data ** 2) / (h * w)
    assert energy == pytest.approx(np.sum(x ** 2), rel=1e-10)


def test_wrap_phase_range():
    values = np.array([-3 * math.pi, -math.pi, 0.0, math.pi, 2.5 * math.pi, 7.0])
    out = ops.wrap_phase(Tensor(values)).data
    assert np.all(out > -math.pi - 1e-12) and np.all(out <= math.pi + 1e-12)
    np.testing.assert_allclose(np.exp(1j * out), np.exp(1j * values), atol=1e-12)
    np.testing.assert_allclose(out[1], math.pi)


def test_split_and_concat_channels_roundtrip(rng):
    x = Tensor(rng.standard_normal((2, 6, 3, 3)))
    parts = ops.split_channels(x, 3)
    assert [p.shape for p in parts] == [(2, 2, 3, 3)] * 3
    np.testing.assert_array_equal(ops.concat_channels(parts).data, x.data)
    with pytest.raises(ShapeError):
        ops.split_channels(x, 4)


def test_every_op_passes_gradient_check(request):
    reports = run_gradcheck("tensor", seed=0, samples=60)
    results = request.config.cache.get("gradcheck_results", [])
    results.extend(r.to_record() for r in reports)
    request.config.cache.set("gradcheck_results", results)
    failing = {r.name: r.worst for r in reports if not r.passed(TOLERANCE)}
    assert not failing
