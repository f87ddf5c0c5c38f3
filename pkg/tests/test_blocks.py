import numpy as np
import pytest

from sfim import blocks
from sfim.blocks import AmibSwitches, Initializer
from sfim.checks import BLOCK_TYPES, TOLERANCE, block_coverage, run_gradcheck
from sfim.errors import ShapeError
from sfim.tensor import Tensor


@pytest.fixture
def init():
    return Initializer(np.random.default_rng(7))


def circular_correlation(q, k):
    """out[u] = sum_x q[x + u] k[x] on a periodic P×P patch."""
    p = q.shape[-1]
    out = np.zeros_like(q)
    for u in range(p):
        for v in range(p):
            out[u, v] = np.sum(np.roll(q, (-u, -v), axis=(0, 1)) * k)
    return out


def patchwise_oracle(q, k, patch):
    _, h, w = q.shape
    ph, pw = -h % patch, -w % patch
    qp = np.pad(q, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    kp = np.pad(k, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    out = np.zeros_like(qp)
    for c in range(q.shape[0]):
        for i in range(0, qp.shape[1], patch):
            for j in range(0, qp.shape[2], patch):
                out[c, i:i + patch, j:j + patch] = circular_correlation(
                    qp[c, i:i + patch, j:j + patch], kp[c, i:i + patch, j:j + patch])
    return out[:, :h, :w]


@pytest.mark.parametrize("seed", range(50))
def test_spectral_correlation_matches_spatial_oracle(seed):
    rng = np.random.default_rng(seed)
    patch = int(rng.choice([2, 4]))
    shape = (int(rng.integers(1, 3)), int(rng.integers(3, 9)), int(rng.integers(3, 9)))
    q, k = rng.standard_normal(shape), rng.standard_normal(shape)
    out = blocks.spectral_correlation(Tensor(q), Tensor(k), patch).data
    np.testing.assert_allclose(out, patchwise_oracle(q, k, patch), atol=1e-8)


@pytest.mark.parametrize("size", [(8, 8), (5, 11), (3, 6)])
def test_patch_fold_inverts_unfold(rng, size):
    x = Tensor(rng.standard_normal((2, 3) + size))
    patches = blocks.patch_unfold(x, 4)
    assert patches.shape[-2:] == (4, 4)
    np.testing.assert_array_equal(blocks.patch_fold(patches, 3, *size, 4).data, x.data)


def test_unit_frequency_weight_is_identity(rng):
    z = Tensor(rng.standard_normal((4, 6, 6)))
    out = blocks.frequency_filter(z, Tensor(np.ones((4, 4))), 4)
    np.testing.assert_allclose(out.data, z.data, atol=1e-12)
    per_channel = blocks.frequency_filter(z, Tensor(np.ones((4, 4, 4))), 4)
    np.testing.assert_allclose(per_channel.data, z.data, atol=1e-12)


def test_frequency_weight_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        blocks.frequency_filter(Tensor(rng.standard_normal((4, 4, 4))), Tensor(np.ones((3, 4, 4))), 4)


def test_rdb_with_zero_fusion_is_identity(rng, init):
    rdb = blocks.RdbParams.init(init, 6, 3, 3)
    rdb.fusion.zero_()
    x = Tensor(rng.standard_normal((6, 5, 5)))
    np.testing.assert_array_equal(blocks.rdb_forward(x, rdb).data, x.data)


def test_rdb_checks_width(rng, init):
    rdb = blocks.RdbParams.init(init, 6, 3)
    with pytest.raises(ShapeError):
        blocks.rdb_forward(Tensor(rng.standard_normal((4, 5, 5))), rdb)


def test_sdb_chains_rdbs(rng, init):
    sdb = blocks.SdbParams.init(init, 4, 2, n_rdb=8)
    assert len(sdb.rdbs) == 8
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))
    assert blocks.sdb_forward(x, sdb).shape == x.shape


@pytest.mark.parametrize("mode", ["shared", "per_channel"])
def test_fdb_keeps_shape(rng, init, mode):
    fdb = blocks.FdbParams.init(init, 4, 4, mode)
    x = Tensor(rng.standard_normal((4, 10, 7)))
    assert blocks.fdb_forward(x, fdb).shape == x.shape


def test_attention_weights_are_gates(rng, init):
    z = Tensor(rng.standard_normal((8, 6, 6)))
    ca = blocks.channel_weights(z, blocks.CaParams.init(init, 8, 4)).data
    sa = blocks.spatial_weights(z, blocks.SaParams.init(init, 7)).data
    assert ca.shape == (8, 1, 1) and sa.shape == (1, 6, 6)
    assert np.all((ca > 0) & (ca < 1)) and np.all((sa > 0) & (sa < 1))


def pyramid(rng, widths=(4, 8, 8), size=16):
    return [Tensor(rng.standard_normal((w, size >> i, size >> i))) for i, w in enumerate(widths)]


@pytest.mark.parametrize("level", [1, 2, 3])
def test_mib_output_matches_level(rng, init, level):
    features = pyramid(rng)
    out = blocks.mib_fuse(features, level, blocks.MibParams.init(init, (4, 8, 8), level))
    assert out.shape == features[level - 1].shape


@pytest.mark.parametrize("level", [0, 4])
def test_level_out_of_range(rng, init, level):
    params = blocks.AmibParams.init(init, (4, 8, 8), 1)
    with pytest.raises(ShapeError):
        blocks.amib_forward(pyramid(rng), level, params)


def test_amib_base_is_a_bypass(rng, init):
    features = pyramid(rng)
    params = blocks.AmibParams.init(init, (4, 8, 8), 2, AmibSwitches(mib=False, ca=False, sa=False))
    assert params.num_parameters() == 0
    assert blocks.amib_forward(features, 2, params) is features[1]


def test_gated_mix_is_swap_symmetric(rng, init):
    c = 4
    z1, z2 = Tensor(rng.standard_normal((c, 5, 5))), Tensor(rng.standard_normal((c, 5, 5)))
    mix = init.conv(c, 2 * c, 1)
    w = mix.weight.data
    swapped = blocks.ConvParams(Tensor(np.concatenate([w[:, c:], w[:, :c]], axis=1)), mix.bias)
    np.testing.assert_allclose(blocks.gated_mix(z1, z2, mix).data, blocks.gated_mix(z2, z1, swapped).data,
                               atol=1e-12)


@pytest.mark.parametrize("switches", [AmibSwitches(), AmibSwitches(sa=False), AmibSwitches(mib=False)])
def test_amib_keeps_level_shape(rng, init, switches):
    features = pyramid(rng)
    params = blocks.AmibParams.init(init, (4, 8, 8), 3, switches, ca_reduction=2, sa_kernel=3)
    assert params.switches == switches
    assert blocks.amib_forward(features, 3, params).shape == features[2].shape


def test_sam_with_zero_convs(rng, init):
    sam = blocks.SamParams.init(init, 5, 3)
    sam.zero_()
    f = Tensor(rng.standard_normal((5, 4, 4)))
    image = Tensor(rng.uniform(size=(3, 4, 4)))
    out = blocks.sam_forward(f, image, sam)
    np.testing.assert_array_equal(out.restored.data, image.data)
    np.testing.assert_allclose(out.attention.data, 0.5)
    np.testing.assert_allclose(out.features.data, 1.5 * f.data)


def test_sam_feature_conv_feeds_the_gate(rng, init):
    sam = blocks.SamParams.init(init, 5, 3)
    sam.to_attention.zero_()
    f = Tensor(rng.standard_normal((5, 4, 4)))
    out = blocks.sam_forward(f, Tensor(rng.uniform(size=(3, 4, 4))), sam)
    refined = f.data + sam.feature(f).data
    np.testing.assert_allclose(out.features.data, 0.5 * refined + f.data, atol=1e-12)


def test_fam_resizes_previous_level(rng, init):
    fam = blocks.FamParams.init(init, 4, 8)
    out = blocks.fam_forward(Tensor(rng.standard_normal((8, 5, 5))), Tensor(rng.standard_normal((4, 10, 10))), fam)
    assert out.shape == (8, 5, 5)


def test_named_parameters_walk_nested_groups(init):
    fdb = blocks.FdbParams.init(init, 4, 4)
    names = [n for n, _ in fdb.named_parameters()]
    assert "fsas.to_qkv.weight" in names
    assert "dffn.freq_weight" in names
    assert fdb.num_parameters() == sum(p.size for p in fdb.parameters().values())


def test_every_block_passes_gradient_check(request):
    reports = run_gradcheck("blocks", seed=0, samples=60)
    results = request.config.cache.get("gradcheck_results", [])
    results.extend(r.to_record() for r in reports)
    request.config.cache.set("gradcheck_results", results)
    assert set(block_coverage(reports)) == set(BLOCK_TYPES)
    failing = {r.name: r.worst for r in reports if not r.passed(TOLERANCE)}
    assert not failing
