import math

import numpy as np
import pytest
from pydantic import ValidationError

from sfim.blocks import AmibSwitches
from sfim.checks import CHECK_IMAGE, CHECK_MODEL, TOLERANCE, run_gradcheck
from sfim.errors import ConfigError, NonFiniteError, ShapeError
from sfim.model import (
    ModelConfig,
    ablation_config,
    build,
    forward,
    image_pyramid,
    level_size,
    load_model_config,
)
from sfim.tensor import Tensor


def test_default_parameter_count():
    count = build(ModelConfig()).num_parameters()
    assert abs(count - 24.89e6) / 24.89e6 < 0.15


def test_width_24_parameter_count():
    count = build(ablation_config("embed-24")).num_parameters()
    assert abs(count - 6.72e6) / 6.72e6 < 0.15


def test_build_is_deterministic(tiny_config):
    a, b = build(tiny_config, seed=3).state_arrays(), build(tiny_config, seed=3).state_arrays()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build(tiny_config, seed=4).state_arrays()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_parameter_names_are_set(tiny_config):
    model = build(tiny_config)
    for name, p in model.named_parameters():
        assert p.name == name
    assert any(name.startswith("level.1.fam.") for name in model.parameters())


def test_output_sizes_follow_dyadic_law(tiny_config, rng):
    model = build(tiny_config)
    for _ in range(10):
        h, w = (int(v) for v in rng.integers(5, 30, size=2))
        out = forward(model, Tensor(rng.uniform(size=(3, h, w))))
        assert len(out.restored) == 2 and len(out.attention) == 1
        for i, restored in enumerate(out.restored, start=1):
            assert restored.shape == (3, math.ceil(h / 2 ** (i - 1)), math.ceil(w / 2 ** (i - 1)))
        assert out.attention[0].shape[-2:] == level_size(h, w, 2)


def test_batched_forward_matches_single(tiny_config, rng):
    model = build(tiny_config).randomize_output_projections(rng)
    images = rng.uniform(size=(2, 3, 16, 16))
    batched = forward(model, Tensor(images)).restored[0].data
    for n in range(2):
        single = forward(model, Tensor(images[n])).restored[0].data
        np.testing.assert_allclose(batched[n], single, atol=1e-10)


def test_fresh_model_returns_its_input(tiny_config, rng):
    model = build(tiny_config)
    assert all(not conv.weight.data.any() for conv in model.output_projections())
    image = Tensor(rng.uniform(size=(3, 16, 16)))
    out = forward(model, image)
    np.testing.assert_array_equal(out.restored[0].data, image.data)
    np.testing.assert_allclose(out.restored[1].data, image_pyramid(image, 2)[1].data)


def test_zero_output_projections_restore_identity(tiny_config, rng):
    model = build(tiny_config).randomize_output_projections(rng)
    image = Tensor(rng.uniform(size=(3, 16, 16)))
    assert not np.array_equal(forward(model, image).restored[0].data, image.data)
    model.zero_output_projections()
    np.testing.assert_array_equal(forward(model, image).restored[0].data, image.data)


def test_four_channel_mode(rng):
    config = ModelConfig(levels=2, channels=(8, 16), encoder_blocks=(1, 1), decoder_blocks=(1, 1),
                         rdb_per_sdb=1, patch=4, image_channels=4)
    out = forward(build(config), Tensor(rng.uniform(size=(4, 12, 12))))
    assert out.restored[0].shape == (4, 12, 12)


def test_input_validation(tiny_config):
    model = build(tiny_config)
    bad = np.full((3, 8, 8), 0.5)
    bad[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        forward(model, Tensor(bad))
    with pytest.raises(ConfigError):
        forward(model, Tensor(np.full((3, 8, 8), 1.5)))
    with pytest.raises(ShapeError):
        forward(model, Tensor(np.full((4, 8, 8), 0.5)))


def test_non_finite_error_names_the_block(tiny_config, rng):
    model = build(tiny_config)
    model.level[1].encoder[0].fsas.project_out.weight.data[...] = np.nan
    with pytest.raises(NonFiniteError) as info:
        forward(model, Tensor(rng.uniform(size=(3, 16, 16))))
    assert info.value.where == "enc.level2.fdb0/fsas"


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(sa_kernel=6)
    with pytest.raises(ValidationError):
        ModelConfig(levels=3, channels=(8, 16))
    with pytest.raises(ConfigError):
        load_model_config({"levels": 9})


def test_pad_multiple():
    assert ModelConfig().pad_multiple == 64
    assert ModelConfig(levels=2, channels=(8, 16), patch=4).pad_multiple == 8


def test_amib_ablation_rows():
    assert ablation_config("amib-base").amib == AmibSwitches(mib=False, ca=False, sa=False)
    assert ablation_config("amib-mib-ca").amib == AmibSwitches(mib=True, ca=True, sa=False)


def test_shape_ablations():
    assert ablation_config("embed-36").channels == (36, 72, 144, 144)
    assert ablation_config("levels-2").levels == 2
    placed = ablation_config("placement-SSFF")
    assert placed.placement == ("sdb", "sdb", "fdb", "fdb")
    assert placed.encoder_blocks[:2] == (1, 1)
    assert placed.encoder_blocks[2:] == (20, 20)


@pytest.mark.parametrize("name", ["bogus", "placement-SF", "placement-SXFF", "levels-7"])
def test_bad_ablation_names(name):
    with pytest.raises(ConfigError):
        ablation_config(name)


def test_config_json_is_stable(tiny_config):
    assert tiny_config.config_json() == ModelConfig.model_validate_json(tiny_config.config_json()).config_json()


def test_tiny_model_passes_gradient_check(request):
    assert CHECK_IMAGE == (3, 32, 32) and CHECK_MODEL.widths == (8, 16)
    reports = run_gradcheck("model", seed=0, samples=80)
    results = request.config.cache.get("gradcheck_results", [])
    results.extend(r.to_record() for r in reports)
    request.config.cache.set("gradcheck_results", results)
    assert reports[0].passed(TOLERANCE), reports[0].to_record()
