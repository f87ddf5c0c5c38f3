import numpy as np
import pytest

from sfim.checkpoint import (
    CHECKPOINT_VERSION,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from sfim.errors import CheckpointConfigError, CheckpointError, CheckpointFormatError, CheckpointVersionError, SfimIOError
from sfim.model import build, forward
from sfim.optim import AdamWState
from sfim.tensor import Tensor


@pytest.fixture
def model(tiny_config):
    return build(tiny_config, seed=5).randomize_output_projections(np.random.default_rng(5))


@pytest.fixture
def optimizer(model, rng):
    state = AdamWState.zeros_like(model.parameters())
    state.step = 7
    for name in state.m:
        state.m[name] = rng.standard_normal(state.m[name].shape)
        state.v[name] = rng.uniform(size=state.v[name].shape)
    return state


def test_roundtrip_is_bitwise(tmp_path, model, optimizer):
    path = save_checkpoint(tmp_path / "a.sfck", model, {"step": 7, "phase": 0}, optimizer)
    loaded = load_checkpoint(path, expected=model.config)
    assert loaded.state["step"] == 7
    assert loaded.config == model.config
    restored = loaded.to_model()
    for name, array in model.state_arrays().items():
        assert np.array_equal(restored.parameters()[name].data, array)
    moments = loaded.optimizer_state()
    assert moments.step == 7
    assert all(np.array_equal(moments.m[k], optimizer.m[k]) for k in optimizer.m)
    assert checkpoint_bytes(restored, loaded.state, moments) == path.read_bytes()


def test_loaded_model_restores_identically(tmp_path, model, rng):
    image = Tensor(rng.uniform(size=(3, 16, 16)))
    path = save_checkpoint(tmp_path / "b.sfck", model)
    again = load_checkpoint(path).to_model()
    np.testing.assert_array_equal(forward(again, image).restored[0].data, forward(model, image).restored[0].data)


def test_float32_storage(model):
    ck = parse_checkpoint(checkpoint_bytes(model, dtype="float32"))
    for name, array in model.state_arrays().items():
        np.testing.assert_array_equal(ck.parameters[name], array.astype(np.float32).astype(np.float64))


def test_bad_magic(model):
    payload = checkpoint_bytes(model)
    with pytest.raises(CheckpointFormatError):
        parse_checkpoint(b"XXXX" + payload[4:])


def test_unsupported_version(model):
    payload = checkpoint_bytes(model)
    bumped = payload[:4] + np.asarray([CHECKPOINT_VERSION + 1], dtype="<u4").tobytes() + payload[8:]
    with pytest.raises(CheckpointVersionError) as info:
        parse_checkpoint(bumped)
    assert info.value.found == CHECKPOINT_VERSION + 1
    assert info.value.expected == CHECKPOINT_VERSION


def test_config_mismatch(model, one_level_config):
    with pytest.raises(CheckpointConfigError):
        parse_checkpoint(checkpoint_bytes(model), expected=one_level_config)


def test_tampered_config_fails_hash(model):
    payload = bytearray(checkpoint_bytes(model))
    payload[14] ^= 0x01  # inside the config JSON
    with pytest.raises(CheckpointConfigError):
        parse_checkpoint(bytes(payload))


def test_truncated_checkpoint(model):
    payload = checkpoint_bytes(model)
    with pytest.raises(CheckpointFormatError):
        parse_checkpoint(payload[: len(payload) // 2])


def test_missing_file(tmp_path):
    with pytest.raises(SfimIOError):
        load_checkpoint(tmp_path / "nope.sfck")


def test_checkpoint_errors_share_a_base():
    assert issubclass(CheckpointVersionError, CheckpointError)
    assert CheckpointVersionError(2, 1).exit_code == 4
