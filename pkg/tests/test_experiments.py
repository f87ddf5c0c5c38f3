import pytest

from sfim.config import DataConfig, RunConfig, ValidationConfig, load_run_config
from sfim.experiments import DESK_PRESET, VARIANTS, run_trends, summarize
from sfim.train import TrainPhase


def test_desk_preset_loads():
    config = load_run_config(DESK_PRESET)
    assert config.model.levels == 2 and config.model.widths == (8, 16)
    assert [p.patch for p in config.phases] == [32, 64]
    assert (config.phases[1].lr_max, config.phases[1].lr_min) == (config.optimizer.lr_max, config.optimizer.lr_min)
    assert config.data.pairs == 200 and config.data.size == 64


def test_variants_change_one_axis():
    config = load_run_config(DESK_PRESET)
    no_fft = VARIANTS["no-fft"](config)
    assert no_fft.loss.amplitude_weight == no_fft.loss.phase_weight == 0.0
    assert no_fft.model == config.model
    base = VARIANTS["amib-base"](config)
    assert not (base.model.amib.mib or base.model.amib.ca or base.model.amib.sa)
    assert base.loss == config.loss


def test_trend_frame_layout(tmp_path, tiny_config):
    config = RunConfig(model=tiny_config, phases=[TrainPhase(steps=2, patch=8, batch=1)],
                       data=DataConfig(pairs=5, size=16), validation=ValidationConfig(every=100, holdout=1),
                       progress=False)
    frame = run_trends(config, seeds=(0,), out_dir=tmp_path)
    assert list(frame["variant"]) == list(VARIANTS)
    assert {"restored_psnr", "degraded_psnr", "amplitude_l1", "psnr_gain", "final_loss"} <= set(frame.columns)
    assert list(summarize(frame).index) == sorted(VARIANTS)


@pytest.fixture(scope="module")
def desk_trends(slow_enabled, tmp_path_factory):
    frame = run_trends(seeds=(0, 1, 2), out_dir=tmp_path_factory.mktemp("trends"))
    return summarize(frame)


@pytest.mark.slow
def test_restoration_beats_degraded_input(desk_trends):
    assert desk_trends.loc["baseline", "psnr_gain"] >= 2.0


@pytest.mark.slow
def test_fft_loss_lowers_spectral_error(desk_trends):
    assert desk_trends.loc["baseline", "amplitude_l1"] < desk_trends.loc["no-fft", "amplitude_l1"]
    assert desk_trends.loc["baseline", "restored_psnr"] >= desk_trends.loc["no-fft", "restored_psnr"] - 0.3


@pytest.mark.slow
def test_full_amib_is_not_worse_than_base(desk_trends):
    assert desk_trends.loc["baseline", "restored_psnr"] >= desk_trends.loc["amib-base", "restored_psnr"]
