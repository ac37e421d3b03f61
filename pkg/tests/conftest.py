"""Shared fixtures: a tiny network config and a small low-rate planted corpus."""

from dataclasses import replace

import pytest

from src.backend.basen import ModelConfig
from src.backend.config_manager import ConfigManager, RunConfig
from src.backend.corpus import SynthConfig, generate_corpus
from src.backend.schedules import ScheduleConfig

TINY_MODEL = ModelConfig(
    eeg_channels=16,
    embed_dim=8,
    audio_kernels=(16, 3),
    audio_strides=(8, 1),
    eeg_tcn_layers=2,
    eeg_hidden=16,
    cmca_layers=1,
    attention_heads=2,
    separator_layers=2,
    separator_stacks=1,
    separator_bottleneck=8,
    separator_hidden=16,
)

SMALL_SYNTH = SynthConfig(
    n_examples=12,
    fs_audio=2000.0,
    carrier_center_range_hz=(200.0, 600.0),
    seg_len_s=2.0,
    seed=3,
)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return replace(TINY_MODEL)


@pytest.fixture
def small_synth_config() -> SynthConfig:
    return replace(SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SMALL_SYNTH)


@pytest.fixture
def tiny_run_config(tmp_path) -> RunConfig:
    """Validated run config for seconds-long training runs."""
    cfg = ConfigManager().get_run_config()
    return replace(
        cfg,
        synth=replace(SMALL_SYNTH),
        model=replace(TINY_MODEL),
        schedule=ScheduleConfig(total_epochs=2, batch_size=4, max_lr=1e-3),
        resgs=replace(cfg.resgs, stage1_epochs=1, stage2_epochs=1),
        convrs=replace(cfg.convrs, gamma_list=[0.0, 0.2], initial_epochs=1, stage1_epochs=1, stage2_epochs=1),
        seed=5,
    )
