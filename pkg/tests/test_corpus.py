"""Tests for the planted-channel corpus generator and its identifiability oracle."""

import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from src.backend.corpus import (
    SynthConfig,
    example_rng,
    generate_corpus,
    generate_example,
    planted_identifiability,
    segment_example,
    synthesize,
)
from src.backend.signal_prep import Stage, rms_ratio_db


def _corr(a, b):
    return float(np.corrcoef(a, b)[0, 1])


class TestGenerateExample:

    def test_shapes_and_ids(self, small_synth_config):
        ex = generate_example(small_synth_config, example_rng(0, 0), example_id="ex00042", subject_id="sub01")
        assert len(ex.mixture) == int(round(small_synth_config.seg_len_s * small_synth_config.fs_audio))
        assert ex.eeg.data.shape == (16, 256)
        assert ex.eeg.stage == Stage.RAW
        assert ex.example_id == "ex00042"
        assert ex.subject_id == "sub01"
        assert ex.informative_channels == (1, 5, 9, 13)

    def test_mixture_is_sum_at_requested_snr(self, small_synth_config):
        cfg = replace(small_synth_config, mixture_snr_db=3.0)
        ex = generate_example(cfg, example_rng(1, 0))
        np.testing.assert_allclose(ex.mixture.samples, ex.target.samples + ex.interferer.samples, atol=1e-6)
        assert rms_ratio_db(ex.target.samples, ex.interferer.samples) == pytest.approx(3.0, abs=1e-3)

    def test_noise_free_planted_channels(self, small_synth_config):
        cfg = replace(small_synth_config, eeg_snr_db=math.inf, seg_len_s=8.0)
        for index in range(3):
            ex = generate_example(cfg, example_rng(cfg.seed, index))
            for channel in range(cfg.q_channels):
                r = _corr(ex.eeg.data[channel], ex.target_envelope)
                if channel in cfg.informative_channels:
                    assert r > 0.9
                else:
                    assert abs(r) < 0.2

    def test_no_planted_channels(self, small_synth_config):
        cfg = replace(small_synth_config, informative_channels=(), seg_len_s=8.0)
        ex = generate_example(cfg, example_rng(cfg.seed, 0))
        assert ex.informative_channels == ()
        for channel in range(cfg.q_channels):
            assert abs(_corr(ex.eeg.data[channel], ex.target_envelope)) < 0.2


class TestGenerateCorpus:

    def test_same_seed_is_bit_identical(self, small_synth_config):
        cfg = replace(small_synth_config, n_examples=3)
        first, second = generate_corpus(cfg), generate_corpus(cfg)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.mixture.samples, b.mixture.samples)
            np.testing.assert_array_equal(a.eeg.data, b.eeg.data)

    def test_different_seeds_differ(self, small_synth_config):
        a = generate_corpus(replace(small_synth_config, n_examples=1, seed=1))[0]
        b = generate_corpus(replace(small_synth_config, n_examples=1, seed=2))[0]
        assert not np.array_equal(a.eeg.data, b.eeg.data)

    def test_subjects_cycle(self, small_corpus):
        assert [ex.subject_id for ex in small_corpus[:5]] == ["sub00", "sub01", "sub02", "sub03", "sub00"]
        assert small_corpus[3].example_id == "ex00003"

    def test_invalid_config(self, small_synth_config):
        with pytest.raises(ValueError):
            generate_corpus(replace(small_synth_config, informative_channels=(20,)))

    def test_validate_lists_fields(self):
        bad = SynthConfig(q_channels=4, informative_channels=(1, 1), n_examples=0).validate()
        assert "informative_channels" in bad
        assert "n_examples" in bad


class TestSegmentExample:

    def test_segments_stay_synchronized(self, small_corpus):
        pieces = segment_example(small_corpus[0], 1.0)
        assert [p.example_id for p in pieces] == ["ex00000_s000", "ex00000_s001"]
        for p in pieces:
            assert p.eeg.n_samples == 128
            assert len(p.mixture) == 2000
            assert p.target_envelope.shape == (128,)
        np.testing.assert_array_equal(pieces[1].eeg.data, small_corpus[0].eeg.data[:, 128:])


class TestIdentifiability:

    def test_noise_free_corpus_passes(self, small_synth_config):
        cfg = replace(small_synth_config, eeg_snr_db=math.inf)
        examples, report = synthesize(cfg)
        assert len(examples) == cfg.n_examples
        assert report.passed
        assert set(report.random_subset).isdisjoint(cfg.informative_channels)

    def test_planted_channels_beat_random_ones(self, small_corpus):
        report = planted_identifiability(small_corpus, (1, 5, 9, 13), np.random.default_rng(0))
        assert report.mse_informative < report.mse_random

    def test_buried_channels_warn(self, small_synth_config, caplog):
        cfg = replace(small_synth_config, eeg_snr_db=-30.0)
        with caplog.at_level(logging.WARNING):
            _, report = synthesize(cfg)
        assert not report.passed
        assert "weakly identifiable" in caplog.text

    def test_nothing_to_compare(self, small_corpus):
        assert planted_identifiability(small_corpus, (), np.random.default_rng(0)) is None
