"""Tests for per-example scoring, summaries and duplicate diagnostics."""

import numpy as np
import pandas as pd
import pytest
import torch

from src.backend.basen import BASEN, SparseBasen
from src.backend.checkpoint_manager import save_checkpoint
from src.backend.errors import SelectionError, ShapeMismatchError
from src.backend.evaluation import (
    CORE_METRICS,
    EvalSummary,
    channel_mask,
    duplicate_report,
    evaluate,
    evaluate_estimates,
    long_segments,
)
from src.backend.selection import ChannelSubset


@pytest.fixture
def tiny_model(tiny_model_config):
    torch.manual_seed(0)
    return SparseBasen(BASEN(tiny_model_config)).eval()


class TestEvaluateEstimates:

    def test_passthrough_scores_high(self, small_corpus):
        examples = small_corpus[:4]
        summary = evaluate_estimates(examples, [ex.target.samples for ex in examples])
        assert (summary.frame["si_sdr"] > 100.0).all()
        assert (summary.frame["si_sdri"] > 90.0).all()
        np.testing.assert_allclose(summary.frame["duration_s"], [ex.mixture.duration_s for ex in examples])

    def test_mixture_estimate_has_zero_improvement(self, small_corpus):
        examples = small_corpus[:3]
        summary = evaluate_estimates(examples, [ex.mixture.samples for ex in examples])
        np.testing.assert_allclose(summary.frame["si_sdri"], 0.0, atol=1e-9)

    def test_order_does_not_matter(self, small_corpus):
        examples = small_corpus[:5]
        rng = np.random.default_rng(0)
        estimates = [ex.mixture.samples + 0.1 * rng.standard_normal(len(ex.mixture)) for ex in examples]
        forward = evaluate_estimates(examples, estimates)
        backward = evaluate_estimates(examples[::-1], estimates[::-1])
        pd.testing.assert_frame_equal(forward.frame, backward.frame)
        assert forward.aggregates() == backward.aggregates()

    def test_estimate_length_mismatch(self, small_corpus):
        with pytest.raises(ShapeMismatchError):
            evaluate_estimates(small_corpus[:1], [np.zeros(10)])

    def test_count_mismatch(self, small_corpus):
        with pytest.raises(ShapeMismatchError):
            evaluate_estimates(small_corpus[:2], [small_corpus[0].target.samples])

    def test_empty(self):
        summary = evaluate_estimates([], [])
        assert summary.n_examples == 0
        assert summary.metrics == CORE_METRICS


class TestSummary:

    def _summary(self):
        return EvalSummary(pd.DataFrame({
            "example_id": ["ex3", "ex1", "ex2", "ex0"],
            "subject_id": ["sub1", "sub0", "sub1", "sub0"],
            "si_sdri": [4.0, 2.0, 3.0, 1.0],
        }))

    def test_frame_is_sorted_by_example(self):
        assert self._summary().frame["example_id"].tolist() == ["ex0", "ex1", "ex2", "ex3"]

    def test_aggregates(self):
        stats = self._summary().aggregates()["si_sdri"]
        assert stats["mean"] == pytest.approx(2.5)
        assert stats["median"] == pytest.approx(2.5)
        assert stats["q1"] == pytest.approx(1.75)
        assert stats["q3"] == pytest.approx(3.25)
        assert (stats["min"], stats["max"]) == (1.0, 4.0)

    def test_per_subject(self):
        by_subject = self._summary().per_subject()
        assert list(by_subject) == ["sub0", "sub1"]
        assert by_subject["sub1"]["si_sdri"]["mean"] == pytest.approx(3.5)

    def test_json_round_trip(self, tmp_path):
        summary = self._summary()
        summary.to_json(tmp_path / "eval.json")
        loaded = EvalSummary.from_json(tmp_path / "eval.json")
        pd.testing.assert_frame_equal(loaded.frame, summary.frame, check_like=True)

    def test_excel_sheets(self, tmp_path):
        self._summary().to_excel(tmp_path / "eval.xlsx")
        sheets = pd.read_excel(tmp_path / "eval.xlsx", sheet_name=None)
        assert list(sheets) == ["examples", "aggregates", "per_subject"]
        assert len(sheets["examples"]) == 4
        assert len(sheets["per_subject"]) == 2


class TestChannelMask:

    def test_no_subset_keeps_everything(self):
        np.testing.assert_array_equal(channel_mask(None, 4), np.ones(4))

    def test_duplicates_keep_one_channel(self):
        np.testing.assert_array_equal(channel_mask(ChannelSubset("resgs", [2, 2, 0]), 4), [1, 0, 1, 0])

    def test_empty_subset_zeroes_everything(self):
        assert channel_mask(ChannelSubset("convrs", []), 4).sum() == 0.0

    def test_out_of_range(self):
        with pytest.raises(SelectionError):
            channel_mask(ChannelSubset("resgs", [1, 16]), 16)


class TestEvaluate:

    def test_full_subset_equals_no_subset(self, tiny_model, small_corpus):
        examples = small_corpus[:2]
        full = evaluate(tiny_model, examples, ChannelSubset("convrs", list(range(16))))
        plain = evaluate(tiny_model, examples)
        pd.testing.assert_frame_equal(full.frame, plain.frame)

    def test_checkpoint_path(self, tiny_model, small_corpus, tmp_path):
        path = save_checkpoint(tiny_model, tmp_path / "model.pt", "basen", "basen", 0, 0.0)
        from_path = evaluate(path, small_corpus[:2])
        from_model = evaluate(tiny_model, small_corpus[:2])
        np.testing.assert_allclose(from_path.frame["si_sdr"], from_model.frame["si_sdr"], atol=1e-6)
        assert set(CORE_METRICS) <= set(from_path.metrics)


def test_long_segments(small_corpus):
    assert len(long_segments(small_corpus[:2], 1.0)) == 4
    kept = long_segments(small_corpus[:2], 20.0)
    assert [a is b for a, b in zip(kept, small_corpus[:2])] == [True, True]


@pytest.mark.parametrize(
    "indices, expected",
    [
        ([3, 3, 1], {"unique": [1], "duplicated": [3]}),
        ([0, 1, 2], {"unique": [0, 1, 2], "duplicated": []}),
        ([], {"unique": [], "duplicated": []}),
        ([5, 5, 5, 2, 2], {"unique": [], "duplicated": [2, 5]}),
    ],
)
def test_duplicate_report(indices, expected):
    assert duplicate_report(indices) == expected
    assert duplicate_report(ChannelSubset("resgs", indices)) == expected
