"""Tests for Gumbel channel selection, ResGS blending, ConvRS and subset aggregation."""

import json

import numpy as np
import pytest
import torch

from src.backend.errors import SelectionError, ShapeMismatchError, SignalTooShortError
from src.backend.signal_prep import EEGTrial
from src.backend.selection import (
    ChannelSubset,
    ConvRSelector,
    GumbelChannelSelector,
    aggregate_selection,
    convrs_apply,
    convrs_forward,
    gcs_apply,
    gcs_probabilities,
    gcs_test_select,
    gumbel_sample_weights,
    pad_channels,
    resgs_combine,
)


class TestGumbelWeights:

    def test_rows_are_distributions(self):
        g = torch.Generator().manual_seed(0)
        W = gumbel_sample_weights(torch.randn(4, 16, generator=g), tau=0.7, generator=g)
        np.testing.assert_allclose(W.sum(dim=-1).numpy(), 1.0, atol=1e-6)
        assert bool(((W > 0) & (W < 1)).all())

    def test_high_temperature_is_uniform(self):
        g = torch.Generator().manual_seed(1)
        W = gumbel_sample_weights(torch.zeros(3, 16), tau=1e6, generator=g)
        np.testing.assert_allclose(W.numpy(), 1 / 16, atol=1e-3)

    def test_low_temperature_is_one_hot(self):
        log_alpha = torch.tensor([[0.1, 0.5, 0.2], [0.9, 0.0, 0.3]], dtype=torch.float64)
        W = gumbel_sample_weights(log_alpha, tau=1e-4, noise=torch.zeros_like(log_alpha))
        assert W.max(dim=-1).values.min() > 0.999
        assert W.argmax(dim=-1).tolist() == [1, 0]

    def test_reparametrization_gradient(self):
        log_alpha = torch.randn(2, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        noise = torch.randn(2, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
        projection = torch.arange(10, dtype=torch.float64).view(2, 5)

        def objective(x):
            return float((gumbel_sample_weights(x, tau=0.8, noise=noise) * projection).sum())

        param = log_alpha.clone().requires_grad_(True)
        (gumbel_sample_weights(param, tau=0.8, noise=noise) * projection).sum().backward()
        h = 1e-6
        for k, q in [(0, 0), (0, 3), (1, 4)]:
            up, down = log_alpha.clone(), log_alpha.clone()
            up[k, q] += h
            down[k, q] -= h
            numeric = (objective(up) - objective(down)) / (2 * h)
            assert float(param.grad[k, q]) == pytest.approx(numeric, rel=1e-3, abs=1e-8)

    def test_lower_temperature_sharpens(self):
        g = torch.Generator().manual_seed(5)
        log_alpha = torch.randn(4, 16, dtype=torch.float64, generator=g)
        noise = torch.randn(4, 16, dtype=torch.float64, generator=g)
        peaks = [gumbel_sample_weights(log_alpha, tau=tau, noise=noise).max(dim=-1).values.numpy()
                 for tau in (5.0, 2.0, 1.0, 0.5, 0.2)]
        for hotter, colder in zip(peaks, peaks[1:]):
            assert bool((colder > hotter).all())

    def test_shifting_scores_changes_nothing(self):
        g = torch.Generator().manual_seed(6)
        log_alpha = torch.randn(3, 16, dtype=torch.float64, generator=g)
        noise = torch.randn(3, 16, dtype=torch.float64, generator=g)
        torch.testing.assert_close(gumbel_sample_weights(log_alpha + 3.0, tau=0.7, noise=noise),
                                   gumbel_sample_weights(log_alpha, tau=0.7, noise=noise))

    def test_rejects_non_positive_temperature(self):
        with pytest.raises(ValueError):
            gumbel_sample_weights(torch.zeros(1, 4), tau=0.0)


class TestGcsApply:

    def test_one_hot_rows_copy_channels(self):
        e = np.random.default_rng(0).standard_normal((6, 50))
        W = torch.zeros(2, 6, dtype=torch.float64)
        W[0, 4] = 1.0
        W[1, 1] = 1.0
        z = gcs_apply(e, W)
        np.testing.assert_array_equal(z, e[[4, 1]])

    def test_uniform_rows_average(self):
        e = np.random.default_rng(1).standard_normal((4, 30))
        z = gcs_apply(e, torch.full((3, 4), 0.25, dtype=torch.float64))
        for row in z:
            np.testing.assert_allclose(row, e.mean(axis=0), atol=1e-12)

    def test_matches_matrix_product(self):
        rng = np.random.default_rng(2)
        e, W = rng.standard_normal((2, 8, 40)), rng.random((3, 8))
        z = gcs_apply(torch.as_tensor(e), torch.as_tensor(W))
        np.testing.assert_allclose(z.numpy(), np.einsum("kq,bqt->bkt", W, e), atol=1e-6)

    def test_trial_output_is_labelled(self):
        trial = EEGTrial(np.zeros((5, 20)), 128.0)
        z = gcs_apply(trial, torch.eye(5)[:2])
        assert isinstance(z, EEGTrial)
        assert z.channel_labels == ["Sel01", "Sel02"]

    def test_wrong_width(self):
        with pytest.raises(ShapeMismatchError):
            gcs_apply(np.zeros((4, 10)), torch.ones(2, 5))


class TestGcsSelection:

    def test_probabilities_hand_example(self):
        p = gcs_probabilities(torch.log(torch.tensor([[1.0, 1.0, 2.0]], dtype=torch.float64)))
        np.testing.assert_allclose(p.numpy(), [[0.25, 0.25, 0.5]], atol=1e-12)

    def test_uniform_probabilities(self):
        np.testing.assert_allclose(gcs_probabilities(torch.zeros(2, 8)).numpy(), 1 / 8, atol=1e-7)

    def test_one_hot_rows(self):
        subset = gcs_test_select(torch.eye(4)[[2, 0]] * 5)
        assert subset.indices == [2, 0]
        assert subset.duplicate_count == 0
        assert subset.gamma_or_K == 2

    def test_duplicates_are_counted(self):
        log_alpha = torch.zeros(3, 5)
        log_alpha[0, 3] = log_alpha[1, 3] = 2.0
        log_alpha[2, 1] = 2.0
        subset = gcs_test_select(log_alpha)
        assert subset.indices == [3, 3, 1]
        assert subset.duplicate_count == 1
        assert subset.unique_indices == [1, 3]

    def test_ties_take_lowest_index(self):
        assert gcs_test_select(torch.zeros(2, 6)).indices == [0, 0]


class TestGumbelChannelSelector:

    def test_k_above_q(self):
        with pytest.raises(SelectionError):
            GumbelChannelSelector(4, 5)

    def test_eval_mode_passes_argmax_channels(self):
        selector = GumbelChannelSelector(6, 2)
        with torch.no_grad():
            selector.log_alpha[0, 5] = 3.0
            selector.log_alpha[1, 2] = 3.0
        selector.eval()
        e = torch.randn(1, 6, 20)
        np.testing.assert_array_equal(selector(e).numpy(), e[:, [5, 2]].numpy())

    def test_training_mode_is_soft_and_seeded(self):
        selector = GumbelChannelSelector(6, 2).train()
        e = torch.randn(6, 20)
        a = selector(e, torch.Generator().manual_seed(0))
        b = selector(e, torch.Generator().manual_seed(0))
        torch.testing.assert_close(a, b)
        assert a.shape == (2, 20)

    def test_hard_flag_overrides_training(self):
        selector = GumbelChannelSelector(4, 2).train()
        selector.hard = True
        W = selector.weights()
        assert W.sum().item() == 2.0
        assert set(W.unique().tolist()) == {0.0, 1.0}


class TestResgs:

    def test_zero_eeg_gives_scaled_padding(self):
        z = torch.randn(2, 10)
        out = resgs_combine(torch.zeros(4, 10), z, a=0.1)
        torch.testing.assert_close(out, 0.1 * pad_channels(z, 4))

    def test_zero_weight_is_identity(self):
        e = torch.randn(4, 10)
        torch.testing.assert_close(resgs_combine(e, torch.randn(2, 10), a=0.0), e)

    def test_hand_values(self):
        e = torch.tensor([[1.0], [2.0], [3.0], [4.0]], dtype=torch.float64)
        z = torch.tensor([[10.0], [20.0]], dtype=torch.float64)
        out = resgs_combine(e, z, a=0.1)
        expected = torch.tensor([[0.9 + 1.0], [1.8 + 2.0], [2.7], [3.6]], dtype=torch.float64)
        torch.testing.assert_close(out, expected)

    def test_argmax_placement(self):
        z = torch.tensor([[1.0, 1.0], [2.0, 2.0]])
        out = pad_channels(z, 4, placement="argmax", positions=[3, 3])
        torch.testing.assert_close(out[3], torch.tensor([3.0, 3.0]))
        assert float(out[:3].abs().sum()) == 0.0

    def test_invalid_weight(self):
        with pytest.raises(ValueError):
            resgs_combine(torch.zeros(4, 5), torch.zeros(2, 5), a=1.5)

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            resgs_combine(torch.zeros(4, 5), torch.zeros(2, 6))


class TestConvRS:

    @pytest.mark.parametrize("length", [64, 256, 1000])
    def test_output_has_one_entry_per_channel(self, length):
        selector = ConvRSelector(16)
        s = convrs_forward(selector, torch.randn(3, 16, length))
        assert s.shape == (3, 16)
        assert bool(((s >= 0) & (s <= 1)).all())

    def test_single_trial(self):
        s = convrs_forward(ConvRSelector(8), EEGTrial(np.random.default_rng(0).standard_normal((8, 256)), 128.0))
        assert s.shape == (8,)

    def test_reduced_length(self):
        selector = ConvRSelector(16, n_blocks=4)
        assert selector.blocks(torch.randn(1, 16, 256)).shape[-1] == 16

    def test_initial_values_near_half(self):
        s = ConvRSelector(16)(torch.randn(4, 16, 256, generator=torch.Generator().manual_seed(0)))
        assert float((s - 0.5).abs().mean()) < 0.15

    def test_too_short(self):
        with pytest.raises(SignalTooShortError):
            ConvRSelector(4, n_blocks=4)(torch.randn(4, 8))

    def test_wrong_channel_count(self):
        with pytest.raises(ShapeMismatchError):
            ConvRSelector(4)(torch.randn(5, 64))

    def test_apply_identity_and_zeroing(self):
        e = torch.randn(2, 4, 30, dtype=torch.float64)
        torch.testing.assert_close(convrs_apply(e, torch.ones(2, 4)), e)
        s = torch.ones(2, 4)
        s[:, 2] = 0.0
        assert float(convrs_apply(e, s)[:, 2].abs().sum()) == 0.0

    def test_apply_matches_broadcast(self):
        rng = np.random.default_rng(3)
        e, s = rng.standard_normal((5, 40)), rng.random(5)
        np.testing.assert_allclose(convrs_apply(e, torch.as_tensor(s)), e * s[:, None], atol=1e-7)


class TestAggregateSelection:

    def test_single_vector(self):
        assert aggregate_selection([[0.9, 0.1, 0.6]], 0.5).indices == [0, 2]

    def test_binary_vectors_give_support(self):
        vectors = [np.array([1.0, 0.0, 1.0, 0.0])] * 3
        assert aggregate_selection(vectors).indices == [0, 2]

    def test_threshold_is_inclusive(self):
        subset = aggregate_selection([[1.0, 0.0], [0.0, 1.0]], 0.5)
        assert subset.indices == [0, 1]
        assert subset.duplicate_count == 0

    def test_batched_tensors(self):
        subset = aggregate_selection([torch.tensor([[0.9, 0.2], [0.7, 0.4]])], gamma=0.1)
        assert subset.indices == [0]
        assert subset.gamma_or_K == 0.1
        np.testing.assert_allclose(subset.mean_probabilities, [0.8, 0.3], atol=1e-6)

    def test_empty_list(self):
        with pytest.raises(SelectionError):
            aggregate_selection([])


class TestChannelSubset:

    def test_json_round_trip_and_sorted_keys(self, tmp_path):
        subset = ChannelSubset("resgs", [3, 7, 3], gamma_or_K=3, mean_probabilities=[0.9, 0.8, 0.7])
        subset.to_json(tmp_path / "subset.json")
        data = json.loads((tmp_path / "subset.json").read_text())
        assert list(data) == sorted(data)
        assert data["duplicate_count"] == 1
        loaded = ChannelSubset.from_json(tmp_path / "subset.json")
        assert loaded == subset

    def test_malformed(self):
        with pytest.raises(SelectionError):
            ChannelSubset.from_dict({"method": "gcs"})
