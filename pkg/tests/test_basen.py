"""Shape, linearity and configuration tests for the BASEN network and its selector wrapper."""

from dataclasses import replace

import numpy as np
import pytest
import torch

from src.backend.basen import (
    BASEN,
    CMCALayer,
    CrossAttention,
    ModelConfig,
    SparseBasen,
    build_selector,
    count_parameters,
)
from src.backend.errors import ShapeMismatchError, SignalTooShortError
from src.backend.selection import ConvRSelector, GumbelChannelSelector


def _inputs(batch=2, length=1001, channels=16, eeg_len=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, length, generator=g), torch.randn(batch, channels, eeg_len, generator=g)


class TestEncoders:

    def test_default_audio_frames(self):
        model = BASEN()
        w_x = model.audio_encode(torch.zeros(1, 29400))
        assert w_x.shape == (1, 64, 3675)

    def test_eeg_embedding_matches_audio_frames(self, tiny_model_config):
        model = BASEN(tiny_model_config)
        mixture, eeg = _inputs()
        w_x = model.audio_encode(mixture)
        e_x = model.eeg_encode(eeg, w_x.shape[-1])
        assert e_x.shape == w_x.shape == (2, 8, 125)

    def test_wrong_channel_count(self, tiny_model_config):
        model = BASEN(tiny_model_config)
        with pytest.raises(ShapeMismatchError):
            model.eeg_encode(torch.zeros(1, 15, 64), 10)

    def test_audio_shorter_than_stride(self, tiny_model_config):
        with pytest.raises(SignalTooShortError):
            BASEN(tiny_model_config).audio_encode(torch.zeros(1, 4))


class TestForward:

    def test_output_shape_keeps_length(self, tiny_model_config):
        model = BASEN(tiny_model_config).eval()
        mixture, eeg = _inputs()
        with torch.no_grad():
            out = model(mixture, eeg)
        assert out.shape == (2, 2, 1001)

    def test_unbatched_input(self, tiny_model_config):
        model = BASEN(tiny_model_config).eval()
        mixture, eeg = _inputs(batch=1)
        with torch.no_grad():
            assert model(mixture[0], eeg[0]).shape == (2, 1001)

    def test_silent_mixture_gives_silence(self, tiny_model_config):
        model = BASEN(tiny_model_config).eval()
        _, eeg = _inputs()
        with torch.no_grad():
            out = model(torch.zeros(2, 1001), eeg)
        assert float(out.abs().max()) == 0.0

    def test_deterministic_in_eval(self, tiny_model_config):
        torch.manual_seed(0)
        model = BASEN(tiny_model_config).eval()
        mixture, eeg = _inputs()
        with torch.no_grad():
            torch.testing.assert_close(model(mixture, eeg), model(mixture, eeg))

    def test_masks_are_bounded(self, tiny_model_config):
        model = BASEN(tiny_model_config).eval()
        mixture, eeg = _inputs()
        with torch.no_grad():
            w_x = model.audio_encode(mixture)
            masks = model.separate(model.cmca_fuse(w_x, model.eeg_encode(eeg, w_x.shape[-1])))
        assert masks.shape == (2, 2, 8, 125)
        assert bool(((masks >= 0) & (masks <= 1)).all())

    def test_decoder_is_linear(self, tiny_model_config):
        model = BASEN(tiny_model_config)
        g = torch.Generator().manual_seed(1)
        a, b = torch.randn(1, 8, 50, generator=g), torch.randn(1, 8, 50, generator=g)
        with torch.no_grad():
            lhs = model.decoder(2.0 * a + b, 400)
            rhs = 2.0 * model.decoder(a, 400) + model.decoder(b, 400)
        np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-5)

    def test_gradients_are_finite(self, tiny_model_config):
        model = BASEN(tiny_model_config)
        mixture, eeg = _inputs()
        model(mixture, eeg)[:, 0].pow(2).mean().backward()
        grads = [p.grad for p in model.parameters() if p.grad is not None]
        assert grads
        assert all(bool(torch.isfinite(g).all()) for g in grads)

    @pytest.mark.parametrize("duration_s", [1.0, 2.0, 20.0])
    def test_length_is_preserved(self, tiny_model_config, duration_s):
        model = BASEN(tiny_model_config).eval()
        length, eeg_len = int(duration_s * 2000), int(duration_s * 128)
        mixture, eeg = _inputs(batch=1, length=length, eeg_len=eeg_len)
        with torch.no_grad():
            assert model(mixture, eeg).shape == (1, 2, length)

    def test_fusion_layer_passes_audio_through_with_zero_values(self):
        layer = CMCALayer(8, 2)
        with torch.no_grad():
            for proj in (layer.att_audio.q_proj, layer.att_audio.v_proj):
                proj.weight.zero_()
                proj.bias.zero_()
            layer.att_audio.out_proj.bias.zero_()
        g = torch.Generator().manual_seed(2)
        w, e = torch.randn(2, 8, 30, generator=g), torch.randn(2, 8, 30, generator=g)
        with torch.no_grad():
            w_next, _ = layer(w, e)
            torch.testing.assert_close(w_next, layer.norm_audio(w))
            torch.testing.assert_close(w_next, torch.nn.functional.group_norm(w, 1, eps=1e-8))

    def test_fusion_layer_output_is_normalized(self):
        layer = CMCALayer(8, 2)
        g = torch.Generator().manual_seed(3)
        w, e = 3.0 + 5.0 * torch.randn(2, 8, 40, generator=g), torch.randn(2, 8, 40, generator=g)
        with torch.no_grad():
            for out in layer(w, e):
                flat = out.reshape(2, -1)
                np.testing.assert_allclose(flat.mean(dim=1).numpy(), 0.0, atol=1e-5)
                np.testing.assert_allclose(flat.var(dim=1, unbiased=False).numpy(), 1.0, atol=1e-4)

    def test_output_depends_on_eeg_channel_order(self, tiny_model_config):
        torch.manual_seed(0)
        model = BASEN(tiny_model_config).eval()
        mixture, eeg = _inputs(batch=1)
        permuted = eeg[:, torch.randperm(16, generator=torch.Generator().manual_seed(1))]
        with torch.no_grad():
            difference = (model(mixture, eeg) - model(mixture, permuted)).abs().max()
        assert float(difference) > 1e-6

    def test_query_blocks_match_full_attention(self):
        torch.manual_seed(0)
        full = CrossAttention(8, 2)
        blocked = CrossAttention(8, 2, query_chunk=7)
        blocked.load_state_dict(full.state_dict())
        g = torch.Generator().manual_seed(4)
        query, key = torch.randn(2, 8, 50, generator=g), torch.randn(2, 8, 50, generator=g)
        with torch.no_grad():
            torch.testing.assert_close(blocked(query, key, key), full(query, key, key), atol=1e-6, rtol=1e-5)

    def test_gradients_match_finite_differences(self, tiny_model_config):
        torch.manual_seed(0)
        model = BASEN(tiny_model_config).double()
        mixture, eeg = _inputs(batch=1, length=401, eeg_len=32)
        mixture, eeg = mixture.double(), eeg.double()

        def loss() -> torch.Tensor:
            return model(mixture, eeg)[:, 0].pow(2).mean()

        loss().backward()
        params = dict(model.named_parameters())
        names = ["audio_encoder.convs.0.weight", "eeg_encoder.downsample.weight",
                 "fusion.layers.0.att_audio.q_proj.weight", "separator.output_conv.weight"]
        rng = np.random.default_rng(0)
        eps = 1e-6
        for name in names:
            param = params[name]
            for flat_index in rng.choice(param.numel(), size=2, replace=False):
                index = tuple(int(i) for i in np.unravel_index(int(flat_index), tuple(param.shape)))
                analytic = float(param.grad[index])
                with torch.no_grad():
                    original = float(param[index])
                    param[index] = original + eps
                    upper = float(loss())
                    param[index] = original - eps
                    lower = float(loss())
                    param[index] = original
                numeric = (upper - lower) / (2 * eps)
                assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic)) + 1e-9, name

    def test_eeg_required_for_fusion(self, tiny_model_config):
        with pytest.raises(ShapeMismatchError):
            BASEN(tiny_model_config)(torch.zeros(1, 1001))


class TestConfiguration:

    def test_default_parameter_count(self):
        assert 400_000 <= count_parameters(BASEN()) <= 1_000_000

    @pytest.mark.parametrize("fusion", ["concat", "audio_only"])
    def test_fusion_variants(self, tiny_model_config, fusion):
        model = BASEN(replace(tiny_model_config, fusion=fusion)).eval()
        mixture, eeg = _inputs()
        with torch.no_grad():
            assert model(mixture, eeg).shape == (2, 2, 1001)

    def test_audio_only_ignores_eeg(self, tiny_model_config):
        model = BASEN(replace(tiny_model_config, fusion="audio_only")).eval()
        mixture, _ = _inputs()
        with torch.no_grad():
            assert model(mixture).shape == (2, 2, 1001)

    def test_zero_eeg_ablation(self, tiny_model_config):
        model = BASEN(replace(tiny_model_config, zero_eeg=True)).eval()
        mixture, eeg = _inputs()
        with torch.no_grad():
            torch.testing.assert_close(model(mixture, eeg), model(mixture, 3.0 * eeg + 1.0))

    def test_validate_collects_fields(self):
        bad = ModelConfig(embed_dim=64, attention_heads=3, fusion="late", n_sources=1).validate()
        assert {"attention_heads", "fusion", "n_sources"} <= set(bad)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            BASEN(ModelConfig(audio_kernels=(16,), audio_strides=(8, 1)))

    def test_dict_round_trip(self, tiny_model_config):
        assert ModelConfig.from_dict(tiny_model_config.to_dict()) == tiny_model_config


class TestSparseBasen:

    def test_resgs_mode_keeps_all_channels(self, tiny_model_config):
        model = SparseBasen(BASEN(tiny_model_config), GumbelChannelSelector(16, 4), mode="resgs").train()
        mixture, eeg = _inputs()
        out, s = model(mixture, eeg, torch.Generator().manual_seed(0))
        assert out.shape == (2, 2, 1001)
        assert s is None
        selected, _ = model.select(eeg, torch.Generator().manual_seed(0))
        assert selected.shape == eeg.shape

    def test_gcs_mode_feeds_k_channels(self, tiny_model_config):
        basen = BASEN(replace(tiny_model_config, eeg_channels=4))
        model = SparseBasen(basen, GumbelChannelSelector(16, 4), mode="gcs").eval()
        mixture, eeg = _inputs()
        with torch.no_grad():
            out, _ = model(mixture, eeg)
        assert out.shape == (2, 2, 1001)

    def test_convrs_mode_returns_selection(self, tiny_model_config):
        model = SparseBasen(BASEN(tiny_model_config), ConvRSelector(16), mode="convrs")
        mixture, eeg = _inputs()
        _, s = model(mixture, eeg)
        assert s.shape == (2, 16)

    def test_residual_off_pads_selection(self, tiny_model_config):
        model = SparseBasen(BASEN(tiny_model_config), GumbelChannelSelector(16, 4), mode="resgs").eval()
        model.residual = False
        _, eeg = _inputs()
        selected, _ = model.select(eeg)
        assert float(selected[:, 4:].abs().sum()) == 0.0

    def test_mode_needs_selector(self, tiny_model_config):
        with pytest.raises(ValueError):
            SparseBasen(BASEN(tiny_model_config), mode="convrs")

    def test_build_selector_from_config(self):
        assert build_selector(None) is None
        gcs = build_selector(GumbelChannelSelector(16, 3).config())
        assert (gcs.q_channels, gcs.k_neurons) == (16, 3)
        convrs = build_selector(ConvRSelector(8, n_blocks=3).config())
        assert convrs.n_blocks == 3
        with pytest.raises(ValueError):
            build_selector({"type": "lasso"})
