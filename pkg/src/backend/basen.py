"""
BASEN Network for the BASEN toolkit
Handles the brain-assisted speech-enhancement network: audio and EEG
encoders, the multi-layer cross-attention fusion, the TCN mask separator
and the linear decoder, plus the wrapper that puts a channel selector in
front of it.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.backend.errors import ShapeMismatchError, SignalTooShortError
from src.backend.selection import (
    ConvRSelector,
    GumbelChannelSelector,
    convrs_apply,
    pad_channels,
    resgs_combine,
)

logger = logging.getLogger(__name__)

FUSIONS = ("cmca", "concat", "audio_only")
ATTENTION_QUERY_CHUNK = 1024


@dataclass
class ModelConfig:
    """Hyperparameters of a BASEN network."""
    eeg_channels: int = 16
    embed_dim: int = 64
    audio_kernels: Tuple[int, ...] = (16, 3)
    audio_strides: Tuple[int, ...] = (8, 1)
    eeg_kernel: int = 8
    eeg_stride: int = 8
    eeg_tcn_layers: int = 8
    eeg_hidden: int = 128
    cmca_layers: int = 3
    attention_heads: int = 4
    separator_layers: int = 8
    separator_stacks: int = 2
    separator_bottleneck: int = 64
    separator_hidden: int = 128
    separator_kernel: int = 3
    n_sources: int = 2
    fusion: str = "cmca"
    zero_eeg: bool = False
    norm_groups: int = 1

    def __post_init__(self):
        self.audio_kernels = tuple(int(k) for k in self.audio_kernels)
        self.audio_strides = tuple(int(s) for s in self.audio_strides)

    def validate(self) -> List[str]:
        """Return the names of invalid fields."""
        bad = []
        positive = ("eeg_channels", "embed_dim", "eeg_kernel", "eeg_stride", "eeg_hidden",
                    "attention_heads", "separator_layers", "separator_stacks",
                    "separator_bottleneck", "separator_hidden", "separator_kernel", "norm_groups")
        for name in positive:
            if getattr(self, name) < 1:
                bad.append(name)
        if self.eeg_tcn_layers < 0:
            bad.append("eeg_tcn_layers")
        if self.cmca_layers < 1:
            bad.append("cmca_layers")
        if self.n_sources < 2:
            bad.append("n_sources")
        if self.fusion not in FUSIONS:
            bad.append("fusion")
        if (len(self.audio_kernels) == 0 or len(self.audio_kernels) != len(self.audio_strides)
                or any(s < 1 for s in self.audio_strides)
                or any(k < s or (k - s) % 2 for k, s in zip(self.audio_kernels, self.audio_strides))):
            bad.extend(["audio_kernels", "audio_strides"])
        if self.attention_heads >= 1 and self.embed_dim % self.attention_heads:
            bad.append("attention_heads")
        if self.norm_groups >= 1:
            for name in ("embed_dim", "eeg_hidden", "separator_bottleneck", "separator_hidden"):
                if getattr(self, name) % self.norm_groups and "norm_groups" not in bad:
                    bad.append("norm_groups")
        return bad

    def to_dict(self) -> dict:
        data = asdict(self)
        data["audio_kernels"] = list(self.audio_kernels)
        data["audio_strides"] = list(self.audio_strides)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    @property
    def stride_product(self) -> int:
        return math.prod(self.audio_strides)


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def _zero_biases(module: nn.Module) -> None:
    for sub in module.modules():
        if isinstance(sub, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)) and sub.bias is not None:
            nn.init.zeros_(sub.bias)


class DepthConv1d(nn.Module):
    """
    One TCN block:
      1x1 conv -> PReLU+GN -> depthwise dilated conv -> PReLU+GN -> 1x1 conv (residual)
      Optional 1x1 skip connection.
    """

    def __init__(self, input_channel: int, hidden_channel: int, kernel: int, dilation: int = 1,
                 skip: bool = True, groups: int = 1):
        super().__init__()
        self.skip = skip
        padding = dilation * (kernel - 1) // 2

        self.conv1d = nn.Conv1d(input_channel, hidden_channel, kernel_size=1)
        self.dconv1d = nn.Conv1d(hidden_channel, hidden_channel, kernel_size=kernel,
                                 dilation=dilation, groups=hidden_channel, padding=padding)
        self.res_out = nn.Conv1d(hidden_channel, input_channel, kernel_size=1)
        if self.skip:
            self.skip_out = nn.Conv1d(hidden_channel, input_channel, kernel_size=1)

        self.nonlinearity1 = nn.PReLU()
        self.nonlinearity2 = nn.PReLU()
        self.reg1 = nn.GroupNorm(groups, hidden_channel, eps=1e-8)
        self.reg2 = nn.GroupNorm(groups, hidden_channel, eps=1e-8)

    def forward(self, x: torch.Tensor):
        h = self.reg1(self.nonlinearity1(self.conv1d(x)))
        h = self.reg2(self.nonlinearity2(self.dconv1d(h)))
        residual = self.res_out(h)
        if self.skip:
            return residual, self.skip_out(h)
        return residual


class AudioEncoder(nn.Module):
    """Strided 1-D convolutions from waveform to C x F embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        in_channels = 1
        for kernel, stride in zip(cfg.audio_kernels, cfg.audio_strides):
            layers.append(nn.Conv1d(in_channels, cfg.embed_dim, kernel, stride=stride, padding=(kernel - stride) // 2))
            in_channels = cfg.embed_dim
        self.convs = nn.ModuleList(layers)
        self.stride_product = cfg.stride_product

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] < self.stride_product:
            raise SignalTooShortError(
                f"Audio input of {x.shape[-1]} samples is shorter than one stride window ({self.stride_product})"
            )
        h = x.unsqueeze(1)
        for conv in self.convs:
            h = F.relu(conv(h))
        return h


class AudioDecoder(nn.Module):
    """Mirror of the encoder with transposed convolutions and no output nonlinearity."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        pairs = list(zip(cfg.audio_kernels, cfg.audio_strides))[::-1]
        for i, (kernel, stride) in enumerate(pairs):
            out_channels = 1 if i == len(pairs) - 1 else cfg.embed_dim
            layers.append(nn.ConvTranspose1d(cfg.embed_dim, out_channels, kernel, stride=stride,
                                             padding=(kernel - stride) // 2, bias=False))
        self.deconvs = nn.ModuleList(layers)

    def forward(self, w: torch.Tensor, length: int) -> torch.Tensor:
        h = w
        for deconv in self.deconvs:
            h = deconv(h)
        h = h.squeeze(1)
        if h.shape[-1] >= length:
            return h[..., :length]
        return F.pad(h, (0, length - h.shape[-1]))


class EEGEncoder(nn.Module):
    """Strided conv, residual depthwise TCN, then linear resampling to the audio frame count."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stride = cfg.eeg_stride
        self.kernel = cfg.eeg_kernel
        self.downsample = nn.Conv1d(cfg.eeg_channels, cfg.embed_dim, cfg.eeg_kernel, stride=cfg.eeg_stride)
        self.blocks = nn.ModuleList([
            DepthConv1d(cfg.embed_dim, cfg.eeg_hidden, kernel=3, dilation=2 ** layer,
                        skip=False, groups=cfg.norm_groups)
            for layer in range(cfg.eeg_tcn_layers)
        ])
        self.projection = nn.Conv1d(cfg.embed_dim, cfg.embed_dim, 1)

    def forward(self, e: torch.Tensor, target_frames: int) -> torch.Tensor:
        if e.shape[-1] < self.kernel:
            raise SignalTooShortError(f"EEG input of {e.shape[-1]} samples is shorter than the {self.kernel}-sample window")
        h = self.downsample(e)
        for block in self.blocks:
            h = h + block(h)
        h = F.interpolate(h, size=target_frames, mode="linear", align_corners=False)
        return self.projection(h)


class CrossAttention(nn.Module):
    """Multi-head attention over frames; inputs are B x C x F.

    Queries are processed in blocks of `query_chunk` frames, each against the
    full key and value sequence, so a score block is at most query_chunk x F.
    """

    def __init__(self, dim: int, heads: int, query_chunk: int = ATTENTION_QUERY_CHUNK):
        super().__init__()
        self.heads = heads
        self.query_chunk = query_chunk
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, frames, dim = x.shape
        return x.view(batch, frames, self.heads, dim // self.heads).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
        q = self._split(self.q_proj(query.transpose(1, 2)))
        k = self._split(self.k_proj(key.transpose(1, 2)))
        v = self._split(self.v_proj(value.transpose(1, 2)))
        if q.shape[-2] <= self.query_chunk:
            out = F.scaled_dot_product_attention(q, k, v)
        else:
            out = torch.cat([F.scaled_dot_product_attention(block, k, v)
                             for block in q.split(self.query_chunk, dim=-2)], dim=-2)
        batch, _, frames, _ = out.shape
        out = out.transpose(1, 2).reshape(batch, frames, -1)
        return self.out_proj(out).transpose(1, 2)


class CMCALayer(nn.Module):
    """Coupled cross attention: each branch attends from the other, with residual and GroupNorm."""

    def __init__(self, dim: int, heads: int, groups: int = 1):
        super().__init__()
        self.att_audio = CrossAttention(dim, heads)
        self.att_eeg = CrossAttention(dim, heads)
        self.norm_audio = nn.GroupNorm(groups, dim, eps=1e-8)
        self.norm_eeg = nn.GroupNorm(groups, dim, eps=1e-8)

    def forward(self, w: torch.Tensor, e: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        w_next = self.norm_audio(w + self.att_audio(e, w, w))
        e_next = self.norm_eeg(e + self.att_eeg(w, e, e))
        return w_next, e_next


class CMCAFusion(nn.Module):
    """N coupled layers, summed per branch, concatenated with the inputs and mixed by a 1x1 conv."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList([
            CMCALayer(cfg.embed_dim, cfg.attention_heads, cfg.norm_groups) for _ in range(cfg.cmca_layers)
        ])
        self.output = nn.Conv1d(4 * cfg.embed_dim, cfg.embed_dim, 1)

    def forward(self, w_x: torch.Tensor, e_x: torch.Tensor) -> torch.Tensor:
        if w_x.shape != e_x.shape:
            raise ShapeMismatchError(f"Audio embedding {tuple(w_x.shape)} and EEG embedding {tuple(e_x.shape)} differ")
        w, e = w_x, e_x
        w_sum = torch.zeros_like(w_x)
        e_sum = torch.zeros_like(e_x)
        for layer in self.layers:
            w, e = layer(w, e)
            w_sum = w_sum + w
            e_sum = e_sum + e
        return self.output(torch.cat([w_sum, e_sum, w_x, e_x], dim=1))


class ConcatFusion(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.output = nn.Conv1d(2 * cfg.embed_dim, cfg.embed_dim, 1)

    def forward(self, w_x: torch.Tensor, e_x: torch.Tensor) -> torch.Tensor:
        if w_x.shape != e_x.shape:
            raise ShapeMismatchError(f"Audio embedding {tuple(w_x.shape)} and EEG embedding {tuple(e_x.shape)} differ")
        return self.output(torch.cat([w_x, e_x], dim=1))


class MaskSeparator(nn.Module):
    """TCN separator producing T sigmoid masks, shape B x T x C x F."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_sources = cfg.n_sources
        self.embed_dim = cfg.embed_dim
        self.input_norm = nn.GroupNorm(cfg.norm_groups, cfg.embed_dim, eps=1e-8)
        self.input_conv = nn.Conv1d(cfg.embed_dim, cfg.separator_bottleneck, 1)
        self.blocks = nn.ModuleList([
            DepthConv1d(cfg.separator_bottleneck, cfg.separator_hidden, cfg.separator_kernel,
                        dilation=2 ** layer, skip=True, groups=cfg.norm_groups)
            for _ in range(cfg.separator_stacks)
            for layer in range(cfg.separator_layers)
        ])
        self.output_prelu = nn.PReLU()
        self.output_conv = nn.Conv1d(cfg.separator_bottleneck, cfg.embed_dim * cfg.n_sources, 1)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        batch = fused.shape[0]
        feats = self.input_conv(self.input_norm(fused))
        output = 0.0
        for block in self.blocks:
            residual, skip = block(feats)
            feats = feats + residual
            output = output + skip
        masks = torch.sigmoid(self.output_conv(self.output_prelu(output)))
        return masks.view(batch, self.n_sources, self.embed_dim, -1)


class BASEN(nn.Module):
    """Brain-assisted speech enhancement network. Mask 0 is the target."""

    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        bad = self.cfg.validate()
        if bad:
            raise ValueError(f"Invalid model configuration fields: {bad}")
        self.audio_encoder = AudioEncoder(self.cfg)
        self.decoder = AudioDecoder(self.cfg)
        if self.cfg.fusion != "audio_only":
            self.eeg_encoder = EEGEncoder(self.cfg)
            self.fusion = CMCAFusion(self.cfg) if self.cfg.fusion == "cmca" else ConcatFusion(self.cfg)
        self.separator = MaskSeparator(self.cfg)
        _zero_biases(self)

    def audio_encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.audio_encoder(x)

    def eeg_encode(self, e: torch.Tensor, target_frames: int) -> torch.Tensor:
        if e.shape[-2] != self.cfg.eeg_channels:
            raise ShapeMismatchError(f"Model expects {self.cfg.eeg_channels} EEG channels, got {e.shape[-2]}")
        return self.eeg_encoder(e, target_frames)

    def cmca_fuse(self, w_x: torch.Tensor, e_x: torch.Tensor) -> torch.Tensor:
        return self.fusion(w_x, e_x)

    def separate(self, fused: torch.Tensor) -> torch.Tensor:
        return self.separator(fused)

    def decode(self, w_x: torch.Tensor, mask: torch.Tensor, length: int) -> torch.Tensor:
        if w_x.shape != mask.shape:
            raise ShapeMismatchError(f"Mask {tuple(mask.shape)} does not match embedding {tuple(w_x.shape)}")
        return self.decoder(w_x * mask, length)

    def forward(self, mixture: torch.Tensor, eeg: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            mixture: B x L waveforms
            eeg: B x Q x T EEG trials (ignored for audio-only fusion)

        Returns:
            B x n_sources x L estimates
        """
        squeeze = mixture.ndim == 1
        if squeeze:
            mixture = mixture.unsqueeze(0)
            eeg = eeg.unsqueeze(0) if eeg is not None else None
        length = mixture.shape[-1]

        w_x = self.audio_encode(mixture)
        if self.cfg.fusion == "audio_only":
            fused = w_x
        else:
            if eeg is None:
                raise ShapeMismatchError("EEG input is required unless fusion is audio_only")
            if self.cfg.zero_eeg:
                eeg = torch.zeros_like(eeg)
            e_x = self.eeg_encode(eeg, w_x.shape[-1])
            fused = self.cmca_fuse(w_x, e_x)

        masks = self.separate(fused)
        estimates = torch.stack(
            [self.decode(w_x, masks[:, t], length) for t in range(self.cfg.n_sources)], dim=1
        )
        return estimates.squeeze(0) if squeeze else estimates


class SparseBasen(nn.Module):
    """BASEN behind an optional channel selector.

    mode "resgs": GCS output blended with the raw EEG (residual on) or padded
    alone (residual off); mode "gcs": GCS output feeds a K-channel BASEN;
    mode "convrs": EEG scaled by the ConvRS mask; mode "none": BASEN alone.
    """

    MODES = ("none", "gcs", "resgs", "convrs")

    def __init__(self, basen: BASEN, selector: Optional[nn.Module] = None, mode: str = "none",
                 residual_weight: float = 0.1, placement: str = "leading"):
        super().__init__()
        if mode not in self.MODES:
            raise ValueError(f"Unknown selection mode '{mode}'")
        if mode != "none" and selector is None:
            raise ValueError(f"Selection mode '{mode}' needs a selector")
        self.basen = basen
        self.selector = selector
        self.mode = mode
        self.residual_weight = residual_weight
        self.placement = placement
        self.residual = True

    def select(self, eeg: torch.Tensor, generator: Optional[torch.Generator] = None
               ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """EEG fed to BASEN plus the ConvRS selection vectors (None for other modes)."""
        if self.mode == "none":
            return eeg, None
        if self.mode == "convrs":
            s = self.selector(eeg)
            return convrs_apply(eeg, s), s

        assert isinstance(self.selector, GumbelChannelSelector)
        z = self.selector(eeg, generator)
        if self.mode == "gcs":
            return z, None
        positions = self.selector.test_select().indices if self.placement == "argmax" else None
        if self.residual:
            return resgs_combine(eeg, z, self.residual_weight, self.placement, positions), None
        return pad_channels(z, eeg.shape[-2], self.placement, positions), None

    def forward(self, mixture: torch.Tensor, eeg: torch.Tensor, generator: Optional[torch.Generator] = None
                ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        selected, s = self.select(eeg, generator)
        return self.basen(mixture, selected), s


def build_selector(selector_cfg: Optional[dict]) -> Optional[nn.Module]:
    """Rebuild a selector from the dict its `config()` returned."""
    if not selector_cfg:
        return None
    kind = selector_cfg.get("type")
    if kind == "gcs":
        return GumbelChannelSelector(selector_cfg["q_channels"], selector_cfg["k_neurons"])
    if kind == "convrs":
        return ConvRSelector(selector_cfg["q_channels"], selector_cfg.get("n_blocks", 4),
                             selector_cfg.get("reduced_length", 16), selector_cfg.get("kernel_size", 3))
    raise ValueError(f"Unknown selector type '{kind}'")
