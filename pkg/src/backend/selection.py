"""
Channel Selection for the BASEN toolkit
Handles the Gumbel channel selector (GCS), its residual wrapper (ResGS) and
the convolutional regularization selector (ConvRS), plus the ChannelSubset
artifact they produce.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.backend.errors import SelectionError, ShapeMismatchError, SignalTooShortError
from src.backend.signal_prep import EEGTrial

logger = logging.getLogger(__name__)

TrialLike = Union[EEGTrial, torch.Tensor, np.ndarray]
PLACEMENTS = ("leading", "argmax")


@dataclass
class ChannelSubset:
    """Ordered channel selection; duplicates are kept and counted."""

    method: str
    indices: List[int]
    gamma_or_K: Optional[float] = None
    mean_probabilities: List[float] = field(default_factory=list)
    duplicate_count: int = field(init=False)

    def __post_init__(self):
        self.indices = [int(i) for i in self.indices]
        self.mean_probabilities = [float(p) for p in self.mean_probabilities]
        self.duplicate_count = len(self.indices) - len(set(self.indices))

    @property
    def unique_indices(self) -> List[int]:
        return sorted(set(self.indices))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "gamma_or_K": self.gamma_or_K,
            "indices": self.indices,
            "duplicate_count": self.duplicate_count,
            "mean_probabilities": self.mean_probabilities,
        }

    def to_json(self, path: Union[str, Path]) -> None:
        """Write the subset with sorted keys so identical runs give identical bytes."""
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelSubset":
        try:
            return cls(
                method=data["method"],
                indices=data["indices"],
                gamma_or_K=data.get("gamma_or_K"),
                mean_probabilities=data.get("mean_probabilities", []),
            )
        except (KeyError, TypeError) as e:
            raise SelectionError(f"Malformed channel subset: {e}")

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "ChannelSubset":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise SelectionError(f"Failed to read channel subset {path}: {e}")
        return cls.from_dict(data)


def _as_tensor(e: TrialLike) -> torch.Tensor:
    if isinstance(e, EEGTrial):
        return torch.as_tensor(e.data)
    return torch.as_tensor(e)


def _like_input(original: TrialLike, result: torch.Tensor, label_prefix: Optional[str] = None) -> TrialLike:
    """Return `result` in the container type of `original`."""
    if isinstance(original, EEGTrial):
        data = result.detach().cpu().numpy()
        labels = None
        if label_prefix is not None:
            labels = [f"{label_prefix}{k + 1:02d}" for k in range(data.shape[0])]
        elif data.shape[0] == original.n_channels:
            labels = list(original.channel_labels)
        return EEGTrial(data, original.fs, channel_labels=labels, stage=original.stage)
    if isinstance(original, np.ndarray):
        return result.detach().cpu().numpy()
    return result


# ---------------------------------------------------------------- GCS

def sample_gumbel(shape, generator: Optional[torch.Generator] = None,
                  dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    """Standard Gumbel noise drawn through an explicit generator."""
    u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    tiny = torch.finfo(dtype).tiny
    return -torch.log(-torch.log(u.clamp(min=tiny, max=1.0 - 1e-7)))


def gumbel_sample_weights(
    log_alpha: torch.Tensor,
    tau: float,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Relaxed one-hot weights, one row per selection neuron.

    Args:
        log_alpha: K x Q learnable log-scores
        tau: temperature, must be positive
        generator: RNG handle for the Gumbel noise
        noise: fixed noise of shape K x Q (overrides sampling)

    Returns:
        K x Q matrix whose rows sum to one
    """
    if not tau > 0:
        raise ValueError(f"Temperature must be positive, got {tau}")
    if noise is None:
        noise = sample_gumbel(log_alpha.shape, generator, log_alpha.dtype, log_alpha.device)
    return torch.softmax((log_alpha + noise) / tau, dim=-1)


def gcs_apply(e: TrialLike, W: torch.Tensor) -> TrialLike:
    """Each output channel k is the w_k-weighted sum of the input channels."""
    x = _as_tensor(e)
    W = torch.as_tensor(W).to(x.dtype)
    if W.ndim != 2 or x.shape[-2] != W.shape[1]:
        raise ShapeMismatchError(f"Selection weights {tuple(W.shape)} do not match {x.shape[-2]} input channels")
    z = torch.einsum("kq,...qt->...kt", W, x)
    return _like_input(e, z, label_prefix="Sel")


def gcs_probabilities(log_alpha: torch.Tensor) -> torch.Tensor:
    """Per-neuron channel probabilities alpha / sum(alpha), computed in log space."""
    return torch.softmax(torch.as_tensor(log_alpha), dim=-1)


def gcs_test_select(log_alpha: torch.Tensor, method: str = "resgs") -> ChannelSubset:
    """Hard selection: each neuron takes its most probable channel, lowest index on ties."""
    scores = torch.as_tensor(log_alpha).detach().cpu().numpy()
    indices = [int(np.argmax(row)) for row in scores]
    probabilities = gcs_probabilities(torch.as_tensor(log_alpha)).detach().cpu().numpy()
    peak = [float(probabilities[k, idx]) for k, idx in enumerate(indices)]
    return ChannelSubset(method=method, indices=indices, gamma_or_K=scores.shape[0], mean_probabilities=peak)


class GumbelChannelSelector(nn.Module):
    """K selection neurons, each softly picking one of Q channels.

    In training mode channel weights are Gumbel-softmax samples at the
    current temperature; with `hard` set, or in eval mode, each neuron
    passes its argmax channel through unchanged.
    """

    def __init__(self, q_channels: int, k_neurons: int):
        super().__init__()
        if k_neurons < 1 or q_channels < 1:
            raise SelectionError(f"Need K >= 1 and Q >= 1, got K={k_neurons}, Q={q_channels}")
        if k_neurons > q_channels:
            raise SelectionError(f"K={k_neurons} selection neurons exceed Q={q_channels} channels")
        self.q_channels = q_channels
        self.k_neurons = k_neurons
        self.log_alpha = nn.Parameter(torch.zeros(k_neurons, q_channels))
        self.tau = 10.0
        self.hard = False

    def config(self) -> dict:
        return {"type": "gcs", "q_channels": self.q_channels, "k_neurons": self.k_neurons}

    def probabilities(self) -> torch.Tensor:
        return gcs_probabilities(self.log_alpha)

    def hard_weights(self) -> torch.Tensor:
        subset = gcs_test_select(self.log_alpha)
        W = torch.zeros_like(self.log_alpha)
        W[torch.arange(self.k_neurons), torch.tensor(subset.indices)] = 1.0
        return W

    def test_select(self, method: str = "resgs") -> ChannelSubset:
        return gcs_test_select(self.log_alpha, method)

    def weights(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if self.hard or not self.training:
            return self.hard_weights()
        return gumbel_sample_weights(self.log_alpha, self.tau, generator)

    def forward(self, e: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return gcs_apply(e, self.weights(generator))


# ---------------------------------------------------------------- ResGS

def pad_channels(
    z: torch.Tensor,
    q_channels: int,
    placement: str = "leading",
    positions: Optional[Sequence[int]] = None,
) -> torch.Tensor:
    """Embed K selected channels into a Q-channel zero tensor."""
    k = z.shape[-2]
    if k > q_channels:
        raise SelectionError(f"Cannot pad {k} channels into {q_channels}")
    if placement == "leading":
        return F.pad(z, (0, 0, 0, q_channels - k))
    if placement == "argmax":
        if positions is None or len(positions) != k:
            raise SelectionError("Argmax placement needs one target position per selected channel")
        if any(p < 0 or p >= q_channels for p in positions):
            raise SelectionError(f"Placement positions {list(positions)} out of range for Q={q_channels}")
        out = z.new_zeros(*z.shape[:-2], q_channels, z.shape[-1])
        index = torch.as_tensor(list(positions), device=z.device)
        return out.index_add(-2, index, z)
    raise SelectionError(f"Unknown placement '{placement}', expected one of {PLACEMENTS}")


def resgs_combine(
    e: TrialLike,
    z: TrialLike,
    a: float = 0.1,
    placement: str = "leading",
    positions: Optional[Sequence[int]] = None,
) -> TrialLike:
    """Blend the raw EEG with the padded selection: (1 - a) * e + a * Padding(z)."""
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"Residual weight must lie in [0, 1], got {a}")
    x = _as_tensor(e)
    zt = _as_tensor(z).to(x.dtype)
    if zt.shape[-1] != x.shape[-1]:
        raise ShapeMismatchError(f"Selected trial has {zt.shape[-1]} samples, raw trial {x.shape[-1]}")
    combined = (1.0 - a) * x + a * pad_channels(zt, x.shape[-2], placement, positions)
    return _like_input(e, combined)


# ---------------------------------------------------------------- ConvRS

class _SelectorBlock(nn.Module):
    """Depthwise-separable conv keeping Q channels, then a halving max-pool."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.depthwise = nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2, groups=channels)
        self.pointwise = nn.Conv1d(channels, channels, 1)
        self.activation = nn.PReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.activation(self.pointwise(self.depthwise(x)))
        if x.shape[-1] % 2:
            x = F.pad(x, (0, 1))
        return F.max_pool1d(x, kernel_size=2, stride=2)


class ConvRSelector(nn.Module):
    """Input-conditioned soft channel mask s in [0, 1]^Q."""

    def __init__(self, q_channels: int, n_blocks: int = 4, reduced_length: int = 16, kernel_size: int = 3):
        super().__init__()
        if n_blocks < 1 or reduced_length < 1:
            raise ValueError(f"Need n_blocks >= 1 and reduced_length >= 1, got {n_blocks}, {reduced_length}")
        self.q_channels = q_channels
        self.n_blocks = n_blocks
        self.reduced_length = reduced_length
        self.kernel_size = kernel_size
        self.blocks = nn.Sequential(*[_SelectorBlock(q_channels, kernel_size) for _ in range(n_blocks)])
        self.head = nn.Linear(q_channels * reduced_length, q_channels)
        self.head_activation = nn.PReLU()
        nn.init.xavier_uniform_(self.head.weight, gain=0.1)

    def config(self) -> dict:
        return {
            "type": "convrs",
            "q_channels": self.q_channels,
            "n_blocks": self.n_blocks,
            "reduced_length": self.reduced_length,
            "kernel_size": self.kernel_size,
        }

    @property
    def min_length(self) -> int:
        return 2 ** self.n_blocks

    def reduce(self, e: torch.Tensor) -> torch.Tensor:
        """Temporal feature map before the linear head, B x Q x reduced_length."""
        if e.shape[-1] < self.min_length:
            raise SignalTooShortError(
                f"ConvRS needs at least {self.min_length} samples, got {e.shape[-1]}"
            )
        if e.shape[-2] != self.q_channels:
            raise ShapeMismatchError(f"ConvRS built for {self.q_channels} channels, got {e.shape[-2]}")
        h = self.blocks(e)
        if h.shape[-1] != self.reduced_length:
            h = F.adaptive_avg_pool1d(h, self.reduced_length)
        return h

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        squeeze = e.ndim == 2
        if squeeze:
            e = e.unsqueeze(0)
        h = self.reduce(e).flatten(start_dim=1)
        s = torch.sigmoid(self.head_activation(self.head(h)))
        return s.squeeze(0) if squeeze else s


def convrs_forward(selector: ConvRSelector, e: TrialLike) -> torch.Tensor:
    """Selection vector for one trial (Q,) or a batch (B, Q)."""
    x = _as_tensor(e).to(next(selector.parameters()).dtype)
    return selector(x)


def convrs_apply(e: TrialLike, s: torch.Tensor) -> TrialLike:
    """Scale channel c by s_c at every time step."""
    x = _as_tensor(e)
    s = torch.as_tensor(s).to(x.dtype)
    if s.shape[-1] != x.shape[-2]:
        raise ShapeMismatchError(f"Selection vector has {s.shape[-1]} entries for {x.shape[-2]} channels")
    return _like_input(e, x * s.unsqueeze(-1))


def aggregate_selection(
    vectors: Sequence[Union[np.ndarray, torch.Tensor, Sequence[float]]],
    threshold: float = 0.5,
    gamma: Optional[float] = None,
    method: str = "convrs",
) -> ChannelSubset:
    """Channels whose mean selection value reaches the threshold (inclusive)."""
    if len(vectors) == 0:
        raise SelectionError("Cannot aggregate an empty list of selection vectors")
    stacked = np.stack([
        v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)
        for v in vectors
    ]).astype(np.float64)
    stacked = stacked.reshape(-1, stacked.shape[-1])
    mean = stacked.mean(axis=0)
    indices = [int(c) for c in np.flatnonzero(mean >= threshold)]
    return ChannelSubset(method=method, indices=indices, gamma_or_K=gamma, mean_probabilities=mean.tolist())
