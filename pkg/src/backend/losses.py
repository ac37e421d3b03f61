"""
Losses and Metrics for the BASEN toolkit
Handles SI-SDR, the selector discretization and sparsity penalties, the
weighted training objective and the pluggable evaluation-metric registry.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, NamedTuple, Union

import numpy as np
import torch

from src.backend.errors import DegenerateSourceError, ShapeMismatchError
from src.backend.signal_prep import AudioWaveform

logger = logging.getLogger(__name__)

EPS = 1e-8
GAMMA_GRID = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35]

ArrayLike = Union[AudioWaveform, np.ndarray, torch.Tensor, List[float]]
MetricFn = Callable[[np.ndarray, np.ndarray, float], float]


@dataclass
class LossWeights:
    """Weights of the training objective and constants of the selector penalties."""
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.0
    k1: float = 100.0
    k2: float = 0.25
    b: float = 0.25
    q: float = 0.5
    aux_interferer: bool = False

    def validate(self) -> List[str]:
        """Return the names of invalid fields."""
        bad = [name for name, value in asdict(self).items()
               if name != "aux_interferer" and (not np.isfinite(value) or value < 0)]
        if not 0.0 <= self.q <= 1.0 and "q" not in bad:
            bad.append("q")
        return bad


class LossBreakdown(NamedTuple):
    si_sdr_db: Union[float, torch.Tensor]
    l_d: Union[float, torch.Tensor]
    l_reg: Union[float, torch.Tensor]
    total: Union[float, torch.Tensor]

    def as_dict(self) -> Dict[str, float]:
        """Plain-float view for metric logging."""
        return {key: float(value) for key, value in self._asdict().items()}


def si_sdr_batch(est: torch.Tensor, ref: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """
    Scale-invariant SDR along the last axis.

    Args:
        est: estimates, (..., L)
        ref: references, (..., L)
        eps: stabilizer added to both norms

    Returns:
        SI-SDR in dB, shape (...)
    """
    if est.shape != ref.shape:
        raise ShapeMismatchError(f"SI-SDR operands differ in shape: {tuple(est.shape)} vs {tuple(ref.shape)}")
    ref_energy = torch.sum(ref * ref, dim=-1, keepdim=True)
    if bool(torch.any(ref_energy == 0)):
        raise DegenerateSourceError("SI-SDR reference has zero norm")

    scale = torch.sum(est * ref, dim=-1, keepdim=True) / (ref_energy + eps)
    target = scale * ref
    residual = target - est
    target_norm = torch.linalg.vector_norm(target, dim=-1)
    residual_norm = torch.linalg.vector_norm(residual, dim=-1)
    return 20 * torch.log10((target_norm + eps) / (residual_norm + eps))


def _as_float64(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, AudioWaveform):
        x = x.samples
    if isinstance(x, torch.Tensor):
        return x.detach().to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def si_sdr(est: ArrayLike, ref: ArrayLike, eps: float = EPS) -> float:
    """SI-SDR of one estimate against one reference, in float64."""
    est_t, ref_t = _as_float64(est), _as_float64(ref)
    if est_t.ndim != 1 or ref_t.ndim != 1:
        raise ShapeMismatchError("si_sdr expects 1-D signals; use si_sdr_batch for batches")
    return float(si_sdr_batch(est_t, ref_t, eps))


def si_sdr_improvement(est: ArrayLike, ref: ArrayLike, mixture: ArrayLike) -> float:
    """SI-SDR gain of the estimate over the unprocessed mixture."""
    return si_sdr(est, ref) - si_sdr(mixture, ref)


def discretization_loss(S: torch.Tensor, k1: float = 100.0, b: float = 0.25, q: float = 0.5) -> torch.Tensor:
    """
    Penalty pushing selection entries away from the coin-toss value q.

    Zero when every entry is binary, k1*b when every entry equals q.
    """
    S = torch.as_tensor(S)
    if S.ndim == 1:
        S = S.unsqueeze(0)
    batch, q_channels = S.shape
    d = (S - q).reshape(-1)
    return k1 * (-(d @ d) / (q_channels * batch) + b)


def sparsity_loss(S: torch.Tensor, k2: float = 0.25) -> torch.Tensor:
    """Batch mean of the squared L2 norm of each selection vector, scaled by k2."""
    S = torch.as_tensor(S)
    if S.ndim == 1:
        S = S.unsqueeze(0)
    return k2 * torch.mean(torch.sum(S * S, dim=-1))


def total_loss(si_sdr_db, l_d, l_reg, weights: LossWeights) -> LossBreakdown:
    """Combine the objective terms; higher SI-SDR lowers the total."""
    total = -weights.alpha * si_sdr_db + weights.beta * l_d + weights.gamma * l_reg
    return LossBreakdown(si_sdr_db=si_sdr_db, l_d=l_d, l_reg=l_reg, total=total)


_METRICS: Dict[str, MetricFn] = {}


def register_metric(name: str, fn: MetricFn) -> None:
    """Attach an external metric (for example PESQ or STOI) taking (est, ref, fs)."""
    if not callable(fn):
        raise TypeError(f"Metric '{name}' is not callable")
    if name in ("si_sdr", "si_sdr_mixture", "si_sdri"):
        raise ValueError(f"Metric name '{name}' is reserved")
    if name in _METRICS:
        logger.warning("Replacing registered metric '%s'", name)
    _METRICS[name] = fn


def unregister_metric(name: str) -> None:
    _METRICS.pop(name, None)


def registered_metrics() -> Dict[str, MetricFn]:
    return dict(_METRICS)


def compute_registered_metrics(est: np.ndarray, ref: np.ndarray, fs: float) -> Dict[str, float]:
    """Run every registered metric; a failing adapter is logged and reported as NaN."""
    scores = {}
    for name, fn in _METRICS.items():
        try:
            scores[name] = float(fn(est, ref, fs))
        except Exception as e:
            logger.warning("Metric '%s' failed: %s", name, e)
            scores[name] = float("nan")
    return scores
