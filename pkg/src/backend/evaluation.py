"""
Evaluation for the BASEN toolkit
Handles per-example SI-SDR scoring, summary statistics per dataset and per
subject, duplicate diagnostics and summary export (JSON and spreadsheet).
"""

import json
import logging
import os
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from src.backend.basen import SparseBasen
from src.backend.checkpoint_manager import load_checkpoint
from src.backend.corpus import MixtureExample, segment_example
from src.backend.errors import SelectionError, ShapeMismatchError
from src.backend.losses import compute_registered_metrics, si_sdr
from src.backend.selection import ChannelSubset

logger = logging.getLogger(__name__)

CORE_METRICS = ["si_sdr", "si_sdr_mixture", "si_sdri"]
KEY_COLUMNS = ("example_id", "subject_id", "duration_s")
STATS = ["mean", "median", "q1", "q3", "min", "max"]


def _describe(values: pd.Series) -> Dict[str, float]:
    values = values.dropna()
    if values.empty:
        return {stat: float("nan") for stat in STATS}
    return {
        "mean": float(values.mean()),
        "median": float(values.median()),
        "q1": float(values.quantile(0.25)),
        "q3": float(values.quantile(0.75)),
        "min": float(values.min()),
        "max": float(values.max()),
    }


class EvalSummary:
    """Per-example scores with dataset and per-subject aggregates."""

    def __init__(self, frame: pd.DataFrame):
        self.frame = frame.sort_values("example_id").reset_index(drop=True)

    @property
    def n_examples(self) -> int:
        return len(self.frame)

    @property
    def metrics(self) -> List[str]:
        return [c for c in self.frame.columns if c not in KEY_COLUMNS]

    def aggregates(self) -> Dict[str, Dict[str, float]]:
        return {metric: _describe(self.frame[metric]) for metric in self.metrics}

    def per_subject(self) -> Dict[str, Dict[str, Dict[str, float]]]:
        return {
            str(subject): {metric: _describe(group[metric]) for metric in self.metrics}
            for subject, group in self.frame.groupby("subject_id", sort=True)
        }

    def to_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "aggregates": self.aggregates(),
            "per_subject": self.per_subject(),
            "examples": self.frame.to_dict(orient="records"),
        }

    def to_json(self, path: Union[str, Path]) -> None:
        os.makedirs(Path(path).parent, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def to_excel(self, path: Union[str, Path]) -> None:
        """Write examples, aggregates and per-subject sheets."""
        try:
            aggregates = pd.DataFrame(self.aggregates()).T.reset_index(names="metric")
            rows = [
                {"subject_id": subject, "metric": metric, **stats}
                for subject, by_metric in self.per_subject().items()
                for metric, stats in by_metric.items()
            ]
            with pd.ExcelWriter(path, engine="openpyxl") as writer:
                self.frame.to_excel(writer, sheet_name="examples", index=False)
                aggregates.to_excel(writer, sheet_name="aggregates", index=False)
                pd.DataFrame(rows).to_excel(writer, sheet_name="per_subject", index=False)
        except Exception as e:
            raise Exception(f"Failed to export evaluation summary: {str(e)}")

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "EvalSummary":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls(pd.DataFrame(data["examples"]))


def _score(example: MixtureExample, estimate: np.ndarray) -> dict:
    target = example.target.samples
    if estimate.shape != target.shape:
        raise ShapeMismatchError(
            f"{example.example_id}: estimate has {estimate.shape[0]} samples, target {target.shape[0]}"
        )
    score = si_sdr(estimate, target)
    baseline = si_sdr(example.mixture.samples, target)
    row = {
        "example_id": example.example_id,
        "subject_id": example.subject_id,
        "duration_s": example.mixture.duration_s,
        "si_sdr": score,
        "si_sdr_mixture": baseline,
        "si_sdri": score - baseline,
    }
    row.update(compute_registered_metrics(estimate, target, example.target.fs))
    return row


def evaluate_estimates(examples: Sequence[MixtureExample], estimates: Sequence[np.ndarray]) -> EvalSummary:
    """Score precomputed target estimates, one per example."""
    if len(examples) != len(estimates):
        raise ShapeMismatchError(f"{len(estimates)} estimates for {len(examples)} examples")
    rows = [_score(ex, np.asarray(est, dtype=np.float64)) for ex, est in zip(examples, estimates)]
    if not rows:
        return EvalSummary(pd.DataFrame(columns=[*KEY_COLUMNS, *CORE_METRICS]))
    return EvalSummary(pd.DataFrame(rows))


def channel_mask(subset: Optional[ChannelSubset], q_channels: int) -> np.ndarray:
    """1 for kept channels, 0 for zeroed ones; no subset keeps everything."""
    if subset is None:
        return np.ones(q_channels, dtype=np.float32)
    out_of_range = [i for i in subset.indices if i < 0 or i >= q_channels]
    if out_of_range:
        raise SelectionError(f"Subset indices {out_of_range} out of range for {q_channels} channels")
    mask = np.zeros(q_channels, dtype=np.float32)
    mask[subset.unique_indices] = 1.0
    return mask


@torch.no_grad()
def estimate_targets(model: SparseBasen, examples: Sequence[MixtureExample],
                     subset: Optional[ChannelSubset] = None,
                     device: Union[str, torch.device] = "cpu") -> List[np.ndarray]:
    """Full-length target estimates; channels outside the subset are zeroed first."""
    model.eval()
    estimates = []
    for example in examples:
        mask = channel_mask(subset, example.eeg.n_channels)
        mixture = torch.as_tensor(example.mixture.samples, dtype=torch.float32, device=device).unsqueeze(0)
        eeg = torch.as_tensor(example.eeg.data * mask[:, None], dtype=torch.float32, device=device).unsqueeze(0)
        output, _ = model(mixture, eeg)
        estimates.append(output[0, 0].cpu().numpy().astype(np.float64))
    return estimates


def evaluate(model: Union[SparseBasen, str, Path], examples: Sequence[MixtureExample],
             subset: Optional[ChannelSubset] = None,
             device: Union[str, torch.device] = "cpu") -> EvalSummary:
    """
    Score a model (or checkpoint path) on a dataset.

    Args:
        model: trained network or checkpoint file
        examples: examples to score, any length
        subset: optional channel subset; other channels are zeroed
        device: inference device

    Returns:
        EvalSummary with SI-SDR, mixture SI-SDR and SI-SDRi per example
    """
    if isinstance(model, (str, Path)):
        model, _ = load_checkpoint(model, device=device)
    model.to(device)
    estimates = estimate_targets(model, examples, subset, device)
    summary = evaluate_estimates(examples, estimates)
    logger.info("Evaluated %d examples: median SI-SDRi %.2f dB", summary.n_examples,
                summary.aggregates()["si_sdri"]["median"] if summary.n_examples else float("nan"))
    return summary


def long_segments(examples: Sequence[MixtureExample], seg_len_s: float) -> List[MixtureExample]:
    """Cut examples longer than seg_len_s into segments; shorter ones stay whole."""
    out = []
    for example in examples:
        if example.mixture.duration_s > seg_len_s:
            out.extend(segment_example(example, seg_len_s))
        else:
            out.append(example)
    return out


def duplicate_report(subset: Union[ChannelSubset, Sequence[int]]) -> Dict[str, List[int]]:
    """Partition selected channels by multiplicity."""
    indices = subset.indices if isinstance(subset, ChannelSubset) else list(subset)
    counts = Counter(int(i) for i in indices)
    return {
        "unique": sorted(c for c, n in counts.items() if n == 1),
        "duplicated": sorted(c for c, n in counts.items() if n > 1),
    }
