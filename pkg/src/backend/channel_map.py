"""
Channel Maps and Report Figures for the BASEN toolkit
Handles electrode layouts (bundled grid or CSV), channel-selection maps with a
JSON sidecar, and the summary figures: SI-SDRi quartile plot, subset-size
sweep and training-curve comparison.
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from src.backend.errors import DatasetFormatError, SelectionError
from src.backend.evaluation import EvalSummary, duplicate_report
from src.backend.selection import ChannelSubset

logger = logging.getLogger(__name__)

LAYOUT_COLUMNS = ["channel_index", "label", "x", "y"]
GRID_EXTENT = 0.6
MARKER_STYLE = {
    "unselected": {"facecolors": "none", "edgecolors": "0.4"},
    "unique": {"facecolors": "tab:blue", "edgecolors": "tab:blue"},
    "duplicated": {"facecolors": "tab:red", "edgecolors": "tab:red"},
}


@dataclass
class ChannelLayout:
    """2-D unit-disk electrode coordinates keyed by channel index."""

    labels: Dict[int, str]
    coords: Dict[int, Tuple[float, float]]

    @property
    def channels(self) -> List[int]:
        return sorted(self.coords)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(c, self.labels[c], *self.coords[c]) for c in self.channels], columns=LAYOUT_COLUMNS
        )


def grid_layout(q_channels: int, labels: Optional[Sequence[str]] = None) -> ChannelLayout:
    """Square grid centred in the unit disk, row-major from the top left."""
    n = max(1, math.ceil(math.sqrt(q_channels)))
    spacing = 2 * GRID_EXTENT / (n - 1) if n > 1 else 0.0
    coords, names = {}, {}
    for c in range(q_channels):
        row, col = divmod(c, n)
        x = -GRID_EXTENT + spacing * col if n > 1 else 0.0
        y = GRID_EXTENT - spacing * row if n > 1 else 0.0
        coords[c] = (round(x, 6), round(y, 6))
        names[c] = labels[c] if labels is not None else f"Ch{c + 1:03d}"
    return ChannelLayout(names, coords)


def load_layout_csv(path: Union[str, Path]) -> ChannelLayout:
    """Read a `channel_index,label,x,y` layout with x, y in [-1, 1]."""
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise DatasetFormatError(str(path), "layout file not found")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetFormatError(str(path), f"unreadable layout: {e}")
    missing = [c for c in LAYOUT_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetFormatError(str(path), f"missing columns {missing}")
    if frame["channel_index"].duplicated().any():
        raise DatasetFormatError(str(path), "duplicate channel_index values")
    if not frame[["x", "y"]].abs().le(1.0).all().all():
        raise DatasetFormatError(str(path), "coordinates must lie in [-1, 1]")
    return ChannelLayout(
        labels={int(r.channel_index): str(r.label) for r in frame.itertuples()},
        coords={int(r.channel_index): (float(r.x), float(r.y)) for r in frame.itertuples()},
    )


def write_layout_csv(layout: ChannelLayout, path: Union[str, Path]) -> None:
    layout.to_frame().to_csv(path, index=False)


def classify_channels(subset: ChannelSubset, layout: ChannelLayout) -> List[dict]:
    """One record per layout channel with class unselected / unique / duplicated."""
    missing = sorted(set(subset.indices) - set(layout.coords))
    if missing:
        raise SelectionError(f"Layout has no coordinates for channels {missing}")
    report = duplicate_report(subset)
    duplicated = set(report["duplicated"])
    unique = set(report["unique"])
    counts = {c: subset.indices.count(c) for c in set(subset.indices)}
    records = []
    for c in layout.channels:
        kind = "duplicated" if c in duplicated else "unique" if c in unique else "unselected"
        x, y = layout.coords[c]
        records.append({"channel_index": c, "label": layout.labels[c], "x": x, "y": y,
                        "class": kind, "count": counts.get(c, 0)})
    return records


def render_channel_map(subset: ChannelSubset, layout: ChannelLayout, out_path: Union[str, Path],
                       title: Optional[str] = None) -> Tuple[Path, Path]:
    """
    Draw the selection on the layout and write a sidecar JSON next to it.

    Unselected channels are hollow, unique selections filled blue and
    duplicated selections filled red.

    Returns:
        (figure path, sidecar path)
    """
    out_path = Path(out_path)
    os.makedirs(out_path.parent, exist_ok=True)
    records = classify_channels(subset, layout)

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.add_patch(plt.Circle((0, 0), 1.0, fill=False, color="0.6", linewidth=0.8))
    for kind, style in MARKER_STYLE.items():
        points = [r for r in records if r["class"] == kind]
        if points:
            ax.scatter([r["x"] for r in points], [r["y"] for r in points], s=80, linewidths=1.0,
                       label=kind, **style)
    for r in records:
        ax.annotate(r["label"], (r["x"], r["y"]), xytext=(0, -11), textcoords="offset points",
                    ha="center", fontsize=5)
    ax.set_xlim(-1.1, 1.1)
    ax.set_ylim(-1.1, 1.1)
    ax.set_aspect("equal")
    ax.axis("off")
    ax.set_title(title or f"{subset.method}: {len(set(subset.indices))} channels", fontsize=8)
    ax.legend(loc="lower right", fontsize=6, frameon=False)
    fig.savefig(out_path, bbox_inches="tight")
    plt.close(fig)

    sidecar = out_path.with_suffix(".json")
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump({"subset": subset.to_dict(), "channels": records}, f, indent=2, sort_keys=True)
    logger.info("Wrote channel map %s", out_path)
    return out_path, sidecar


def plot_quartiles(summaries: Dict[str, EvalSummary], out_path: Union[str, Path],
                   metric: str = "si_sdri") -> Path:
    """Box plot of a per-example metric, one box per labelled summary, medians on top."""
    out_path = Path(out_path)
    os.makedirs(out_path.parent, exist_ok=True)
    labels = list(summaries)
    data = [summaries[k].frame[metric].dropna().to_numpy() for k in labels]

    fig, ax = plt.subplots(figsize=(1.2 + 1.0 * len(labels), 3))
    ax.boxplot(data, showfliers=False)
    ax.set_xticks(range(1, len(labels) + 1))
    ax.set_xticklabels(labels, fontsize=7)
    for i, values in enumerate(data, start=1):
        if values.size:
            ax.annotate(f"{np.median(values):.2f}", (i, 1.0), xycoords=("data", "axes fraction"),
                        ha="center", va="bottom", fontsize=6)
    ax.set_ylabel(f"{metric} (dB)")
    fig.savefig(out_path, bbox_inches="tight")
    plt.close(fig)
    return out_path


def plot_sweep(sweep: pd.DataFrame, out_path: Union[str, Path], metric: str = "si_sdr") -> Path:
    """Channel count and a metric against the sparsity weight."""
    out_path = Path(out_path)
    os.makedirs(out_path.parent, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(sweep["gamma"], sweep["n_channels"], marker="o", color="tab:blue")
    ax.set_xlabel("gamma")
    ax.set_ylabel("selected channels", color="tab:blue")
    if metric in sweep.columns:
        twin = ax.twinx()
        twin.plot(sweep["gamma"], sweep[metric], marker="s", color="tab:orange")
        twin.set_ylabel(f"{metric} (dB)", color="tab:orange")
    fig.savefig(out_path, bbox_inches="tight")
    plt.close(fig)
    return out_path


def plot_training_curves(histories: Dict[str, dict], out_path: Union[str, Path], stage: Optional[str] = None) -> Path:
    """Validation loss per epoch for several runs; `stage` picks one stage by name."""
    out_path = Path(out_path)
    os.makedirs(out_path.parent, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 3))
    for label, history in histories.items():
        stages = history.get("stages", [])
        if stage is not None:
            stages = [s for s in stages if s["name"] == stage]
        elif stages:
            stages = stages[:1]
        for s in stages:
            ax.plot(range(len(s["val_loss"])), s["val_loss"], marker=".", label=f"{label}: {s['name']}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation loss")
    ax.legend(fontsize=6, frameon=False)
    fig.savefig(out_path, bbox_inches="tight")
    plt.close(fig)
    return out_path
