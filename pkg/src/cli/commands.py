"""
CLI Commands for the BASEN toolkit
Handles the subcommands that bind the backend into reproducible runs:
synth, preprocess, train, select, eval and report. Every command returns a
JSON-compatible dict describing the files it wrote.
"""

import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from src.backend.channel_map import (
    grid_layout,
    load_layout_csv,
    plot_quartiles,
    plot_sweep,
    plot_training_curves,
    render_channel_map,
)
from src.backend.checkpoint_manager import load_checkpoint
from src.backend.config_manager import ConfigManager, RunConfig, default_run_root
from src.backend.corpus import MixtureExample, segment_example, synthesize
from src.backend.dataset_handler import read_dataset, split_examples, write_dataset
from src.backend.errors import DatasetFormatError, SelectionError
from src.backend.evaluation import EvalSummary, duplicate_report, evaluate, long_segments
from src.backend.selection import ChannelSubset, ConvRSelector, GumbelChannelSelector, aggregate_selection
from src.backend.signal_prep import BandSpec, Stage, compute_mua, filter_trial
from src.backend.trainer import (
    collect_selection_vectors,
    gamma_tag,
    train_basen,
    train_convrs_progressive,
    train_gcs,
    train_resgs,
)

logger = logging.getLogger(__name__)

METHODS = ("basen", "resgs", "convrs", "gcs")
STAGE_PREFERENCE = (Stage.MUA, Stage.FILTERED, Stage.RAW)
SPLIT_PARTS = ("train", "val", "test")
TRIAL_SPLIT_FILE = "trial_split.json"


def _write_json(path: Path, data: dict) -> Path:
    os.makedirs(path.parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _read_json(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetFormatError(str(path), "file not found")
    except json.JSONDecodeError as e:
        raise DatasetFormatError(str(path), f"malformed JSON: {e}")


def resolve_run_dir(cfg: RunConfig, name: str) -> Path:
    """paths.run_dir when set, otherwise <run root>/<name>-seed<seed>."""
    if cfg.paths.run_dir:
        return Path(cfg.paths.run_dir)
    return default_run_root() / f"{name}-seed{cfg.seed}"


def default_dataset_dir(cfg: RunConfig) -> Path:
    """Most processed stage directory present under paths.data_dir."""
    data_dir = Path(cfg.paths.data_dir)
    for stage in STAGE_PREFERENCE:
        if (data_dir / stage.value).is_dir():
            return data_dir / stage.value
    raise DatasetFormatError(str(data_dir), "no dataset stage directory (mua, filtered or raw) found")


def cmd_synth(manager: ConfigManager, cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> dict:
    """Generate the synthetic corpus into <data_dir>/raw with its identifiability report."""
    out_dir = Path(out_dir) if out_dir else Path(cfg.paths.data_dir) / Stage.RAW.value
    examples, report = synthesize(cfg.synth)
    write_dataset(examples, out_dir)
    manager.snapshot(out_dir)
    result = {"dataset": str(out_dir), "n_examples": len(examples)}
    if report is not None:
        result["identifiability"] = str(_write_json(out_dir / "identifiability.json", {
            "mse_informative": report.mse_informative,
            "mse_random": report.mse_random,
            "ratio": report.ratio,
            "random_subset": list(report.random_subset),
            "passed": report.passed,
        }))
    return result


def preprocess_example(example: MixtureExample, cfg: RunConfig,
                       seg_len_s: Optional[float] = None) -> List[MixtureExample]:
    """
    Filter, optionally MUA-transform, then segment one trial.

    seg_len_s defaults to preprocess.seg_len_s. A trial no longer than
    seg_len_s is kept whole.
    """
    pre = cfg.preprocess
    seg_len_s = pre.seg_len_s if seg_len_s is None else seg_len_s
    trial = filter_trial(example.eeg, BandSpec(pre.filter_lo_hz, pre.filter_hi_hz, pre.filter_order))
    if pre.compute_mua:
        trial = compute_mua(trial, pre.a_gamma, pre.a_delta)
    filtered = replace(example, eeg=trial)
    if filtered.mixture.duration_s <= seg_len_s:
        return [filtered]
    return segment_example(filtered, seg_len_s, pre.hop_s)


def _split_ids(examples: Sequence[MixtureExample]) -> List[str]:
    return [ex.example_id for ex in examples]


def cmd_preprocess(manager: ConfigManager, cfg: RunConfig, in_dir: Optional[Union[str, Path]] = None,
                   out_dir: Optional[Union[str, Path]] = None) -> dict:
    """
    Raw dataset -> new stage directory (<data_dir>/mua or <data_dir>/filtered).

    Whole trials are split into train/validation/test first. Train and
    validation trials are cut into preprocess.seg_len_s segments, test trials
    into evaluation.test_seg_len_s segments. The assignment is written to
    <out_dir>/trial_split.json and reused by cmd_train.
    """
    in_dir = Path(in_dir) if in_dir else Path(cfg.paths.data_dir) / Stage.RAW.value
    stage = Stage.MUA if cfg.preprocess.compute_mua else Stage.FILTERED
    out_dir = Path(out_dir) if out_dir else Path(cfg.paths.data_dir) / stage.value
    if out_dir.resolve() == in_dir.resolve():
        raise DatasetFormatError(str(out_dir), "preprocessing output must differ from its input")

    ev = cfg.evaluation
    trials = dict(zip(SPLIT_PARTS, split_examples(read_dataset(in_dir), ev.val_fraction, ev.test_fraction,
                                                   cfg.seed)))
    processed: List[MixtureExample] = []
    parts: Dict[str, List[str]] = {}
    degenerate = {}
    for part in SPLIT_PARTS:
        seg_len_s = ev.test_seg_len_s if part == "test" else cfg.preprocess.seg_len_s
        parts[part] = []
        for example in trials[part]:
            segments = preprocess_example(example, cfg, seg_len_s)
            if segments and segments[0].eeg.degenerate_channels:
                degenerate[example.example_id] = list(segments[0].eeg.degenerate_channels)
            parts[part].extend(_split_ids(segments))
            processed.extend(segments)
    write_dataset(processed, out_dir)
    _write_json(out_dir / TRIAL_SPLIT_FILE, {
        "seed": cfg.seed,
        "seg_len_s": cfg.preprocess.seg_len_s,
        "test_seg_len_s": ev.test_seg_len_s,
        "trials": {part: _split_ids(trials[part]) for part in SPLIT_PARTS},
        **parts,
    })
    manager.snapshot(out_dir)
    short = [ex.example_id for ex in trials["test"] if ex.mixture.duration_s < ev.test_seg_len_s]
    if short:
        logger.warning("%d test trials are shorter than %.1f s and are evaluated whole",
                       len(short), ev.test_seg_len_s)
    if degenerate:
        logger.warning("%d examples have channels without a delta phase", len(degenerate))
    return {"dataset": str(out_dir), "stage": stage.value, "n_examples": len(processed),
            "split": {part: len(ids) for part, ids in parts.items()}, "degenerate": degenerate}


def recorded_split(dataset_dir: Union[str, Path], examples: Sequence[MixtureExample]
                   ) -> Optional[Tuple[List[MixtureExample], ...]]:
    """Train/validation/test examples of the trial split stored with a dataset, if any."""
    path = Path(dataset_dir) / TRIAL_SPLIT_FILE
    if not path.is_file():
        return None
    split = _read_json(path)
    by_id = {ex.example_id: ex for ex in examples}
    missing = [i for part in SPLIT_PARTS for i in split.get(part, []) if i not in by_id]
    if missing:
        raise DatasetFormatError(str(path), f"unknown example ids {missing[:5]}")
    return tuple([by_id[i] for i in split.get(part, [])] for part in SPLIT_PARTS)


def load_split(run_dir: Union[str, Path], part: str) -> List[MixtureExample]:
    """Examples of one split part ('train', 'val' or 'test') recorded by cmd_train."""
    split = _read_json(Path(run_dir) / "split.json")
    wanted = set(split[part])
    return [ex for ex in read_dataset(split["dataset"]) if ex.example_id in wanted]


def cmd_train(manager: ConfigManager, cfg: RunConfig, method: str,
              dataset_dir: Optional[Union[str, Path]] = None,
              pretrained: Optional[Union[str, Path]] = None, quiet: bool = False) -> dict:
    """
    Split the dataset and dispatch to a training pipeline.

    Args:
        manager: configuration owner, snapshotted into the run directory
        cfg: validated run configuration
        method: basen, resgs, convrs or gcs
        dataset_dir: dataset to train on (most processed stage by default)
        pretrained: BASEN checkpoint for ResGS
        quiet: disable progress bars

    Returns:
        Paths of the run directory, final checkpoint and subset
    """
    if method not in METHODS:
        raise ValueError(f"Unknown method '{method}', expected one of {METHODS}")
    dataset_dir = Path(dataset_dir) if dataset_dir else default_dataset_dir(cfg)
    run_dir = resolve_run_dir(cfg, method)
    os.makedirs(run_dir, exist_ok=True)
    manager.snapshot(run_dir)

    examples = read_dataset(dataset_dir)
    ev = cfg.evaluation
    split = recorded_split(dataset_dir, examples)
    if split is None:
        train, val, test = split_examples(examples, ev.val_fraction, ev.test_fraction, cfg.seed)
    else:
        train, val, test = split
    _write_json(run_dir / "split.json", {
        "dataset": str(dataset_dir),
        "method": method,
        "trial_split": split is not None,
        "train": _split_ids(train),
        "val": _split_ids(val),
        "test": _split_ids(test),
    })
    logger.info("Training %s on %d examples (%d validation, %d test)", method, len(train), len(val), len(test))

    if method == "basen":
        outcome = train_basen(train, val, cfg, run_dir, quiet)
    elif method == "gcs":
        outcome = train_gcs(train, val, cfg, run_dir, quiet)
    elif method == "resgs":
        outcome = train_resgs(train, val, cfg, run_dir, pretrained, quiet)
    else:
        outcomes = train_convrs_progressive(train, val, cfg, run_dir, quiet=quiet)
        outcome = outcomes[max(outcomes)]

    result = {"run_dir": str(run_dir), "method": method, "checkpoint": str(outcome.checkpoint)}
    if outcome.subset is not None:
        result["subset"] = str(run_dir / "subset.json")
        result["indices"] = outcome.subset.indices
    return result


def _history(run_dir: Path) -> dict:
    return _read_json(run_dir / "history.json")


def final_checkpoint(run_dir: Union[str, Path]) -> Path:
    """Checkpoint of the last stage of a finished run."""
    stages = _history(Path(run_dir)).get("stages", [])
    if not stages or not stages[-1].get("checkpoint"):
        raise DatasetFormatError(str(Path(run_dir) / "history.json"), "no finished stage recorded")
    return Path(stages[-1]["checkpoint"])


def cmd_select(run_dir: Union[str, Path], device: str = "cpu") -> dict:
    """
    Recompute the ChannelSubset of a finished run from its final checkpoint.

    GCS-based runs take the argmax of the stored selection logits; ConvRS runs
    aggregate selection vectors over the run's validation split.
    """
    run_dir = Path(run_dir)
    history = _history(run_dir)
    model, checkpoint = load_checkpoint(final_checkpoint(run_dir), device=device)
    method = checkpoint["method"]

    if isinstance(model.selector, GumbelChannelSelector):
        subset = model.selector.test_select(method=method)
    elif isinstance(model.selector, ConvRSelector):
        cfg = ConfigManager(str(run_dir / "config.json")).get_run_config()
        examples = load_split(run_dir, "val") or load_split(run_dir, "train")
        gamma = history["sweep"][-1]["gamma"] if history.get("sweep") else None
        vectors = collect_selection_vectors(model, examples, device)
        subset = aggregate_selection(vectors, cfg.convrs.threshold, gamma=gamma)
    else:
        raise SelectionError(f"Run {run_dir} ({method}) has no channel selector")

    subset.to_json(run_dir / "subset.json")
    return {"subset": str(run_dir / "subset.json"), **subset.to_dict(), **duplicate_report(subset)}


def cmd_eval(checkpoint: Union[str, Path], dataset_dir: Union[str, Path],
             subset_path: Optional[Union[str, Path]] = None, out_path: Optional[Union[str, Path]] = None,
             seg_len_s: Optional[float] = None, write_xlsx: bool = True, device: str = "cpu") -> dict:
    """Score a checkpoint on a dataset and write the EvalSummary JSON (plus .xlsx)."""
    examples = read_dataset(dataset_dir)
    if seg_len_s is not None:
        examples = long_segments(examples, seg_len_s)
    subset = ChannelSubset.from_json(subset_path) if subset_path else None
    summary = evaluate(checkpoint, examples, subset, device)
    out_path = Path(out_path) if out_path else Path(checkpoint).parent.parent / "eval.json"
    summary.to_json(out_path)
    result = {"summary": str(out_path), "n_examples": summary.n_examples}
    if write_xlsx:
        xlsx = out_path.with_suffix(".xlsx")
        summary.to_excel(xlsx)
        result["spreadsheet"] = str(xlsx)
    return result


def _layout(cfg: RunConfig, q_channels: int, layout_csv: Optional[Union[str, Path]]):
    path = Path(layout_csv or cfg.paths.layout_csv)
    if path.is_file():
        layout = load_layout_csv(path)
        if len(layout.channels) >= q_channels:
            return layout
        logger.warning("Layout %s has %d channels for %d; using a grid", path, len(layout.channels), q_channels)
    return grid_layout(q_channels)


def _evaluate_run(run_dir: Path, cfg: RunConfig, checkpoint: Path, subset: Optional[ChannelSubset]) -> EvalSummary:
    examples = load_split(run_dir, "test") or load_split(run_dir, "val") or load_split(run_dir, "train")
    examples = long_segments(examples, cfg.evaluation.test_seg_len_s)
    return evaluate(checkpoint, examples, subset, cfg.device)


def cmd_report(run_dir: Union[str, Path], compare: Sequence[Union[str, Path]] = (),
               layout_csv: Optional[Union[str, Path]] = None) -> dict:
    """
    Channel maps, metric summaries and figures of a finished run.

    Writes into <run_dir>/report: a channel map (SVG + JSON) per subset, the
    test-split EvalSummary (JSON + xlsx), an SI-SDRi quartile plot, the ConvRS
    sweep table and plot, and validation curves of this run and `compare` runs.
    """
    run_dir = Path(run_dir)
    report_dir = run_dir / "report"
    os.makedirs(report_dir, exist_ok=True)
    cfg = ConfigManager(str(run_dir / "config.json")).get_run_config()
    history = _history(run_dir)
    files: Dict[str, str] = {}

    subset = ChannelSubset.from_json(run_dir / "subset.json") if (run_dir / "subset.json").is_file() else None
    layout = _layout(cfg, cfg.model.eeg_channels, layout_csv)
    if subset is not None:
        svg, sidecar = render_channel_map(subset, layout, report_dir / "channel_map.svg")
        files["channel_map"], files["channel_map_json"] = str(svg), str(sidecar)
    for path in sorted((run_dir / "subsets").glob("*.json")) if (run_dir / "subsets").is_dir() else []:
        svg, _ = render_channel_map(ChannelSubset.from_json(path), layout, report_dir / "subsets" / f"{path.stem}.svg")
        files[f"channel_map_{path.stem}"] = str(svg)

    summary = _evaluate_run(run_dir, cfg, final_checkpoint(run_dir), subset)
    summary.to_json(report_dir / "eval.json")
    files["summary"] = str(report_dir / "eval.json")
    if cfg.evaluation.write_xlsx:
        summary.to_excel(report_dir / "eval.xlsx")
        files["spreadsheet"] = str(report_dir / "eval.xlsx")
    summaries = {history["method"]: summary}

    if history.get("sweep"):
        rows = []
        for level in history["sweep"]:
            level_subset = ChannelSubset.from_json(run_dir / "subsets" / f"{gamma_tag(level['gamma'])}.json")
            level_summary = _evaluate_run(run_dir, cfg, Path(level["checkpoint"]), level_subset)
            stats = level_summary.aggregates()
            rows.append({"gamma": level["gamma"], "n_channels": level["n_channels"],
                         "indices": level["indices"], "val_loss": level["val_loss"],
                         "si_sdr": stats["si_sdr"]["median"], "si_sdri": stats["si_sdri"]["median"]})
            summaries[f"g={level['gamma']:.2f}"] = level_summary
        sweep = pd.DataFrame(rows)
        sweep.to_csv(report_dir / "sweep.csv", index=False)
        files["sweep_table"] = str(report_dir / "sweep.csv")
        files["sweep_plot"] = str(plot_sweep(sweep, report_dir / "sweep.svg"))

    files["quartiles"] = str(plot_quartiles(summaries, report_dir / "quartiles.svg"))
    histories = {history["method"]: history}
    for other in compare:
        other_history = _history(Path(other))
        histories[f"{other_history['method']} ({Path(other).name})"] = other_history
    files["curves"] = str(plot_training_curves(histories, report_dir / "curves.svg"))

    _write_json(report_dir / "report.json", {"run_dir": str(run_dir), "files": files,
                                             "aggregates": summary.aggregates()})
    files["report"] = str(report_dir / "report.json")
    return files
