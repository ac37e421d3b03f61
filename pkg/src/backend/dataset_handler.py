"""
Dataset Handler for the BASEN toolkit
Handles the on-disk dataset format: one directory per example holding raw
little-endian float32 payloads plus a meta.json sidecar. The planted target
envelope, when an example carries one, is stored as envelope.f32.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import torch
from torch.utils.data import Dataset

from src.backend.corpus import MixtureExample
from src.backend.errors import DatasetFormatError
from src.backend.signal_prep import AudioWaveform, EEGTrial, Stage

logger = logging.getLogger(__name__)

PAYLOAD_DTYPE = np.dtype("<f4")
AUDIO_FILES = {
    "mixture": "audio_mix.f32",
    "target": "audio_target.f32",
    "interferer": "audio_interf.f32",
}
EEG_FILE = "eeg.f32"
ENVELOPE_FILE = "envelope.f32"
META_FILE = "meta.json"
REQUIRED_META = (
    "example_id", "subject_id", "fs_audio", "fs_eeg", "q_channels",
    "n_samples_audio", "n_samples_eeg", "stage",
)


class DatasetHandler:
    """Reads and writes example directories under one dataset root."""

    def __init__(self, root: Union[str, Path]):
        """Initialize the handler for a dataset directory."""
        self.root = Path(root)

    def write_dataset(self, examples: List[MixtureExample]) -> None:
        """Write every example into its own subdirectory."""
        os.makedirs(self.root, exist_ok=True)
        for example in examples:
            self.write_example(example)
        logger.info("Wrote %d examples to %s", len(examples), self.root)

    def write_example(self, example: MixtureExample) -> Path:
        """Write one example and return its directory."""
        example_dir = self.root / example.example_id
        os.makedirs(example_dir, exist_ok=True)

        for attribute, filename in AUDIO_FILES.items():
            waveform: AudioWaveform = getattr(example, attribute)
            waveform.samples.astype(PAYLOAD_DTYPE).tofile(example_dir / filename)
        np.ascontiguousarray(example.eeg.data, dtype=PAYLOAD_DTYPE).tofile(example_dir / EEG_FILE)

        meta: Dict[str, Any] = {
            "example_id": example.example_id,
            "subject_id": example.subject_id,
            "fs_audio": float(example.mixture.fs),
            "fs_eeg": float(example.eeg.fs),
            "q_channels": example.eeg.n_channels,
            "n_samples_audio": len(example.mixture),
            "n_samples_eeg": example.eeg.n_samples,
            "stage": example.eeg.stage.value,
            "channel_labels": list(example.eeg.channel_labels),
        }
        if example.informative_channels:
            meta["informative_channels"] = [int(c) for c in example.informative_channels]
        if example.eeg.degenerate_channels:
            meta["degenerate_channels"] = [int(c) for c in example.eeg.degenerate_channels]
        if example.target_envelope is not None:
            envelope = np.ascontiguousarray(example.target_envelope, dtype=PAYLOAD_DTYPE)
            envelope.tofile(example_dir / ENVELOPE_FILE)
            meta["n_samples_envelope"] = int(envelope.shape[0])

        with open(example_dir / META_FILE, "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
        return example_dir

    def read_dataset(self) -> List[MixtureExample]:
        """Read every example directory, sorted by name. An empty root gives []."""
        if not self.root.exists():
            raise DatasetFormatError(str(self.root), "dataset directory does not exist")
        example_dirs = sorted(p for p in self.root.iterdir() if p.is_dir())
        examples = [self.read_example(p) for p in example_dirs]
        logger.info("Read %d examples from %s", len(examples), self.root)
        return examples

    def read_example(self, example_dir: Path) -> MixtureExample:
        """Read and validate one example directory."""
        meta = self._load_meta(example_dir / META_FILE)
        n_audio = meta["n_samples_audio"]
        q, n_eeg = meta["q_channels"], meta["n_samples_eeg"]

        audio = {
            attribute: AudioWaveform(self._load_payload(example_dir / filename, n_audio), meta["fs_audio"])
            for attribute, filename in AUDIO_FILES.items()
        }
        eeg_data = self._load_payload(example_dir / EEG_FILE, q * n_eeg).reshape(q, n_eeg)
        eeg = EEGTrial(
            eeg_data,
            meta["fs_eeg"],
            channel_labels=meta.get("channel_labels"),
            stage=Stage(meta["stage"]),
            degenerate_channels=tuple(meta.get("degenerate_channels", ())),
        )
        envelope = None
        if "n_samples_envelope" in meta:
            envelope = self._load_payload(example_dir / ENVELOPE_FILE, meta["n_samples_envelope"])
        return MixtureExample(
            mixture=audio["mixture"],
            target=audio["target"],
            interferer=audio["interferer"],
            eeg=eeg,
            subject_id=meta["subject_id"],
            example_id=meta["example_id"],
            informative_channels=tuple(meta.get("informative_channels", ())),
            target_envelope=envelope,
        )

    def _load_meta(self, path: Path) -> Dict[str, Any]:
        """Load a sidecar and check its required fields."""
        try:
            with open(path, "r", encoding="utf-8") as f:
                meta = json.load(f)
        except FileNotFoundError:
            raise DatasetFormatError(str(path), "missing sidecar")
        except json.JSONDecodeError as e:
            raise DatasetFormatError(str(path), f"malformed JSON: {e}")

        if not isinstance(meta, dict):
            raise DatasetFormatError(str(path), "sidecar must be a JSON object")
        missing = [key for key in REQUIRED_META if key not in meta]
        if missing:
            raise DatasetFormatError(str(path), f"missing fields {missing}")
        try:
            Stage(meta["stage"])
        except ValueError:
            raise DatasetFormatError(str(path), f"unknown stage '{meta['stage']}'")
        for key in ("q_channels", "n_samples_audio", "n_samples_eeg"):
            if not isinstance(meta[key], int) or meta[key] < 1:
                raise DatasetFormatError(str(path), f"field '{key}' must be a positive integer")
        return meta

    @staticmethod
    def _load_payload(path: Path, n_values: int) -> np.ndarray:
        """Load a float32 payload whose size must match the sidecar exactly."""
        expected = n_values * PAYLOAD_DTYPE.itemsize
        try:
            actual = path.stat().st_size
        except FileNotFoundError:
            raise DatasetFormatError(str(path), "missing payload")
        if actual != expected:
            raise DatasetFormatError(str(path), f"expected {expected} bytes, found {actual}")
        return np.fromfile(path, dtype=PAYLOAD_DTYPE).astype(np.float32)


def write_dataset(examples: List[MixtureExample], directory: Union[str, Path]) -> None:
    DatasetHandler(directory).write_dataset(examples)


def read_dataset(directory: Union[str, Path]) -> List[MixtureExample]:
    return DatasetHandler(directory).read_dataset()


def split_examples(
    examples: List[MixtureExample],
    val_fraction: float,
    test_fraction: float,
    seed: int,
) -> Tuple[List[MixtureExample], List[MixtureExample], List[MixtureExample]]:
    """Deterministic train/validation/test split of whole examples.

    Every non-empty fraction receives at least one example when there are
    enough examples to leave one for training.
    """
    if not (0 <= val_fraction < 1 and 0 <= test_fraction < 1 and val_fraction + test_fraction < 1):
        raise ValueError(f"Invalid split fractions: val={val_fraction}, test={test_fraction}")
    ordered = sorted(examples, key=lambda ex: ex.example_id)
    order = np.random.default_rng(seed).permutation(len(ordered))
    n = len(ordered)
    n_val = int(round(val_fraction * n))
    n_test = int(round(test_fraction * n))
    if val_fraction > 0 and n_val == 0 and n - n_test > 1:
        n_val = 1
    if test_fraction > 0 and n_test == 0 and n - n_val > 1:
        n_test = 1
    val = [ordered[i] for i in order[:n_val]]
    test = [ordered[i] for i in order[n_val:n_val + n_test]]
    train = [ordered[i] for i in order[n_val + n_test:]]
    return train, val, test


class MixtureDataset(Dataset):
    """Torch view over a list of examples (all of equal length within a batch)."""

    def __init__(self, examples: List[MixtureExample]):
        self.examples = examples

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        example = self.examples[index]
        return {
            "mixture": torch.from_numpy(example.mixture.samples.astype(np.float32)),
            "target": torch.from_numpy(example.target.samples.astype(np.float32)),
            "interferer": torch.from_numpy(example.interferer.samples.astype(np.float32)),
            "eeg": torch.from_numpy(example.eeg.data.astype(np.float32)),
            "index": torch.tensor(index),
        }
