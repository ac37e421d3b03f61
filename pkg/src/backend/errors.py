"""
Errors for the BASEN toolkit
Every failure the toolkit raises on purpose derives from BasenError.
"""

from typing import List, Optional


class BasenError(Exception):
    """Base class for all toolkit errors."""


class InvalidBandError(BasenError):
    """Filter band outside (0, Nyquist) or with lo >= hi."""


class SignalTooShortError(BasenError):
    """Input shorter than a filter warm-up, a stride window or a pooling stack."""


class DegenerateSourceError(BasenError):
    """A source with zero RMS cannot be scaled to a target SNR."""


class StageError(BasenError):
    """An EEG trial is in the wrong processing stage for the requested operation."""


class ShapeMismatchError(BasenError):
    """Operands disagree on channel count, frame count or length."""


class SelectionError(BasenError):
    """Invalid channel-selection request (empty list, index out of range, K > Q)."""


class DatasetFormatError(BasenError):
    """Malformed dataset directory; always names the offending file."""

    def __init__(self, path: str, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class CheckpointError(BasenError):
    """Checkpoint missing, unreadable or incompatible with the expected config."""

    def __init__(self, message: str, keys: Optional[List[str]] = None):
        self.keys = list(keys or [])
        super().__init__(message)


class ConfigValidationError(BasenError):
    """Run configuration rejected; `keys` lists every offending dotted key."""

    def __init__(self, keys: List[str], details: Optional[List[str]] = None):
        self.keys = list(keys)
        self.details = list(details or [])
        text = "; ".join(self.details) if self.details else ", ".join(self.keys)
        super().__init__(f"Invalid configuration: {text}")


class TrainingDivergedError(BasenError):
    """Loss became NaN or infinite; the last good checkpoint is kept."""

    def __init__(self, message: str, last_good_checkpoint: Optional[str] = None):
        self.last_good_checkpoint = last_good_checkpoint
        super().__init__(message)
