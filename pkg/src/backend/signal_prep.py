"""
Signal Preparation for the BASEN toolkit
Deterministic DSP front-end: band-pass filtering, MUA extraction, mixing at a
target SNR, synchronized segmentation and resampling.

All functions are pure; arrays are processed along their last (time) axis.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import List, NamedTuple, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from scipy.signal import butter, hilbert, resample_poly, sosfiltfilt

from src.backend.errors import (
    DegenerateSourceError,
    InvalidBandError,
    ShapeMismatchError,
    SignalTooShortError,
    StageError,
)

logger = logging.getLogger(__name__)

DEFAULT_AUDIO_FS = 14700.0
DEFAULT_EEG_FS = 128.0


class Stage(str, Enum):
    """Processing stage of an EEG trial."""

    RAW = "raw"
    FILTERED = "filtered"
    MUA = "mua"


@dataclass
class AudioWaveform:
    """Mono waveform with its sample rate."""

    samples: np.ndarray
    fs: float = DEFAULT_AUDIO_FS

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ShapeMismatchError(f"Waveform must be 1-D, got shape {self.samples.shape}")
        if self.samples.size < 1:
            raise SignalTooShortError("Waveform must contain at least one sample")
        if not self.fs > 0:
            raise ValueError(f"Sample rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Waveform contains non-finite values")

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return len(self) / self.fs

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples, dtype=np.float64))))


@dataclass
class EEGTrial:
    """Channel-major EEG matrix (Q x T) with labels and processing stage.

    `degenerate_channels` lists channels whose delta band was all-zero during
    MUA extraction; those channels carry zeros.
    """

    data: np.ndarray
    fs: float = DEFAULT_EEG_FS
    channel_labels: Optional[List[str]] = None
    stage: Stage = Stage.RAW
    degenerate_channels: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ShapeMismatchError(f"EEG data must be channels x time, got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise SignalTooShortError(f"EEG trial is empty: shape {self.data.shape}")
        if not self.fs > 0:
            raise ValueError(f"Sample rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("EEG trial contains non-finite values")
        self.stage = Stage(self.stage)
        if self.channel_labels is None:
            self.channel_labels = default_channel_labels(self.data.shape[0])
        if len(self.channel_labels) != self.data.shape[0]:
            raise ShapeMismatchError(
                f"{len(self.channel_labels)} labels for {self.data.shape[0]} channels"
            )

    @property
    def n_channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[1])

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs


@dataclass(frozen=True)
class BandSpec:
    """Pass band of a Butterworth filter. lo_hz = 0 gives a low-pass."""

    lo_hz: float
    hi_hz: float
    order: int = 4

    def validate(self, fs: float) -> None:
        """Raise InvalidBandError unless 0 <= lo < hi < fs/2."""
        nyquist = 0.5 * float(fs)
        if not (0.0 <= self.lo_hz < self.hi_hz < nyquist):
            raise InvalidBandError(
                f"Band {self.lo_hz}-{self.hi_hz} Hz is invalid for fs={fs} Hz (Nyquist {nyquist} Hz)"
            )
        if self.order < 1:
            raise InvalidBandError(f"Filter order must be >= 1, got {self.order}")


EEG_BAND = BandSpec(0.1, 45.0)
GAMMA_BAND = BandSpec(30.0, 45.0)
DELTA_BAND = BandSpec(0.5, 4.0)


class MixResult(NamedTuple):
    """Mixture plus the rescaled sources it was built from."""

    mixture: AudioWaveform
    target: AudioWaveform
    interferer: AudioWaveform


Signal = TypeVar("Signal", AudioWaveform, EEGTrial)


def default_channel_labels(n_channels: int) -> List[str]:
    return [f"Ch{i + 1:03d}" for i in range(n_channels)]


@lru_cache(maxsize=None)
def _band_sos(fs: float, lo_hz: float, hi_hz: float, order: int) -> np.ndarray:
    nyquist = 0.5 * fs
    if lo_hz == 0.0:
        return butter(order, hi_hz / nyquist, btype="low", output="sos")
    return butter(order, [lo_hz / nyquist, hi_hz / nyquist], btype="band", output="sos")


def filter_warmup_length(band: BandSpec, fs: float) -> int:
    """Minimum input length accepted by bandpass (the sosfiltfilt edge pad)."""
    sos = _band_sos(float(fs), float(band.lo_hz), float(band.hi_hz), int(band.order))
    n_zero_b = int((sos[:, 2] == 0).sum())
    n_zero_a = int((sos[:, 5] == 0).sum())
    return 3 * (2 * len(sos) + 1 - min(n_zero_b, n_zero_a)) + 1


def bandpass(x: np.ndarray, band: BandSpec, fs: float) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis, even-reflected edges.

    Args:
        x: 1-D signal or channels x time matrix
        band: pass band
        fs: sample rate in Hz

    Returns:
        Filtered float64 array of the same shape
    """
    band.validate(fs)
    x = np.asarray(x, dtype=np.float64)
    warmup = filter_warmup_length(band, fs)
    if x.shape[-1] < warmup:
        raise SignalTooShortError(
            f"bandpass needs at least {warmup} samples at {fs} Hz, got {x.shape[-1]}"
        )
    sos = _band_sos(float(fs), float(band.lo_hz), float(band.hi_hz), int(band.order))
    return sosfiltfilt(sos, x, axis=-1, padtype="even")


def filter_trial(e: EEGTrial, band: BandSpec = EEG_BAND) -> EEGTrial:
    """Apply the EEG pre-filter (0.1-45 Hz by default) and mark the trial filtered."""
    if e.stage != Stage.RAW:
        raise StageError(f"filter_trial expects a raw trial, got stage '{e.stage.value}'")
    return replace(e, data=bandpass(e.data, band, e.fs), stage=Stage.FILTERED)


def compute_mua(
    e: EEGTrial,
    a_gamma: float = 0.5,
    a_delta: float = 0.5,
    gamma_band: BandSpec = GAMMA_BAND,
    delta_band: BandSpec = DELTA_BAND,
) -> EEGTrial:
    """Multi-unit activity surrogate U(t) = a_gamma * P_gamma(t) + a_delta * phase_delta(t).

    P_gamma is the analytic-signal envelope of the gamma band and phase_delta the
    instantaneous phase (radians, [-pi, pi]) of the delta band. Channels whose
    delta band is identically zero have no defined phase; they are emitted as
    zeros and listed in `degenerate_channels`.
    """
    if e.stage != Stage.FILTERED:
        raise StageError(f"compute_mua expects a filtered trial, got stage '{e.stage.value}'")

    gamma = bandpass(e.data, gamma_band, e.fs)
    delta = bandpass(e.data, delta_band, e.fs)
    envelope = np.abs(hilbert(gamma, axis=-1))
    phase = np.angle(hilbert(delta, axis=-1))

    mua = a_gamma * envelope + a_delta * phase
    degenerate = tuple(int(c) for c in np.flatnonzero(~np.any(delta != 0.0, axis=-1)))
    if degenerate:
        logger.warning("Delta phase undefined for channels %s; emitting zeros", list(degenerate))
        mua[list(degenerate), :] = 0.0

    return replace(e, data=mua, stage=Stage.MUA, degenerate_channels=degenerate)


def mix_at_snr(s1: AudioWaveform, s2: AudioWaveform, snr_db: float) -> MixResult:
    """Rescale two sources to a common RMS level offset by snr_db and add them.

    The interferer is brought to the original RMS of s1 and the target to that
    level times 10^(snr_db/20), so 20*log10(RMS(s1')/RMS(s2')) = snr_db.
    """
    if len(s1) != len(s2):
        raise ShapeMismatchError(f"Sources differ in length: {len(s1)} vs {len(s2)}")
    if s1.fs != s2.fs:
        raise ShapeMismatchError(f"Sources differ in sample rate: {s1.fs} vs {s2.fs}")
    rms1, rms2 = s1.rms(), s2.rms()
    if rms1 == 0.0 or rms2 == 0.0:
        raise DegenerateSourceError("Cannot mix a source with zero RMS")

    level = rms1
    target = s1.samples.astype(np.float64) * (level / rms1) * 10.0 ** (snr_db / 20.0)
    interferer = s2.samples.astype(np.float64) * (level / rms2)
    return MixResult(
        mixture=AudioWaveform(target + interferer, s1.fs),
        target=AudioWaveform(target, s1.fs),
        interferer=AudioWaveform(interferer, s1.fs),
    )


def segment_bounds(n_samples: int, fs: float, seg_len_s: float, hop_s: Optional[float] = None) -> List[Tuple[int, int]]:
    """Sample bounds [start, stop) of every full segment; the remainder is dropped."""
    hop_s = seg_len_s if hop_s is None else hop_s
    if seg_len_s <= 0 or hop_s <= 0:
        raise ValueError(f"Segment length and hop must be positive, got {seg_len_s}, {hop_s}")
    seg_len = int(round(seg_len_s * fs))
    bounds = []
    index = 0
    while True:
        start = int(round(index * hop_s * fs))
        if start + seg_len > n_samples:
            break
        bounds.append((start, start + seg_len))
        index += 1
    return bounds


def segment(x: Signal, seg_len_s: float, hop_s: Optional[float] = None) -> List[Signal]:
    """Cut a waveform or trial into equal-length segments.

    Boundaries are placed at the same wall-clock instants for any sample rate,
    so audio and EEG cut with the same arguments stay aligned.
    """
    n_samples = len(x) if isinstance(x, AudioWaveform) else x.n_samples
    duration = n_samples / x.fs
    if seg_len_s > duration + 1e-12:
        logger.warning("Segment length %.3f s exceeds signal duration %.3f s; no segments", seg_len_s, duration)
        return []

    segments = []
    for start, stop in segment_bounds(n_samples, x.fs, seg_len_s, hop_s):
        if isinstance(x, AudioWaveform):
            segments.append(AudioWaveform(x.samples[start:stop].copy(), x.fs))
        else:
            segments.append(replace(x, data=x.data[:, start:stop].copy()))
    return segments


def _rational_ratio(from_fs: float, to_fs: float) -> Tuple[int, int]:
    ratio = (Fraction(to_fs) / Fraction(from_fs)).limit_denominator(10000)
    return ratio.numerator, ratio.denominator


def resample(x: Signal, to_fs: float) -> Signal:
    """Polyphase resampling (anti-aliased) of a waveform or trial to `to_fs`."""
    if not to_fs > 0:
        raise ValueError(f"Target sample rate must be positive, got {to_fs}")
    if to_fs == x.fs:
        return replace(x, samples=x.samples.copy()) if isinstance(x, AudioWaveform) else replace(x, data=x.data.copy())

    up, down = _rational_ratio(x.fs, to_fs)
    if isinstance(x, AudioWaveform):
        return AudioWaveform(resample_poly(x.samples.astype(np.float64), up, down), float(to_fs))
    return replace(x, data=resample_poly(x.data.astype(np.float64), up, down, axis=-1), fs=float(to_fs))


def speech_envelope(x: AudioWaveform, to_fs: float = DEFAULT_EEG_FS, band: Optional[BandSpec] = DELTA_BAND) -> np.ndarray:
    """Stimulus envelope: Hilbert magnitude resampled to `to_fs`, optionally band-limited."""
    magnitude = AudioWaveform(np.abs(hilbert(x.samples.astype(np.float64))), x.fs)
    envelope = resample(magnitude, to_fs).samples
    if band is not None:
        envelope = bandpass(envelope, band, to_fs)
    return envelope


def rms_ratio_db(a: Sequence[float], b: Sequence[float]) -> float:
    """20*log10(RMS(a)/RMS(b))."""
    ra = np.sqrt(np.mean(np.square(np.asarray(a, dtype=np.float64))))
    rb = np.sqrt(np.mean(np.square(np.asarray(b, dtype=np.float64))))
    return float(20.0 * np.log10(ra / rb))


def as_float32(x: Union[AudioWaveform, EEGTrial]) -> Union[AudioWaveform, EEGTrial]:
    """Copy of a waveform or trial stored as float32 (the on-disk precision)."""
    if isinstance(x, AudioWaveform):
        return AudioWaveform(x.samples.astype(np.float32), x.fs)
    return replace(x, data=x.data.astype(np.float32))
