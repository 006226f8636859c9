"""Log-mel feature extraction, segmentation, and feature file persistence.

The acoustic unit throughout the toolkit is an 80-band log-mel matrix.
Whole recordings are represented by :class:`MelUtterance` and training /
conversion operate on fixed-width :class:`MelSegment` windows cut from it.

Feature file layout (``.mel``), little-endian:

    offset  size  field
    0       4     magic ``b"MELF"``
    4       4     u32 format version (currently 1)
    8       4     u32 number of mel bins
    12      4     u32 number of frames
    16      4     i32 speaker id (-1 when unassigned)
    20      ...   float32 payload, row-major (bins x frames)

The payload is written byte-exactly so features can be interchanged with
other tools (e.g. an external neural vocoder consuming converted output).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .errors import ConfigurationError, InvalidInputError

MEL_BINS = 80

_MEL_MAGIC = b"MELF"
_MEL_VERSION = 1
_MEL_HEADER = struct.Struct("<4sIIIi")


def hz_to_mel(hz):
    """HTK mel scale: ``2595 * log10(1 + f / 700)``."""
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    """Inverse of :func:`hz_to_mel`."""
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelParams:
    """Resolved mel analysis parameters.

    The 80x40 segment geometry ties 40 frames to half a second of audio,
    which pins the frame period to 12.5 ms.  Window length, FFT size, and
    the amplitude floor are free choices; they are recorded in every
    dataset manifest so features remain reproducible.
    """

    sample_rate: int = 48000
    hop_ms: float = 12.5
    win_ms: float = 50.0
    n_mels: int = MEL_BINS
    fmin: float = 0.0
    fmax: float | None = None
    amplitude_floor: float = 1e-5

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigurationError("sample_rate must be positive")
        if self.hop_ms <= 0 or self.win_ms <= 0:
            raise ConfigurationError("hop_ms and win_ms must be positive")
        if self.n_mels < 1:
            raise ConfigurationError("n_mels must be at least 1")
        if self.amplitude_floor <= 0:
            raise ConfigurationError("amplitude_floor must be positive")
        if self.fmax is not None and self.fmax <= self.fmin:
            raise ConfigurationError("fmax must exceed fmin")
        if self.hop_length < 1 or self.win_length < 1:
            raise ConfigurationError("hop/window shorter than one sample")

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        """Smallest power of two that holds the analysis window."""
        return 1 << max(0, (self.win_length - 1).bit_length())

    @property
    def mel_fmax(self) -> float:
        return self.sample_rate / 2.0 if self.fmax is None else self.fmax


def mel_filterbank(params: MelParams) -> np.ndarray:
    """Triangular filters with peaks uniformly spaced on the mel scale.

    Returns an ``(n_mels, n_fft // 2 + 1)`` matrix with peak gain 1.
    """
    n_freq = params.n_fft // 2 + 1
    freqs = np.linspace(0.0, params.sample_rate / 2.0, n_freq)
    edges = mel_to_hz(
        np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.mel_fmax), params.n_mels + 2)
    )
    bank = np.zeros((params.n_mels, n_freq))
    for m in range(params.n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return bank


def mel_center_frequencies(params: MelParams) -> np.ndarray:
    """Peak frequency (Hz) of each filter in :func:`mel_filterbank`."""
    edges = np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.mel_fmax), params.n_mels + 2)
    return mel_to_hz(edges[1:-1])


def _validate_frames(frames: np.ndarray, kind: str) -> np.ndarray:
    arr = np.asarray(frames, dtype=np.float32)
    if arr.ndim != 2:
        raise InvalidInputError(f"{kind} frames must be 2-D, got shape {arr.shape}")
    if arr.shape[0] != MEL_BINS:
        raise InvalidInputError(
            f"{kind} must have exactly {MEL_BINS} mel bins, got {arr.shape[0]}"
        )
    if arr.shape[1] < 1:
        raise InvalidInputError(f"{kind} must contain at least one frame")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{kind} contains non-finite values")
    return arr


@dataclass
class MelUtterance:
    """An 80-band log-mel matrix covering a whole recording."""

    frames: np.ndarray
    speaker: int = -1
    source_id: str = ""

    def __post_init__(self):
        self.frames = _validate_frames(self.frames, "utterance")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


@dataclass
class MelSegment:
    """A fixed-width window of log-mel frames, the unit of training."""

    frames: np.ndarray
    speaker: int = -1

    def __post_init__(self):
        self.frames = _validate_frames(self.frames, "segment")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


def extract_mel(waveform, sample_rate: int, params: MelParams | None = None) -> MelUtterance:
    """Compute an 80-band log-mel matrix from a mono waveform.

    Frames are centered (reflect padding), the magnitude spectrum is pushed
    through the triangular filterbank, and amplitudes are clamped at
    ``params.amplitude_floor`` before the natural log so silence maps to a
    finite constant.  Deterministic: identical input gives identical output
    bit for bit.
    """
    params = params or MelParams()
    wave = np.asarray(waveform, dtype=np.float64)
    if wave.ndim != 1:
        raise InvalidInputError(f"waveform must be 1-D, got shape {wave.shape}")
    if wave.size == 0:
        raise InvalidInputError("waveform is empty")
    if not np.all(np.isfinite(wave)):
        raise InvalidInputError("waveform contains non-finite samples")
    if int(sample_rate) != params.sample_rate:
        raise ConfigurationError(
            f"waveform sample rate {sample_rate} does not match configured "
            f"{params.sample_rate}"
        )

    n_fft = params.n_fft
    hop = params.hop_length
    pad = n_fft // 2
    mode = "reflect" if wave.size > pad else "edge"
    padded = np.pad(wave, pad, mode=mode)

    window = np.zeros(n_fft)
    offset = (n_fft - params.win_length) // 2
    window[offset : offset + params.win_length] = get_window(
        "hann", params.win_length, fftbins=True
    )

    n_frames = 1 + wave.size // hop
    starts = np.arange(n_frames) * hop
    frames = np.stack([padded[s : s + n_fft] for s in starts])
    magnitude = np.abs(np.fft.rfft(frames * window, axis=1))

    mel = mel_filterbank(params) @ magnitude.T
    log_mel = np.log(np.maximum(mel, params.amplitude_floor))
    return MelUtterance(frames=log_mel.astype(np.float32))


def segment_utterance(
    utterance: MelUtterance, segment_frames: int
) -> tuple[list[MelSegment], list[int]]:
    """Cut an utterance into consecutive non-overlapping windows.

    A final remainder shorter than ``segment_frames`` is right-padded by
    repeating the last frame.  Returns the segments together with the
    per-segment pad lengths (zero everywhere except possibly the final
    entry) so :func:`concat_segments` can trim exactly.
    """
    if segment_frames < 1:
        raise InvalidInputError("segment_frames must be at least 1")
    total = utterance.n_frames
    if total == 0:
        raise InvalidInputError("utterance has no frames")

    segments: list[MelSegment] = []
    pads: list[int] = []
    count = math.ceil(total / segment_frames)
    for i in range(count):
        chunk = utterance.frames[:, i * segment_frames : (i + 1) * segment_frames]
        pad = segment_frames - chunk.shape[1]
        if pad:
            tail = np.repeat(chunk[:, -1:], pad, axis=1)
            chunk = np.concatenate([chunk, tail], axis=1)
        segments.append(MelSegment(frames=chunk, speaker=utterance.speaker))
        pads.append(pad)
    return segments, pads


def concat_segments(segments: list[MelSegment], pad_lengths: list[int]) -> MelUtterance:
    """Inverse of :func:`segment_utterance`: trim padding and concatenate."""
    if not segments:
        raise InvalidInputError("no segments to concatenate")
    if len(pad_lengths) != len(segments):
        raise InvalidInputError(
            f"{len(segments)} segments but {len(pad_lengths)} pad lengths"
        )
    width = segments[0].n_frames
    speaker = segments[0].speaker
    parts = []
    for i, (seg, pad) in enumerate(zip(segments, pad_lengths)):
        if seg.n_frames != width:
            raise InvalidInputError("segments have inconsistent widths")
        if seg.speaker != speaker:
            raise InvalidInputError("segments have inconsistent speakers")
        if pad < 0 or pad >= width:
            raise InvalidInputError(f"pad length {pad} out of range for width {width}")
        if pad and i != len(segments) - 1:
            raise InvalidInputError("only the final segment may carry padding")
        parts.append(seg.frames[:, : width - pad])
    return MelUtterance(frames=np.concatenate(parts, axis=1), speaker=speaker)


@dataclass(frozen=True)
class Normalization:
    """Affine map taking corpus log-mel values onto [0, 1].

    ``floor`` is the amplitude floor applied before the log when features
    were extracted; ``shift`` and ``scale`` realize
    ``normalized = (x - shift) * scale``.
    """

    floor: float
    shift: float
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigurationError("normalization scale must be positive")

    @classmethod
    def from_range(cls, floor: float, lo: float, hi: float) -> "Normalization":
        scale = 1.0 / (hi - lo) if hi > lo else 1.0
        return cls(floor=floor, shift=lo, scale=scale)

    def normalize(self, values):
        return (np.asarray(values, dtype=np.float64) - self.shift) * self.scale

    def denormalize(self, values):
        return np.asarray(values, dtype=np.float64) / self.scale + self.shift


def write_mel_file(path, frames: np.ndarray, speaker_id: int = -1) -> None:
    """Persist a log-mel matrix using the documented binary layout."""
    arr = np.ascontiguousarray(_validate_frames(frames, "mel file"), dtype="<f4")
    header = _MEL_HEADER.pack(
        _MEL_MAGIC, _MEL_VERSION, arr.shape[0], arr.shape[1], int(speaker_id)
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + arr.tobytes())


def read_mel_file(path) -> tuple[np.ndarray, int]:
    """Read a ``.mel`` file; returns ``(frames, speaker_id)``."""
    blob = Path(path).read_bytes()
    if len(blob) < _MEL_HEADER.size:
        raise InvalidInputError(f"{path}: truncated mel file header")
    magic, version, n_bins, n_frames, speaker_id = _MEL_HEADER.unpack_from(blob)
    if magic != _MEL_MAGIC:
        raise InvalidInputError(f"{path}: not a mel feature file")
    if version != _MEL_VERSION:
        raise InvalidInputError(f"{path}: unsupported mel file version {version}")
    expected = _MEL_HEADER.size + 4 * n_bins * n_frames
    if len(blob) != expected:
        raise InvalidInputError(
            f"{path}: payload size mismatch ({len(blob)} bytes, expected {expected})"
        )
    payload = np.frombuffer(blob, dtype="<f4", offset=_MEL_HEADER.size)
    return payload.reshape(n_bins, n_frames).copy(), speaker_id
