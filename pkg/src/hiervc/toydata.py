"""Synthetic multi-speaker corpus with known speaker/content factors.

Each "speaker" is a fixed spectral envelope filter; each utterance index is
a shared harmonic excitation (a pitch contour with an amplitude gate), so
the same content appears once per speaker.  Speaker identity therefore
lives entirely in the spectral envelope, which makes the corpus a clean
testbed for probes and conversion checks without any licensing burden.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import InvalidInputError


def _speaker_envelope(rng: np.random.Generator, freqs: np.ndarray, n_peaks: int) -> np.ndarray:
    """Random formant-like log-gain curve over frequency, fixed per speaker."""
    nyquist = freqs[-1]
    centers = rng.uniform(0.05 * nyquist, 0.85 * nyquist, size=n_peaks)
    widths = rng.uniform(0.02 * nyquist, 0.08 * nyquist, size=n_peaks)
    gains = rng.uniform(1.0, 2.2, size=n_peaks) * rng.choice([-1.0, 1.0], size=n_peaks)
    log_gain = np.zeros_like(freqs)
    for c, w, g in zip(centers, widths, gains):
        log_gain += g * np.exp(-0.5 * ((freqs - c) / w) ** 2)
    return np.exp(log_gain)


def _excitation(rng: np.random.Generator, n_samples: int, sample_rate: int) -> np.ndarray:
    """Harmonic source with a wandering pitch and a slow amplitude gate."""
    base_f0 = rng.uniform(110.0, 240.0)
    drift = np.cumsum(rng.normal(0.0, 0.3, size=n_samples))
    f0 = base_f0 * np.exp(0.002 * drift / np.sqrt(np.arange(1, n_samples + 1)))
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    limit = int(0.45 * sample_rate / base_f0)
    wave = np.zeros(n_samples)
    for h in range(1, max(2, limit) + 1):
        wave += np.sin(h * phase) / h

    gate_points = rng.uniform(0.25, 1.0, size=8)
    gate = np.interp(
        np.arange(n_samples), np.linspace(0, n_samples - 1, gate_points.size), gate_points
    )
    wave = wave * gate + rng.normal(0.0, 1e-3, size=n_samples)
    return wave


def synthesize_toy_corpus(
    root,
    n_speakers: int = 2,
    utterances_per_speaker: int = 8,
    duration: float = 1.2,
    sample_rate: int = 16000,
    seed: int = 0,
    n_peaks: int = 5,
) -> list[Path]:
    """Write a per-speaker directory tree of WAV files under ``root``.

    Utterance ``i`` shares its excitation across all speakers; speakers
    differ only by their envelope filter.  Fully determined by ``seed``.
    """
    if n_speakers < 1 or utterances_per_speaker < 1:
        raise InvalidInputError("need at least one speaker and one utterance")
    if duration <= 0:
        raise InvalidInputError("duration must be positive")
    root = Path(root)
    n_samples = int(round(duration * sample_rate))
    n_fft = n_samples  # filter via a full-length spectrum multiply
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)

    env_rng = np.random.default_rng(seed)
    envelopes = [_speaker_envelope(env_rng, freqs, n_peaks) for _ in range(n_speakers)]
    exc_rng = np.random.default_rng(seed + 1)
    excitations = [
        _excitation(exc_rng, n_samples, sample_rate) for _ in range(utterances_per_speaker)
    ]

    written: list[Path] = []
    for sid in range(n_speakers):
        speaker_dir = root / f"spk{sid:02d}"
        speaker_dir.mkdir(parents=True, exist_ok=True)
        for uid, excitation in enumerate(excitations):
            spectrum = np.fft.rfft(excitation, n=n_fft) * envelopes[sid]
            wave = np.fft.irfft(spectrum, n=n_fft)
            wave = 0.5 * wave / max(np.abs(wave).max(), 1e-9)
            path = speaker_dir / f"utt{uid:03d}.wav"
            wavfile.write(path, sample_rate, (wave * 32767.0).astype(np.int16))
            written.append(path)
    return written
