"""Feature extraction, segmentation, and mel file format tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiervc.errors import ConfigurationError, InvalidInputError
from hiervc.features import (
    MelParams,
    MelSegment,
    MelUtterance,
    Normalization,
    concat_segments,
    extract_mel,
    mel_filterbank,
    read_mel_file,
    segment_utterance,
    write_mel_file,
)

MEL16 = MelParams(sample_rate=16000)


def _oracle_centers_hz(params: MelParams) -> np.ndarray:
    """Filter peak frequencies recomputed from the mel-scale definition.

    Independent of the filterbank construction code: peaks sit at the
    interior points of a uniform grid on the HTK mel scale.
    """

    def to_mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    grid = np.linspace(to_mel(params.fmin), to_mel(params.sample_rate / 2.0), params.n_mels + 2)
    return np.array([to_hz(m) for m in grid[1:-1]])


class TestExtractMel:
    def test_silence_hits_amplitude_floor(self):
        wave = np.zeros(int(0.5 * MEL16.sample_rate))
        utt = extract_mel(wave, 16000, MEL16)
        assert np.allclose(utt.frames, math.log(MEL16.amplitude_floor), atol=1e-6)

    def test_pure_tone_peaks_at_nearest_filter(self):
        params = MelParams(sample_rate=48000)
        t = np.arange(int(0.5 * params.sample_rate)) / params.sample_rate
        utt = extract_mel(np.sin(2 * np.pi * 440.0 * t), 48000, params)
        expected = int(np.argmin(np.abs(_oracle_centers_hz(params) - 440.0)))
        interior = utt.frames[:, 5:-5]
        assert np.all(np.argmax(interior, axis=0) == expected)

    def test_half_second_gives_about_forty_frames(self):
        params = MelParams()  # 48 kHz defaults
        assert params.hop_length == 600  # 12.5 ms frame period
        wave = np.random.default_rng(0).normal(size=int(0.5 * params.sample_rate))
        utt = extract_mel(wave, 48000, params)
        assert abs(utt.n_frames - 40) <= 2

    def test_deterministic_bit_for_bit(self):
        wave = np.random.default_rng(1).normal(size=8000)
        a = extract_mel(wave, 16000, MEL16)
        b = extract_mel(wave, 16000, MEL16)
        assert np.array_equal(a.frames, b.frames)

    def test_empty_waveform_rejected(self):
        with pytest.raises(InvalidInputError):
            extract_mel(np.array([]), 16000, MEL16)

    def test_sample_rate_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            extract_mel(np.zeros(100), 22050, MEL16)

    def test_filterbank_shape_and_coverage(self):
        bank = mel_filterbank(MEL16)
        assert bank.shape == (80, MEL16.n_fft // 2 + 1)
        assert np.all(bank.max(axis=1) > 0)  # no empty filters


def _random_utterance(n_frames: int, seed: int = 0, speaker: int = 0) -> MelUtterance:
    rng = np.random.default_rng(seed)
    return MelUtterance(
        frames=rng.normal(size=(80, n_frames)).astype(np.float32), speaker=speaker
    )


class TestSegmentation:
    def test_exact_multiple(self):
        segments, pads = segment_utterance(_random_utterance(120), 40)
        assert len(segments) == 3
        assert pads == [0, 0, 0]

    def test_identity_case(self):
        utt = _random_utterance(40)
        segments, pads = segment_utterance(utt, 40)
        assert len(segments) == 1 and pads == [0]
        assert np.array_equal(segments[0].frames, utt.frames)

    def test_remainder_padding(self):
        segments, pads = segment_utterance(_random_utterance(95), 40)
        assert len(segments) == 3
        assert pads == [0, 0, 25]
        # the padding repeats the final real frame
        last = segments[-1].frames
        assert np.array_equal(last[:, 15:], np.repeat(last[:, 14:15], 25, axis=1))

    def test_concat_trivials(self):
        utt = _random_utterance(120)
        segments, pads = segment_utterance(utt, 40)
        back = concat_segments(segments, pads)
        assert back.n_frames == 120
        single, pads1 = segment_utterance(_random_utterance(15), 40)
        assert pads1 == [25]
        assert concat_segments(single, pads1).n_frames == 15

    @settings(max_examples=60, deadline=None)
    @given(n_frames=st.integers(1, 400), width=st.integers(1, 64))
    def test_round_trip_is_frame_exact(self, n_frames, width):
        utt = _random_utterance(n_frames, seed=n_frames * 131 + width)
        segments, pads = segment_utterance(utt, width)
        assert len(segments) == math.ceil(n_frames / width)
        back = concat_segments(segments, pads)
        assert np.array_equal(back.frames, utt.frames)

    def test_inconsistent_pads_rejected(self):
        segments, pads = segment_utterance(_random_utterance(95), 40)
        with pytest.raises(InvalidInputError):
            concat_segments(segments, pads[:-1])
        with pytest.raises(InvalidInputError):
            concat_segments(segments, [25, 0, 0])
        with pytest.raises(InvalidInputError):
            concat_segments(segments, [0, 0, 40])
        with pytest.raises(InvalidInputError):
            concat_segments([], [])

    def test_bad_width_rejected(self):
        with pytest.raises(InvalidInputError):
            segment_utterance(_random_utterance(10), 0)


class TestNormalization:
    @settings(max_examples=60, deadline=None)
    @given(
        lo=st.floats(-20, 0),
        span=st.floats(0.1, 30),
        value=st.floats(-25, 25),
    )
    def test_invertible(self, lo, span, value):
        norm = Normalization.from_range(1e-5, lo, lo + span)
        assert norm.denormalize(norm.normalize(value)) == pytest.approx(value, abs=1e-6)

    def test_degenerate_range_is_usable(self):
        norm = Normalization.from_range(1e-5, -3.0, -3.0)
        assert norm.scale == 1.0


class TestMelFile:
    def test_round_trip_is_exact(self, tmp_path):
        frames = np.random.default_rng(3).normal(size=(80, 33)).astype(np.float32)
        path = tmp_path / "utt.mel"
        write_mel_file(path, frames, speaker_id=5)
        back, speaker = read_mel_file(path)
        assert speaker == 5
        assert np.array_equal(back, frames)
        assert back.dtype == np.float32

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "utt.mel"
        write_mel_file(path, np.zeros((80, 10), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(InvalidInputError):
            read_mel_file(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.mel"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(InvalidInputError):
            read_mel_file(path)


class TestMelTypes:
    def test_bin_count_enforced(self):
        with pytest.raises(InvalidInputError):
            MelSegment(frames=np.zeros((79, 40), dtype=np.float32))

    def test_non_finite_rejected(self):
        frames = np.zeros((80, 4), dtype=np.float32)
        frames[0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            MelUtterance(frames=frames)
