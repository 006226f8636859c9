"""Corpus scanning, dataset manifests, and segment materialization.

A prepared dataset directory contains one feature file per utterance plus a
single human-readable ``manifest.txt``.  The manifest is a line-oriented
key-value header followed by three tables::

    hiervc-manifest 1
    segment_frames 40
    mel.sample_rate 16000
    ...
    norm.shift -11.512925464970229
    norm.scale 0.0748...
    speakers 2
    speaker 0 alice
    speaker 1 bob
    utterances 4
    utterance <idx> <speaker_id> <n_frames> <relative path>
    ...
    segments 16
    segment <utterance_idx> <start_frame> <pad_frames>
    ...

Floats are written with ``repr`` so rebuilding the manifest from an
unchanged corpus reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import InvalidInputError, UnsupportedVersionError
from .features import (
    MelParams,
    MelSegment,
    Normalization,
    extract_mel,
    read_mel_file,
    write_mel_file,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
_MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SpeakerVocab:
    """Bijective mapping between speaker names and dense integer ids."""

    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise InvalidInputError("speaker vocabulary is empty")
        if len(set(self.names)) != len(self.names):
            raise InvalidInputError("speaker names are not unique")

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InvalidInputError(
                f"unknown speaker {name!r}; known speakers: {', '.join(self.names)}"
            ) from None

    def name_of(self, speaker_id: int) -> str:
        if not 0 <= speaker_id < len(self.names):
            raise InvalidInputError(f"speaker id {speaker_id} out of range")
        return self.names[speaker_id]


@dataclass(frozen=True)
class UtteranceRecord:
    path: str
    speaker_id: int
    n_frames: int


@dataclass(frozen=True)
class SegmentRecord:
    utterance: int
    start: int
    pad: int


@dataclass
class DatasetManifest:
    """Everything needed to reproduce a prepared dataset."""

    mel: MelParams
    segment_frames: int
    vocab: SpeakerVocab
    normalization: Normalization
    utterances: tuple[UtteranceRecord, ...]
    segments: tuple[SegmentRecord, ...]
    root: Path | None = None

    def __post_init__(self):
        if self.segment_frames < 1:
            raise InvalidInputError("segment_frames must be at least 1")
        if not self.segments:
            raise InvalidInputError("manifest contains no segments")
        for rec in self.utterances:
            if not 0 <= rec.speaker_id < len(self.vocab):
                raise InvalidInputError(f"utterance speaker id {rec.speaker_id} not in vocab")

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    def serialize(self) -> str:
        mel = self.mel
        lines = [
            f"hiervc-manifest {_MANIFEST_VERSION}",
            f"segment_frames {self.segment_frames}",
            f"mel.sample_rate {mel.sample_rate}",
            f"mel.hop_ms {mel.hop_ms!r}",
            f"mel.win_ms {mel.win_ms!r}",
            f"mel.n_mels {mel.n_mels}",
            f"mel.fmin {mel.fmin!r}",
            f"mel.fmax {'none' if mel.fmax is None else repr(mel.fmax)}",
            f"mel.amplitude_floor {mel.amplitude_floor!r}",
            # resolved sample-unit values, for readers without the ms math
            f"mel.hop_length {mel.hop_length}",
            f"mel.win_length {mel.win_length}",
            f"mel.n_fft {mel.n_fft}",
            f"norm.floor {self.normalization.floor!r}",
            f"norm.shift {self.normalization.shift!r}",
            f"norm.scale {self.normalization.scale!r}",
            f"speakers {len(self.vocab)}",
        ]
        for sid, name in enumerate(self.vocab.names):
            lines.append(f"speaker {sid} {name}")
        lines.append(f"utterances {len(self.utterances)}")
        for idx, rec in enumerate(self.utterances):
            lines.append(f"utterance {idx} {rec.speaker_id} {rec.n_frames} {rec.path}")
        lines.append(f"segments {len(self.segments)}")
        for rec in self.segments:
            lines.append(f"segment {rec.utterance} {rec.start} {rec.pad}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.serialize(), encoding="utf-8")

    def fingerprint(self) -> str:
        """Stable digest of the manifest contents (not of feature payloads)."""
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()


def _parse_kv(lines: list[str], index: int, key: str) -> tuple[str, int]:
    if index >= len(lines):
        raise InvalidInputError(f"manifest ended before key {key!r}")
    line = lines[index]
    prefix = key + " "
    if not line.startswith(prefix):
        raise InvalidInputError(f"manifest line {index + 1}: expected {key!r}, got {line!r}")
    return line[len(prefix) :], index + 1


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest written by :meth:`DatasetManifest.save`."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise InvalidInputError(f"{path}: empty manifest")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "hiervc-manifest":
        raise InvalidInputError(f"{path}: not a dataset manifest")
    if int(head[1]) != _MANIFEST_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported manifest version {head[1]}")

    i = 1
    value, i = _parse_kv(lines, i, "segment_frames")
    segment_frames = int(value)
    mel_values = {}
    for key in ("sample_rate", "hop_ms", "win_ms", "n_mels", "fmin", "fmax", "amplitude_floor"):
        value, i = _parse_kv(lines, i, f"mel.{key}")
        mel_values[key] = value
    mel = MelParams(
        sample_rate=int(mel_values["sample_rate"]),
        hop_ms=float(mel_values["hop_ms"]),
        win_ms=float(mel_values["win_ms"]),
        n_mels=int(mel_values["n_mels"]),
        fmin=float(mel_values["fmin"]),
        fmax=None if mel_values["fmax"] == "none" else float(mel_values["fmax"]),
        amplitude_floor=float(mel_values["amplitude_floor"]),
    )
    for key, derived in (
        ("hop_length", mel.hop_length),
        ("win_length", mel.win_length),
        ("n_fft", mel.n_fft),
    ):
        value, i = _parse_kv(lines, i, f"mel.{key}")
        if int(value) != derived:
            raise InvalidInputError(
                f"{path}: stored mel.{key} {value} disagrees with the derived value {derived}"
            )
    value, i = _parse_kv(lines, i, "norm.floor")
    floor = float(value)
    value, i = _parse_kv(lines, i, "norm.shift")
    shift = float(value)
    value, i = _parse_kv(lines, i, "norm.scale")
    scale = float(value)

    value, i = _parse_kv(lines, i, "speakers")
    names = []
    for sid in range(int(value)):
        value, i = _parse_kv(lines, i, "speaker")
        sid_str, name = value.split(" ", 1)
        if int(sid_str) != sid:
            raise InvalidInputError(f"{path}: speaker ids out of order")
        names.append(name)

    value, i = _parse_kv(lines, i, "utterances")
    utterances = []
    for idx in range(int(value)):
        value, i = _parse_kv(lines, i, "utterance")
        fields = value.split(" ", 3)
        if len(fields) != 4 or int(fields[0]) != idx:
            raise InvalidInputError(f"{path}: malformed utterance record {value!r}")
        utterances.append(
            UtteranceRecord(path=fields[3], speaker_id=int(fields[1]), n_frames=int(fields[2]))
        )

    value, i = _parse_kv(lines, i, "segments")
    segments = []
    for _ in range(int(value)):
        value, i = _parse_kv(lines, i, "segment")
        utt, start, pad = (int(v) for v in value.split())
        segments.append(SegmentRecord(utterance=utt, start=start, pad=pad))

    return DatasetManifest(
        mel=mel,
        segment_frames=segment_frames,
        vocab=SpeakerVocab(tuple(names)),
        normalization=Normalization(floor=floor, shift=shift, scale=scale),
        utterances=tuple(utterances),
        segments=tuple(segments),
        root=path.parent,
    )


def read_waveform(path) -> tuple[np.ndarray, int]:
    """Read a WAV file as a mono float64 waveform in [-1, 1]."""
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64), int(rate)


def build_dataset(
    corpus_root, mel_params: MelParams, segment_frames: int, out_dir
) -> DatasetManifest:
    """Extract features for a per-speaker directory tree of WAV files.

    Writes one ``.mel`` file per utterance plus ``manifest.txt`` under
    ``out_dir`` and returns the manifest.  Unreadable files are skipped with
    a logged warning; normalization statistics cover the whole corpus.
    """
    corpus_root = Path(corpus_root)
    if not corpus_root.is_dir():
        raise InvalidInputError(f"corpus root {corpus_root} is not a directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    speaker_dirs = sorted(p for p in corpus_root.iterdir() if p.is_dir())
    if not speaker_dirs:
        raise InvalidInputError(f"corpus root {corpus_root} contains no speaker directories")
    vocab = SpeakerVocab(tuple(p.name for p in speaker_dirs))
    if len(vocab) < 2:
        logger.warning(
            "corpus has %d speaker(s); conversion needs at least 2 (training still possible)",
            len(vocab),
        )

    utterances: list[UtteranceRecord] = []
    segments: list[SegmentRecord] = []
    lo, hi = np.inf, -np.inf
    for sid, speaker_dir in enumerate(speaker_dirs):
        for wav_path in sorted(speaker_dir.glob("*.wav")):
            try:
                wave, rate = read_waveform(wav_path)
                utt = extract_mel(wave, rate, mel_params)
            except Exception as exc:  # noqa: BLE001 - skip-and-log per contract
                logger.warning("skipping %s: %s", wav_path, exc)
                continue
            rel = f"features/{speaker_dir.name}/{wav_path.stem}.mel"
            write_mel_file(out_dir / rel, utt.frames, sid)
            lo = min(lo, float(utt.frames.min()))
            hi = max(hi, float(utt.frames.max()))
            utt_idx = len(utterances)
            utterances.append(
                UtteranceRecord(path=rel, speaker_id=sid, n_frames=utt.n_frames)
            )
            count = math.ceil(utt.n_frames / segment_frames)
            for k in range(count):
                covered = min(segment_frames, utt.n_frames - k * segment_frames)
                segments.append(
                    SegmentRecord(
                        utterance=utt_idx,
                        start=k * segment_frames,
                        pad=segment_frames - covered,
                    )
                )

    if not utterances:
        raise InvalidInputError(f"corpus {corpus_root} yielded no usable audio")

    manifest = DatasetManifest(
        mel=mel_params,
        segment_frames=segment_frames,
        vocab=vocab,
        normalization=Normalization.from_range(mel_params.amplitude_floor, lo, hi),
        utterances=tuple(utterances),
        segments=tuple(segments),
        root=out_dir,
    )
    manifest.save(out_dir / MANIFEST_NAME)
    return manifest


def materialize_segment(manifest: DatasetManifest, index: int, frames_cache=None) -> MelSegment:
    """Load one segment (raw log-mel units, padding applied)."""
    rec = manifest.segments[index]
    utt = manifest.utterances[rec.utterance]
    if frames_cache is not None and rec.utterance in frames_cache:
        frames = frames_cache[rec.utterance]
    else:
        if manifest.root is None:
            raise InvalidInputError("manifest has no root directory to resolve paths")
        frames, _ = read_mel_file(manifest.root / utt.path)
        if frames_cache is not None:
            frames_cache[rec.utterance] = frames
    width = manifest.segment_frames
    chunk = frames[:, rec.start : rec.start + width]
    if chunk.shape[1] < width:
        tail = np.repeat(chunk[:, -1:], width - chunk.shape[1], axis=1)
        chunk = np.concatenate([chunk, tail], axis=1)
    return MelSegment(frames=chunk, speaker=utt.speaker_id)


def load_segments(
    manifest: DatasetManifest, normalize: bool = True, indices=None
) -> tuple[np.ndarray, np.ndarray]:
    """Materialize segments as ``(m, 80, T)`` float32 plus ``(m,)`` speaker ids.

    With ``normalize=True`` values are mapped onto [0, 1] using the
    manifest's normalization record.
    """
    if indices is None:
        indices = range(manifest.num_segments)
    cache: dict[int, np.ndarray] = {}
    stack = []
    speakers = []
    for i in indices:
        seg = materialize_segment(manifest, i, cache)
        frames = seg.frames.astype(np.float64)
        if normalize:
            frames = manifest.normalization.normalize(frames)
        stack.append(frames.astype(np.float32))
        speakers.append(seg.speaker)
    return np.stack(stack), np.asarray(speakers, dtype=np.int64)
