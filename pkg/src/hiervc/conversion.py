"""Segment-wise voice conversion and conversion-speed benchmarking.

Conversion infers the speaker-invariant latent levels from the source
segment, completes the remaining levels from the target-conditioned prior,
and decodes under the target speaker.  In the default mean mode every
expectation is replaced by its mean, so the output is deterministic; a
seeded sampling mode is kept for diversity experiments.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import SpeakerVocab
from .errors import InvalidInputError
from .features import MelSegment, MelUtterance, Normalization, concat_segments, segment_utterance
from .model import LatentHierarchy, SplitHierarchicalVAE, as_generator
from .trainer import FeatureMeta, checkpoint_digest, load_checkpoint

# Single-segment latency reported for this model family on a Tesla T4 GPU,
# recorded in benchmark reports for context only (never asserted).
REFERENCE_GPU_SECONDS_PER_SEGMENT = 0.172

_MODES = ("mean", "sample")


@dataclass(frozen=True)
class ConversionRequest:
    """One conversion task: who is speaking, who should appear to speak."""

    source_speaker: str | int
    target_speaker: str | int
    mode: str = "mean"
    seed: int | None = None
    segment_wise: bool = True

    def __post_init__(self):
        if self.mode not in _MODES:
            raise InvalidInputError(f"mode must be one of {_MODES}, got {self.mode!r}")


@dataclass
class SegmentConversion:
    """Converted frames plus the latent hierarchy used to produce them."""

    frames: np.ndarray
    latents: LatentHierarchy


class VoiceConverter:
    """Bundles a trained model with the feature space it was trained in."""

    def __init__(
        self,
        model: SplitHierarchicalVAE,
        vocab: SpeakerVocab,
        normalization: Normalization,
        segment_frames: int,
        feature_meta: FeatureMeta | None = None,
        model_digest: str | None = None,
    ):
        self.model = model
        self.vocab = vocab
        self.normalization = normalization
        self.segment_frames = segment_frames
        self.feature_meta = feature_meta
        self.model_digest = model_digest

    @classmethod
    def from_checkpoint(cls, path) -> "VoiceConverter":
        ckpt = load_checkpoint(path)
        if ckpt.features is None:
            raise InvalidInputError(
                f"{path}: checkpoint carries no feature metadata; convert requires one "
                "produced by training on a prepared dataset"
            )
        return cls(
            model=ckpt.build_model(),
            vocab=ckpt.vocab,
            normalization=ckpt.features.normalization,
            segment_frames=ckpt.features.segment_frames,
            feature_meta=ckpt.features,
            model_digest=checkpoint_digest(path),
        )

    def resolve_speaker(self, speaker: str | int) -> int:
        if isinstance(speaker, str):
            return self.vocab.id_of(speaker)
        sid = int(speaker)
        if not 0 <= sid < len(self.vocab):
            raise InvalidInputError(
                f"speaker id {sid} out of range; known speakers: "
                + ", ".join(self.vocab.names)
            )
        return sid

    def _to_normalized(self, frames: np.ndarray) -> np.ndarray:
        return self.normalization.normalize(frames).astype(np.float32)

    def _from_normalized(self, grid: torch.Tensor) -> np.ndarray:
        values = grid.detach().cpu().numpy().clip(0.0, 1.0)
        return self.normalization.denormalize(values).astype(np.float32)

    def convert_segment_detailed(
        self, segment: MelSegment, source: str | int, target: str | int,
        mode: str = "mean", rng=None,
    ) -> SegmentConversion:
        """Convert one segment, returning the latents for inspection."""
        if mode not in _MODES:
            raise InvalidInputError(f"mode must be one of {_MODES}, got {mode!r}")
        if segment.n_frames != self.segment_frames:
            raise InvalidInputError(
                f"segment has {segment.n_frames} frames, model expects {self.segment_frames}"
            )
        ys = self.resolve_speaker(source)
        yt = self.resolve_speaker(target)
        with torch.no_grad():
            output, latents = self.model.convert_forward(
                self._to_normalized(segment.frames),
                ys,
                yt,
                use_means=(mode == "mean"),
                rng=rng,
            )
        return SegmentConversion(
            frames=self._from_normalized(output[0, 0]), latents=latents
        )

    def convert_segment(
        self, segment: MelSegment, source: str | int, target: str | int,
        mode: str = "mean", rng=None,
    ) -> MelSegment:
        detail = self.convert_segment_detailed(segment, source, target, mode, rng)
        return MelSegment(frames=detail.frames, speaker=self.resolve_speaker(target))

    def convert_utterance(
        self, utterance: MelUtterance, request: ConversionRequest
    ) -> MelUtterance:
        """Segment, convert each window, and reassemble to the input length."""
        target_id = self.resolve_speaker(request.target_speaker)
        rng = as_generator(request.seed) if request.mode == "sample" else None
        if request.segment_wise:
            segments, pads = segment_utterance(utterance, self.segment_frames)
            converted = [
                self.convert_segment(seg, request.source_speaker, request.target_speaker,
                                     mode=request.mode, rng=rng)
                for seg in segments
            ]
            out = concat_segments(converted, pads)
        else:
            out = self._convert_whole(utterance, request, rng)
        return MelUtterance(frames=out.frames, speaker=target_id, source_id=utterance.source_id)

    def _convert_whole(self, utterance, request, rng) -> MelUtterance:
        # One pass over the whole utterance; the network is convolutional in
        # time but needs the width padded to the deepest downsampling factor.
        factor = 1 << self.model.config.num_scales
        frames = utterance.frames
        pad = (-frames.shape[1]) % factor
        if pad:
            frames = np.concatenate([frames, np.repeat(frames[:, -1:], pad, axis=1)], axis=1)
        ys = self.resolve_speaker(request.source_speaker)
        yt = self.resolve_speaker(request.target_speaker)
        with torch.no_grad():
            output, _ = self.model.convert_forward(
                self._to_normalized(frames),
                ys,
                yt,
                use_means=(request.mode == "mean"),
                rng=rng,
            )
        converted = self._from_normalized(output[0, 0])
        return MelUtterance(frames=converted[:, : utterance.n_frames], speaker=yt)

    def reconstruct_segment(self, segment: MelSegment, speaker: str | int) -> MelSegment:
        """Posterior-mean reconstruction, the baseline for self-conversion."""
        sid = self.resolve_speaker(speaker)
        with torch.no_grad():
            output = self.model.reconstruct(self._to_normalized(segment.frames), sid)
        return MelSegment(frames=self._from_normalized(output[0, 0]), speaker=sid)

    def provenance(self, request: ConversionRequest, source_path=None) -> dict:
        """Metadata written alongside converted output files."""
        return {
            "source_speaker": str(request.source_speaker),
            "target_speaker": str(request.target_speaker),
            "mode": request.mode,
            "seed": request.seed,
            "segment_wise": request.segment_wise,
            "model_checksum": self.model_digest,
            "input": None if source_path is None else str(source_path),
        }


@dataclass
class BenchmarkReport:
    """Wall-clock conversion timing over warmed-up repeated runs."""

    segment_counts: list[int]
    seconds_per_run: dict[int, list[float]]
    seconds_per_segment: float
    seconds_per_speech_second: float
    linearity_ratio: float
    reference_gpu_seconds_per_segment: float = REFERENCE_GPU_SECONDS_PER_SEGMENT
    notes: str = (
        "conversion is a single non-autoregressive pass per segment: "
        "latency is independent of content and linear in segment count"
    )

    def table(self) -> str:
        lines = ["segments\tmedian_seconds\tmin_seconds\tmax_seconds"]
        for n in self.segment_counts:
            runs = sorted(self.seconds_per_run[n])
            median = runs[len(runs) // 2]
            lines.append(f"{n}\t{median:.6f}\t{runs[0]:.6f}\t{runs[-1]:.6f}")
        return "\n".join(lines) + "\n"


def benchmark_conversion(
    converter: VoiceConverter,
    segment_count: int = 10,
    repeats: int = 3,
    seed: int = 0,
    frame_seconds: float | None = None,
) -> BenchmarkReport:
    """Time mean-mode conversion for ``segment_count`` and twice that.

    Two warm-up conversions run first; the report carries per-run times, the
    median per-segment latency, and the ratio between the doubled and single
    workloads (2.0 for perfectly linear scaling).
    """
    if segment_count < 1:
        raise InvalidInputError("segment_count must be at least 1")
    if len(converter.vocab) < 2:
        raise InvalidInputError("benchmarking conversion needs at least 2 speakers")
    rng = np.random.default_rng(seed)
    width = converter.segment_frames
    lo, hi = converter.normalization.shift, converter.normalization.shift + 1.0 / converter.normalization.scale

    def random_segment() -> MelSegment:
        values = rng.uniform(lo, hi, size=(80, width)).astype(np.float32)
        return MelSegment(frames=values, speaker=0)

    counts = [segment_count, 2 * segment_count]
    batches = {n: [random_segment() for _ in range(n)] for n in counts}

    for _ in range(2):  # warm-up
        converter.convert_segment(batches[counts[0]][0], 0, 1)

    timings: dict[int, list[float]] = {n: [] for n in counts}
    for _ in range(repeats):
        for n in counts:
            start = time.perf_counter()
            for seg in batches[n]:
                converter.convert_segment(seg, 0, 1)
            timings[n].append(time.perf_counter() - start)

    medians = {n: sorted(t)[len(t) // 2] for n, t in timings.items()}
    per_segment = medians[segment_count] / segment_count
    if frame_seconds is None:
        meta = converter.feature_meta
        frame_seconds = (meta.mel.hop_ms / 1000.0) if meta else 0.0125
    speech_seconds = width * frame_seconds
    return BenchmarkReport(
        segment_counts=counts,
        seconds_per_run=timings,
        seconds_per_segment=per_segment,
        seconds_per_speech_second=per_segment / speech_seconds if speech_seconds else float("nan"),
        linearity_ratio=medians[counts[1]] / medians[counts[0]],
    )
