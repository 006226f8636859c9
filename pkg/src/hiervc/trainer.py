"""Training loop, run logging, and checkpoint persistence.

Checkpoint container layout (little-endian)::

    offset  size  field
    0       8     magic ``b"HVCKPT01"``
    8       4     u32 format version (currently 1)
    12      8     u64 header length in bytes
    20      ...   UTF-8 JSON header
    ...     ...   raw tensor payload (contiguous, as indexed by the header)
    end-32  32    SHA-256 of every preceding byte

The JSON header carries the model/train configs, the speaker vocabulary,
feature metadata, run history, and a tensor table (name, dtype, shape,
offset, nbytes).  Model parameters are stored under ``model.<name>``,
optimizer slots under ``opt.<param_index>.<slot>``, and optional averaged
parameters under ``ema.<name>``.  Loading verifies the checksum before
trusting any field and refuses unknown format versions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest, SpeakerVocab, load_segments
from .errors import (
    CheckpointIntegrityError,
    ConfigurationError,
    InvalidInputError,
    NumericalError,
    UnsupportedVersionError,
)
from .features import MelParams, Normalization
from .model import ModelConfig, SplitHierarchicalVAE, build_model
from .objective import elbo_beta

logger = logging.getLogger(__name__)

_CKPT_MAGIC = b"HVCKPT01"
_CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {
    "float32": (torch.float32, np.float32),
    "float64": (torch.float64, np.float64),
    "int64": (torch.int64, np.int64),
    "int32": (torch.int32, np.int32),
}


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters for one run."""

    batch_size: int = 8
    epochs: int = 200
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"
    beta: float = 1.0
    seed: int = 0
    grad_clip: float = 5.0
    checkpoint_every: int = 0
    kl_warmup_steps: int = 0
    ema_decay: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.kl_warmup_steps < 0:
            raise ConfigurationError("kl_warmup_steps must be non-negative")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay must lie in (0, 1)")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    rate: float
    distortion: float


@dataclass
class FeatureMeta:
    """Feature-space metadata a checkpoint carries for self-contained use."""

    mel: MelParams
    normalization: Normalization
    segment_frames: int

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "FeatureMeta":
        return cls(
            mel=manifest.mel,
            normalization=manifest.normalization,
            segment_frames=manifest.segment_frames,
        )


@dataclass
class Checkpoint:
    """A self-describing snapshot of a training run."""

    model_config: ModelConfig
    vocab: SpeakerVocab
    model_state: dict[str, torch.Tensor]
    train_config: TrainConfig | None = None
    optimizer_state: dict | None = None
    epoch: int = 0
    history: list[EpochStats] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    features: FeatureMeta | None = None
    ema_state: dict[str, torch.Tensor] | None = None

    def build_model(self, dtype: torch.dtype = torch.float32) -> SplitHierarchicalVAE:
        model = SplitHierarchicalVAE(self.model_config, len(self.vocab))
        model.load_state_dict(self.model_state)
        return model.to(dtype)


def snapshot(
    model: SplitHierarchicalVAE,
    vocab: SpeakerVocab,
    train_config: TrainConfig | None = None,
    **kwargs,
) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(
        model_config=model.config,
        vocab=vocab,
        model_state=state,
        train_config=train_config,
        **kwargs,
    )


def _grad_global_norm(parameters) -> float:
    total = 0.0
    for p in parameters:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def train(
    model: SplitHierarchicalVAE,
    segments: np.ndarray,
    speaker_ids: np.ndarray,
    vocab: SpeakerVocab,
    cfg: TrainConfig,
    out_dir=None,
    features: FeatureMeta | None = None,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
) -> Checkpoint:
    """Minimize ``beta * rate + distortion`` over normalized segments.

    Batch order, latent noise, and initialization all flow from explicit
    seeds, so a fixed (seed, config) pair reproduces the loss trajectory.
    Gradients are clipped to ``cfg.grad_clip`` global norm; a non-finite
    loss or gradient aborts with per-level diagnostics.
    """
    segments = np.asarray(segments, dtype=np.float32)
    speaker_ids = np.asarray(speaker_ids, dtype=np.int64)
    if segments.shape[0] != speaker_ids.shape[0]:
        raise InvalidInputError("segments and speaker ids disagree in length")
    if segments.shape[0] == 0:
        raise InvalidInputError("empty training set")
    if speaker_ids.size and int(speaker_ids.max()) >= len(vocab):
        raise ConfigurationError("speaker ids exceed the vocabulary size")
    if len(vocab) != model.num_speakers:
        raise ConfigurationError(
            f"model was built for {model.num_speakers} speakers, vocabulary has {len(vocab)}"
        )

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    data = torch.from_numpy(segments)[:, None]
    labels = torch.from_numpy(speaker_ids)
    count = data.shape[0]
    steps_per_epoch = math.ceil(count / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    scheduler = None
    if cfg.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)

    ema: dict[str, torch.Tensor] | None = None
    if cfg.ema_decay is not None:
        ema = {k: v.detach().clone() for k, v in model.state_dict().items()}

    history: list[EpochStats] = []
    log_lines: list[str] = []
    max_post_clip = 0.0
    global_step = 0
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        perm = torch.randperm(count, generator=gen)
        epoch_loss = epoch_rate = epoch_distortion = 0.0
        for lo in range(0, count, cfg.batch_size):
            batch = perm[lo : lo + cfg.batch_size]
            if cfg.kl_warmup_steps:
                ramp = min(1.0, (global_step + 1) / cfg.kl_warmup_steps)
            else:
                ramp = 1.0
            breakdown = elbo_beta(
                model, data[batch], labels[batch], beta=cfg.beta * ramp, rng=gen
            )
            loss = breakdown.loss
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            post_norm = _grad_global_norm(model.parameters())
            if not math.isfinite(post_norm):
                kls = ", ".join(f"{v.item():.4g}" for v in breakdown.per_level_kl.detach())
                raise NumericalError(
                    f"non-finite gradients at step {global_step} (per-level KL: {kls})"
                )
            max_post_clip = max(max_post_clip, post_norm)
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            if ema is not None:
                with torch.no_grad():
                    for name, value in model.state_dict().items():
                        ema[name].mul_(cfg.ema_decay).add_(value, alpha=1.0 - cfg.ema_decay)
            weight = len(batch) / count
            epoch_loss += loss.item() * weight
            epoch_rate += breakdown.rate.item() * weight
            epoch_distortion += breakdown.distortion.item() * weight
            global_step += 1
        stats = EpochStats(epoch=epoch, loss=epoch_loss, rate=epoch_rate, distortion=epoch_distortion)
        history.append(stats)
        line = (
            f"{stats.epoch}\t{stats.loss:.6f}\t{stats.rate:.6f}\t{stats.distortion:.6f}"
        )
        log_lines.append(line)
        logger.info(
            "epoch %d loss=%.4f rate=%.4f distortion=%.4f",
            stats.epoch,
            stats.loss,
            stats.rate,
            stats.distortion,
        )

        if (
            out_dir is not None
            and cfg.checkpoint_every
            and (epoch + 1 - start_epoch) % cfg.checkpoint_every == 0
        ):
            interim = _checkpoint_now(
                model, vocab, cfg, optimizer, epoch + 1, history, max_post_clip, features, ema
            )
            save_checkpoint(interim, out_dir / f"epoch_{epoch + 1:04d}.ckpt")

    final = _checkpoint_now(
        model,
        vocab,
        cfg,
        optimizer,
        start_epoch + cfg.epochs,
        history,
        max_post_clip,
        features,
        ema,
    )
    if out_dir is not None:
        save_checkpoint(final, out_dir / "final.ckpt")
        header = "epoch\tloss\trate\tdistortion\n"
        (out_dir / "train_log.tsv").write_text(header + "\n".join(log_lines) + "\n")
    return final


def _checkpoint_now(model, vocab, cfg, optimizer, epoch, history, max_post_clip, features, ema):
    ckpt = snapshot(
        model,
        vocab,
        train_config=cfg,
        optimizer_state=optimizer.state_dict(),
        epoch=epoch,
        history=list(history),
        metrics={"max_post_clip_grad_norm": max_post_clip},
        features=features,
    )
    if ema is not None:
        ckpt.ema_state = {k: v.clone() for k, v in ema.items()}
    return ckpt


def train_on_manifest(
    model: SplitHierarchicalVAE,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    out_dir=None,
    **kwargs,
) -> Checkpoint:
    """Convenience wrapper: materialize the manifest's segments and train."""
    segments, speaker_ids = load_segments(manifest)
    return train(
        model,
        segments,
        speaker_ids,
        manifest.vocab,
        cfg,
        out_dir=out_dir,
        features=FeatureMeta.from_manifest(manifest),
        **kwargs,
    )


# ---------------------------------------------------------------------- file I/O


def _dtype_name(t: torch.Tensor) -> str:
    name = str(t.dtype).removeprefix("torch.")
    if name not in _DTYPES:
        raise ConfigurationError(f"unsupported tensor dtype {name} in checkpoint")
    return name


def _collect_tensors(ckpt: Checkpoint) -> dict[str, torch.Tensor]:
    tensors = {f"model.{k}": v for k, v in ckpt.model_state.items()}
    if ckpt.optimizer_state is not None:
        for idx, slots in ckpt.optimizer_state.get("state", {}).items():
            for slot, value in slots.items():
                if isinstance(value, torch.Tensor):
                    tensors[f"opt.{idx}.{slot}"] = value
    if ckpt.ema_state is not None:
        for k, v in ckpt.ema_state.items():
            tensors[f"ema.{k}"] = v
    return tensors


def _mel_to_dict(mel: MelParams) -> dict:
    return asdict(mel)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the documented binary container; see the module docstring."""
    tensors = _collect_tensors(ckpt)
    table = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        dtype = _dtype_name(tensor)
        raw = tensor.numpy().astype(_DTYPES[dtype][1], copy=False).tobytes()
        table.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)

    opt_meta = None
    if ckpt.optimizer_state is not None:
        opt_meta = {
            "param_groups": ckpt.optimizer_state["param_groups"],
            "state_keys": sorted(int(k) for k in ckpt.optimizer_state.get("state", {})),
        }
    header = {
        "format_version": _CKPT_VERSION,
        "model_config": asdict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config) if ckpt.train_config else None,
        "vocab": list(ckpt.vocab.names),
        "epoch": ckpt.epoch,
        "history": [[h.epoch, h.loss, h.rate, h.distortion] for h in ckpt.history],
        "metrics": ckpt.metrics,
        "features": None
        if ckpt.features is None
        else {
            "mel": _mel_to_dict(ckpt.features.mel),
            "normalization": asdict(ckpt.features.normalization),
            "segment_frames": ckpt.features.segment_frames,
        },
        "optimizer": opt_meta,
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _CKPT_PREFIX.pack(_CKPT_MAGIC, _CKPT_VERSION, len(header_bytes))
    body += header_bytes + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + digest)


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint container."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _CKPT_PREFIX.size + 32:
        raise CheckpointIntegrityError(f"{path}: file too short to be a checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (corrupt or truncated)")
    magic, version, header_len = _CKPT_PREFIX.unpack_from(body)
    if magic != _CKPT_MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file")
    if version != _CKPT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint format version {version} is not supported"
        )
    header_start = _CKPT_PREFIX.size
    header = json.loads(body[header_start : header_start + header_len].decode("utf-8"))
    payload = body[header_start + header_len :]

    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointIntegrityError(f"{path}: tensor payload out of bounds")
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr).to(torch_dtype)

    model_config = ModelConfig(**header["model_config"])
    vocab = SpeakerVocab(tuple(header["vocab"]))
    model_state = {
        k.removeprefix("model."): v for k, v in tensors.items() if k.startswith("model.")
    }
    emb = model_state.get("embedding.weight")
    if emb is None or emb.shape[0] != len(vocab):
        raise ConfigurationError(
            f"{path}: speaker embedding does not match the stored vocabulary"
        )

    optimizer_state = None
    if header.get("optimizer"):
        state: dict[int, dict] = {}
        for idx in header["optimizer"]["state_keys"]:
            slots = {}
            prefix = f"opt.{idx}."
            for name, tensor in tensors.items():
                if name.startswith(prefix):
                    slots[name.removeprefix(prefix)] = tensor
            state[idx] = slots
        optimizer_state = {
            "state": state,
            "param_groups": header["optimizer"]["param_groups"],
        }

    features = None
    if header.get("features"):
        meta = header["features"]
        features = FeatureMeta(
            mel=MelParams(**meta["mel"]),
            normalization=Normalization(**meta["normalization"]),
            segment_frames=meta["segment_frames"],
        )

    ema_state = {
        k.removeprefix("ema."): v for k, v in tensors.items() if k.startswith("ema.")
    }
    train_config = (
        TrainConfig(**header["train_config"]) if header.get("train_config") else None
    )
    return Checkpoint(
        model_config=model_config,
        vocab=vocab,
        model_state=model_state,
        train_config=train_config,
        optimizer_state=optimizer_state,
        epoch=header["epoch"],
        history=[EpochStats(*row) for row in header["history"]],
        metrics=header.get("metrics", {}),
        features=features,
        ema_state=ema_state or None,
    )


def checkpoint_digest(path) -> str:
    """SHA-256 of a checkpoint file, for provenance records."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
