"""Rate/distortion sweeps, speaker probes, and report emission.

A sweep trains one model per beta with shared initialization seeds, data
order, and train/held-out split, so beta is the only thing that varies.
Reports are written as a fixed-format delimited table plus a rendered
figure; the table is byte-stable for a given sweep.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import matplotlib
import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .dataset import DatasetManifest, load_segments
from .errors import InvalidInputError, NumericalError
from .model import ModelConfig, SplitHierarchicalVAE, build_model
from .objective import RDPoint, rd_evaluate
from .trainer import FeatureMeta, TrainConfig, save_checkpoint, train

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

logger = logging.getLogger(__name__)

PROBE_TARGETS = ("invariant", "dependent", "mel")


@dataclass(frozen=True)
class SweepEntry:
    beta: float
    point: RDPoint
    checkpoint: str | None = None


@dataclass
class SweepResult:
    """One rate/distortion curve measurement."""

    entries: list[SweepEntry]
    dataset_fingerprint: str
    seed: int

    def __post_init__(self):
        betas = [e.beta for e in self.entries]
        if any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
            raise InvalidInputError(f"sweep betas must be strictly increasing, got {betas}")

    @property
    def betas(self) -> list[float]:
        return [e.beta for e in self.entries]


class SweepMonotonicityError(NumericalError):
    """A sweep point stayed non-monotone after its re-seed retry.

    ``partial`` holds the entries measured so far so a failed sweep can
    still be reported.
    """

    def __init__(self, message: str, partial: SweepResult):
        super().__init__(message)
        self.partial = partial


def _derive(seed: int, label: str) -> int:
    import hashlib

    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def split_dataset(
    manifest_or_arrays, holdout_fraction: float, seed: int
) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Deterministic train/held-out split over segments."""
    if isinstance(manifest_or_arrays, DatasetManifest):
        segments, speakers = load_segments(manifest_or_arrays)
    else:
        segments, speakers = manifest_or_arrays
    count = segments.shape[0]
    held = max(1, int(round(count * holdout_fraction))) if holdout_fraction > 0 else 0
    if held >= count:
        raise InvalidInputError("holdout fraction leaves no training data")
    order = np.random.default_rng(seed).permutation(count)
    eval_idx, train_idx = np.sort(order[:held]), np.sort(order[held:])
    return (
        (segments[train_idx], speakers[train_idx]),
        (segments[eval_idx], speakers[eval_idx]),
    )


def rd_sweep(
    data,
    model_config: ModelConfig,
    betas,
    train_config: TrainConfig,
    vocab=None,
    out_dir=None,
    holdout_fraction: float = 0.25,
    require_monotone: bool = True,
    max_retries: int = 1,
    features: FeatureMeta | None = None,
) -> SweepResult:
    """Train one model per beta and measure held-out rate/distortion.

    All runs share the init seed, the batch order seed, and the data split;
    rows come back sorted by beta.  When ``require_monotone`` is set, a
    point that breaks the expected direction (rate non-increasing,
    distortion non-decreasing in beta) is retrained once with a derived
    re-seed; if it still breaks, the sweep fails with partial results
    attached.
    """
    betas = sorted(float(b) for b in betas)
    if not betas:
        raise InvalidInputError("sweep needs at least one beta")
    if any(b < 0 for b in betas):
        raise InvalidInputError("betas must be non-negative")
    if len(set(betas)) != len(betas):
        raise InvalidInputError("betas must be distinct")

    if isinstance(data, DatasetManifest):
        fingerprint = data.fingerprint()
        if vocab is None:
            vocab = data.vocab
        if features is None:
            features = FeatureMeta.from_manifest(data)
    else:
        fingerprint = "arrays"
    if vocab is None:
        raise InvalidInputError("vocab is required when sweeping over raw arrays")

    (train_x, train_y), (eval_x, eval_y) = split_dataset(
        data, holdout_fraction, _derive(train_config.seed, "split")
    )
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    entries: list[SweepEntry] = []
    prev: RDPoint | None = None
    for beta in betas:
        attempt = 0
        while True:
            bump = 0 if attempt == 0 else _derive(train_config.seed, f"retry{beta}:{attempt}")
            cfg = replace(train_config, beta=beta, seed=train_config.seed + bump)
            model = build_model(
                model_config, len(vocab), seed=_derive(cfg.seed, "init")
            )
            ckpt = train(model, train_x, train_y, vocab, cfg, features=features)
            point = rd_evaluate(
                model, (eval_x, eval_y), beta=beta, seed=_derive(train_config.seed, "eval")
            )
            monotone = prev is None or (
                point.rate <= prev.rate and point.distortion >= prev.distortion
            )
            if monotone or not require_monotone or attempt >= max_retries:
                break
            logger.warning(
                "beta=%g broke monotonicity (rate %.3f vs %.3f, distortion %.3f vs %.3f); retrying",
                beta,
                point.rate,
                prev.rate,
                point.distortion,
                prev.distortion,
            )
            attempt += 1
        ckpt_path = None
        if out_dir is not None:
            ckpt_path = str(out_dir / f"beta_{beta:g}.ckpt")
            save_checkpoint(ckpt, ckpt_path)
        entries.append(SweepEntry(beta=beta, point=point, checkpoint=ckpt_path))
        if require_monotone and prev is not None and not (
            point.rate <= prev.rate and point.distortion >= prev.distortion
        ):
            raise SweepMonotonicityError(
                f"beta={beta:g} stayed non-monotone after {max_retries} retry/retries "
                f"(rate {point.rate:.4f} vs {prev.rate:.4f}, "
                f"distortion {point.distortion:.4f} vs {prev.distortion:.4f})",
                SweepResult(entries, fingerprint, train_config.seed),
            )
        prev = point
    return SweepResult(entries=entries, dataset_fingerprint=fingerprint, seed=train_config.seed)


@dataclass(frozen=True)
class ProbeReport:
    """Held-out accuracy of a linear speaker probe on one representation."""

    target: str
    accuracy: float
    chance: float
    speaker_count: int
    n_train: int
    n_test: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise InvalidInputError("accuracy must lie in [0, 1]")

    @property
    def std_error(self) -> float:
        """Binomial standard error of the reported accuracy."""
        p = min(max(self.accuracy, 1e-12), 1 - 1e-12)
        return float(np.sqrt(p * (1 - p) / self.n_test))

    @property
    def chance_std_error(self) -> float:
        return float(np.sqrt(self.chance * (1 - self.chance) / self.n_test))


def _probe_features(model, segments, speakers, target, batch_size=64) -> np.ndarray:
    split = model.config.split_level
    if target == "mel":
        return segments.reshape(segments.shape[0], -1)
    rows = []
    with torch.no_grad():
        for lo in range(0, segments.shape[0], batch_size):
            batch = segments[lo : lo + batch_size]
            labels = speakers[lo : lo + batch_size]
            result = model.encode(batch, labels, mean_only=True)
            if target == "invariant":
                groups = result.latents.invariant
            else:
                groups = result.latents.dependent
            flat = torch.cat([g.reshape(g.shape[0], -1) for g in groups], dim=1)
            rows.append(flat.cpu().numpy())
    return np.concatenate(rows, axis=0)


def speaker_probe(
    model: SplitHierarchicalVAE,
    data,
    target: str = "invariant",
    split_seed: int = 0,
    permute_labels: bool = False,
    test_fraction: float = 0.5,
    max_iter: int = 200,
) -> ProbeReport:
    """Fit a small multinomial linear classifier from a representation to speakers.

    Representations are flattened posterior means of the speaker-invariant
    levels, the speaker-dependent levels, or the raw normalized mel input.
    The classifier budget is fixed (standardized features, L2-regularized
    logistic regression, capped iterations) so accuracy measures linearly
    accessible speaker information, not classifier capacity.
    """
    if target not in PROBE_TARGETS:
        raise InvalidInputError(f"probe target must be one of {PROBE_TARGETS}")
    if isinstance(data, DatasetManifest):
        segments, speakers = load_segments(data)
    else:
        segments, speakers = data
        segments = np.asarray(segments, dtype=np.float32)
        speakers = np.asarray(speakers, dtype=np.int64)
    classes = np.unique(speakers)
    if classes.size < 2:
        raise InvalidInputError("speaker probe needs at least 2 speakers")
    if target == "dependent" and model.config.split_level == model.config.num_groups:
        raise InvalidInputError("no speaker-dependent levels when the split equals L")

    features = _probe_features(model, segments, speakers, target)
    rng = np.random.default_rng(split_seed)
    labels = speakers.copy()
    if permute_labels:
        labels = rng.permutation(labels)
    order = rng.permutation(len(labels))
    n_test = max(1, int(round(len(labels) * test_fraction)))
    test_idx, train_idx = order[:n_test], order[n_test:]
    if train_idx.size == 0 or np.unique(labels[train_idx]).size < 2:
        raise InvalidInputError("probe split left fewer than 2 speakers in training data")

    scaler = StandardScaler().fit(features[train_idx])
    clf = LogisticRegression(max_iter=max_iter, C=1.0)
    clf.fit(scaler.transform(features[train_idx]), labels[train_idx])
    accuracy = float(clf.score(scaler.transform(features[test_idx]), labels[test_idx]))
    return ProbeReport(
        target=target,
        accuracy=accuracy,
        chance=1.0 / classes.size,
        speaker_count=int(classes.size),
        n_train=int(train_idx.size),
        n_test=int(test_idx.size),
    )


# ---------------------------------------------------------------------- reports


def rd_table(sweep: SweepResult) -> str:
    """Fixed-format sweep table: header then beta/rate/distortion rows."""
    lines = ["beta\trate\tdistortion"]
    for entry in sweep.entries:
        lines.append(
            f"{entry.beta:.6f}\t{entry.point.rate:.6f}\t{entry.point.distortion:.6f}"
        )
    return "\n".join(lines) + "\n"


def emit_rd_plot(sweep: SweepResult, out_dir, stem: str = "rd_sweep") -> tuple[Path, Path]:
    """Write the sweep as a scatter figure plus its companion table.

    The x axis is rate (KL) and the y axis distortion (reconstruction
    error); each point is annotated with its beta.  Returns the
    ``(figure, table)`` paths.
    """
    if not sweep.entries:
        raise InvalidInputError("cannot plot an empty sweep")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / f"{stem}.tsv"
    table_path.write_text(rd_table(sweep), encoding="utf-8")

    rates = [e.point.rate for e in sweep.entries]
    distortions = [e.point.distortion for e in sweep.entries]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(rates, distortions, color="tab:gray", linewidth=1, zorder=1)
    ax.scatter(rates, distortions, color="tab:blue", zorder=2)
    for entry in sweep.entries:
        ax.annotate(
            f"beta={entry.beta:g}",
            (entry.point.rate, entry.point.distortion),
            textcoords="offset points",
            xytext=(6, 4),
            fontsize=9,
        )
    ax.set_xlabel("rate (KL, nats per segment)")
    ax.set_ylabel("distortion (reconstruction, nats per segment)")
    ax.set_title("rate-distortion sweep")
    fig.tight_layout()
    plot_path = out_dir / f"{stem}.png"
    fig.savefig(plot_path, dpi=150)
    plt.close(fig)
    return plot_path, table_path


def emit_probe_report(reports: list[ProbeReport], out_dir, stem: str = "probe") -> tuple[Path, Path]:
    """Write probe accuracies as a table plus a bar figure against chance."""
    if not reports:
        raise InvalidInputError("no probe reports to emit")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["target\taccuracy\tchance\tspeakers\tn_test"]
    for r in reports:
        lines.append(
            f"{r.target}\t{r.accuracy:.6f}\t{r.chance:.6f}\t{r.speaker_count}\t{r.n_test}"
        )
    table_path = out_dir / f"{stem}.tsv"
    table_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    fig, ax = plt.subplots(figsize=(5, 4))
    xs = np.arange(len(reports))
    ax.bar(xs, [r.accuracy for r in reports], color="tab:blue", label="probe accuracy")
    ax.axhline(reports[0].chance, color="tab:red", linestyle="--", label="chance")
    ax.set_xticks(xs, [r.target for r in reports])
    ax.set_ylim(0, 1)
    ax.set_ylabel("held-out accuracy")
    ax.set_title("speaker probe")
    ax.legend()
    fig.tight_layout()
    plot_path = out_dir / f"{stem}.png"
    fig.savefig(plot_path, dpi=150)
    plt.close(fig)
    return plot_path, table_path


def emit_benchmark_report(report, out_dir, stem: str = "bench") -> tuple[Path, Path]:
    """Write benchmark timings as a table plus a time-vs-count figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / f"{stem}.tsv"
    table_path.write_text(report.table(), encoding="utf-8")

    fig, ax = plt.subplots(figsize=(5, 4))
    counts = report.segment_counts
    medians = [sorted(report.seconds_per_run[n])[len(report.seconds_per_run[n]) // 2] for n in counts]
    ax.plot(counts, medians, marker="o")
    ax.set_xlabel("segments converted")
    ax.set_ylabel("wall time (s)")
    ax.set_title(
        f"conversion throughput ({report.seconds_per_segment * 1e3:.1f} ms/segment)"
    )
    fig.tight_layout()
    plot_path = out_dir / f"{stem}.png"
    fig.savefig(plot_path, dpi=150)
    plt.close(fig)
    return plot_path, table_path
