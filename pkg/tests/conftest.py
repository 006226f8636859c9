"""Shared fixtures: toy corpus, prepared dataset, and trained models.

The heavy fixtures (overfit run, beta sweep) are session-scoped because
several test modules and most acceptance criteria reuse them.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

torch.set_num_threads(1)  # two-core sandbox: oversubscription slows conv nets down

from hiervc import analysis
from hiervc.dataset import build_dataset, load_segments
from hiervc.features import MelParams
from hiervc.model import ModelConfig, build_model
from hiervc.objective import elbo_beta
from hiervc.toydata import synthesize_toy_corpus
from hiervc.trainer import FeatureMeta, TrainConfig, save_checkpoint, train

TOY_MEL = MelParams(sample_rate=16000)
SWEEP_BETAS = (0.5, 1.0, 4.0)


def tiny_model_config(**overrides) -> ModelConfig:
    """Sub-1000-parameter double-precision-friendly configuration."""
    values = dict(
        num_groups=2,
        split_level=1,
        groups_per_scale=(2,),
        base_channels=4,
        latent_channels=1,
        speaker_embedding_dim=2,
        cells_per_group=1,
        n_mels=8,
        frames=4,
    )
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    synthesize_toy_corpus(
        root, n_speakers=2, utterances_per_speaker=8, duration=1.2,
        sample_rate=16000, seed=7,
    )
    return root


@pytest.fixture(scope="session")
def toy_manifest(toy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    return build_dataset(toy_corpus, TOY_MEL, 40, out)


@pytest.fixture(scope="session")
def toy_arrays(toy_manifest):
    return load_segments(toy_manifest)


@pytest.fixture(scope="session")
def overfit_run(toy_manifest, tmp_path_factory):
    """Desk-scale model driven onto 8 toy segments for 500 steps.

    With 8 segments and batch size 8 every epoch is exactly one step.
    """
    segments, speakers = load_segments(toy_manifest)
    picks = [0, 3, 6, 9, 24, 27, 30, 33]  # both speakers, distinct utterances
    segs, spk = segments[picks], speakers[picks]
    model = build_model(ModelConfig(), len(toy_manifest.vocab), seed=101)
    with torch.no_grad():
        initial = elbo_beta(model, segs, spk, beta=0.1, rng=0)
    cfg = TrainConfig(batch_size=8, epochs=500, learning_rate=1e-3, beta=0.1, seed=13)
    ckpt = train(
        model, segs, spk, toy_manifest.vocab, cfg,
        features=FeatureMeta.from_manifest(toy_manifest),
    )
    path = tmp_path_factory.mktemp("overfit") / "overfit.ckpt"
    save_checkpoint(ckpt, path)
    return {
        "model": model,
        "checkpoint": ckpt,
        "checkpoint_path": path,
        "segments": segs,
        "speakers": spk,
        "initial_distortion": float(initial.distortion),
        "history": ckpt.history,
        "manifest": toy_manifest,
    }


@pytest.fixture(scope="session")
def sweep_run(toy_manifest, tmp_path_factory):
    """Shared-seed beta sweep over the toy corpus (criteria 6 and 7)."""
    out = tmp_path_factory.mktemp("sweep")
    cfg = TrainConfig(batch_size=8, epochs=50, learning_rate=1e-3, seed=11)
    sweep = analysis.rd_sweep(
        toy_manifest, ModelConfig(), SWEEP_BETAS, cfg,
        out_dir=out, holdout_fraction=0.25,
    )
    return {"sweep": sweep, "out_dir": out, "train_config": cfg}
