"""Network structure tests: shapes, determinism, the residual-posterior
identity, the speaker split, and conditional instance normalization."""

import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from hiervc.errors import ConfigurationError, InvalidInputError
from hiervc.model import (
    ConditionalInstanceNorm,
    DiagonalGaussian,
    LatentHierarchy,
    ModelConfig,
    build_model,
    sample_gaussian,
)

DESK = ModelConfig()


@pytest.fixture(scope="module")
def desk_model():
    return build_model(DESK, num_speakers=2, seed=0)


@pytest.fixture(scope="module")
def segment():
    return np.random.default_rng(0).uniform(0, 1, size=(80, 40)).astype(np.float32)


class TestConfig:
    def test_split_bounds_enforced(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(num_groups=4, split_level=5, groups_per_scale=(4,))
        with pytest.raises(ConfigurationError):
            ModelConfig(num_groups=4, split_level=0, groups_per_scale=(4,))

    def test_group_sum_must_match(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(num_groups=5, groups_per_scale=(3, 3))

    def test_geometry_must_divide(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(
                num_groups=2, split_level=1, groups_per_scale=(1, 1),
                n_mels=80, frames=42,
            )

    def test_latent_shapes_follow_scales(self):
        assert DESK.latent_shape(1) == (4, 10, 5)
        assert DESK.latent_shape(4) == (4, 20, 10)
        assert DESK.latent_shape(8) == (4, 40, 20)


class TestInitModel:
    def test_same_seed_same_parameters(self):
        a = build_model(DESK, 2, seed=5)
        b = build_model(DESK, 2, seed=5)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb), name

    def test_different_seed_differs(self):
        a = build_model(tiny_model_config(), 2, seed=1)
        b = build_model(tiny_model_config(), 2, seed=2)
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_full_split_makes_prior_unconditional(self):
        cfg = tiny_model_config(split_level=2)  # K == L
        model = build_model(cfg, 3, seed=0)
        x = np.random.default_rng(1).uniform(0, 1, (8, 4)).astype(np.float32)
        z = model.encode(x, 0, rng=0).latents.groups
        for level in range(1, 3):
            params = [model.prior_params(z[: level - 1], y, level) for y in (0, 1, 2)]
            for other in params[1:]:
                assert torch.equal(params[0].mean, other.mean)
                assert torch.equal(params[0].log_variance, other.log_variance)

    def test_single_level_degenerate_is_flat_vae(self):
        cfg = tiny_model_config(num_groups=1, split_level=1, groups_per_scale=(1,))
        model = build_model(cfg, 2, seed=0)
        x = np.random.default_rng(2).uniform(0, 1, (8, 4)).astype(np.float32)
        result = model.encode(x, 0, rng=0)
        assert len(result.latents.groups) == 1
        prior = result.priors[0]
        assert torch.all(prior.mean == 0) and torch.all(prior.log_variance == 0)


class TestEncodeDecode:
    def test_shapes_match_config(self, desk_model, segment):
        result = desk_model.encode(segment, 0, rng=1)
        assert len(result.latents.groups) == DESK.num_groups
        for level, z in enumerate(result.latents.groups, start=1):
            assert tuple(z.shape[1:]) == DESK.latent_shape(level)

    def test_encode_deterministic(self, desk_model, segment):
        a = desk_model.encode(segment, 0, rng=7)
        b = desk_model.encode(segment, 0, rng=7)
        for za, zb in zip(a.latents.groups, b.latents.groups):
            assert torch.equal(za, zb)

    def test_zero_residual_gives_prior(self, desk_model, segment):
        result = desk_model.encode(segment, 1, rng=3, zero_residual=True)
        for q, p in zip(result.posteriors, result.priors):
            assert torch.equal(q.mean, p.mean)
            assert torch.equal(q.log_variance, p.log_variance)

    def test_decode_shape_and_determinism(self, desk_model, segment):
        latents = desk_model.encode(segment, 0, rng=1).latents
        a = desk_model.decode(latents, 1)
        b = desk_model.decode(latents, 1)
        assert tuple(a.shape) == (1, 1, 80, 40)
        assert torch.equal(a, b)

    def test_decode_needs_all_groups(self, desk_model, segment):
        latents = desk_model.encode(segment, 0, rng=1).latents
        with pytest.raises(InvalidInputError):
            desk_model.decode(latents.groups[:-1], 1)

    def test_unknown_speaker_rejected(self, desk_model, segment):
        with pytest.raises(InvalidInputError):
            desk_model.encode(segment, 2, rng=0)
        with pytest.raises(InvalidInputError):
            desk_model.encode(segment, -1, rng=0)

    def test_wrong_geometry_rejected(self, desk_model):
        with pytest.raises(InvalidInputError):
            desk_model.encode(np.zeros((80, 48), dtype=np.float32), 0)

    @pytest.mark.parametrize(
        "cfg",
        [
            tiny_model_config(),
            tiny_model_config(num_groups=3, split_level=2, groups_per_scale=(1, 2), frames=8),
            tiny_model_config(num_groups=4, split_level=4, groups_per_scale=(2, 2), frames=8),
        ],
    )
    def test_shape_closure_across_configs(self, cfg):
        model = build_model(cfg, 2, seed=0)
        x = np.random.default_rng(0).uniform(0, 1, (cfg.n_mels, cfg.frames)).astype(np.float32)
        latents = model.encode(x, 0, rng=0).latents
        out = model.decode(latents, 1)
        assert tuple(out.shape) == (1, 1, cfg.n_mels, cfg.frames)


class TestPrior:
    def test_level_one_is_standard_normal(self, desk_model):
        prior = desk_model.prior_params([], None, 1)
        assert torch.all(prior.mean == 0)
        assert torch.all(prior.log_variance == 0)

    def test_speaker_free_below_split(self, desk_model, segment):
        z = desk_model.encode(segment, 0, rng=2).latents.groups
        for level in range(1, DESK.split_level + 1):
            a = desk_model.prior_params(z[: level - 1], 0, level)
            b = desk_model.prior_params(z[: level - 1], 1, level)
            assert torch.equal(a.mean, b.mean)
            assert torch.equal(a.log_variance, b.log_variance)
            # no speaker needed at all on this path
            c = desk_model.prior_params(z[: level - 1], None, level)
            assert torch.equal(a.mean, c.mean)

    def test_wrong_prefix_length_rejected(self, desk_model, segment):
        z = desk_model.encode(segment, 0, rng=2).latents.groups
        with pytest.raises(InvalidInputError):
            desk_model.prior_params(z[:3], 0, 3)
        with pytest.raises(InvalidInputError):
            desk_model.prior_params([], 0, 2)

    def test_speaker_required_past_split(self, desk_model, segment):
        z = desk_model.encode(segment, 0, rng=2).latents.groups
        with pytest.raises(InvalidInputError):
            desk_model.prior_params(z[: DESK.split_level], None, DESK.split_level + 1)


class TestConditionalInstanceNorm:
    def _site(self, channels=6, dim=8, seed=0):
        torch.manual_seed(seed)
        site = ConditionalInstanceNorm(channels, dim, eps=1e-5)
        emb = torch.randn(2, dim)
        return site, emb

    def test_constant_channel_maps_to_shift(self):
        site, emb = self._site()
        x = torch.full((1, 6, 5, 7), 3.25)
        out = site(x, emb[:1])
        shift = site.affine(emb[:1])[:, 6:]
        assert torch.allclose(out, shift[:, :, None, None].expand_as(out), atol=1e-5)

    def test_unit_affine_whitens(self):
        site, _ = self._site()
        x = torch.randn(3, 6, 10, 12)
        normed = site.normalize(x)
        mean = normed.mean(dim=(2, 3))
        var = normed.var(dim=(2, 3), correction=0)
        assert torch.allclose(mean, torch.zeros_like(mean), atol=1e-4)
        assert torch.allclose(var, torch.ones_like(var), atol=1e-4)

    def test_distinct_embeddings_give_distinct_outputs(self):
        site, emb = self._site()
        x = torch.randn(1, 6, 5, 7)
        a = site(x, emb[:1])
        b = site(x, emb[1:])
        assert not torch.equal(a, b)

    def test_missing_conditioning_rejected(self):
        site, _ = self._site()
        with pytest.raises(InvalidInputError):
            site(torch.randn(1, 6, 5, 7), None)


class TestSampling:
    def test_tiny_variance_collapses_to_mean(self):
        mean = torch.randn(4, 5)
        dist = DiagonalGaussian(mean, torch.full_like(mean, -30.0))
        assert torch.allclose(sample_gaussian(dist, rng=0), mean, atol=1e-5)

    def test_seeded_sample_reproducible(self):
        dist = DiagonalGaussian(torch.zeros(8), torch.zeros(8))
        assert torch.equal(sample_gaussian(dist, rng=4), sample_gaussian(dist, rng=4))

    def test_sample_mean_matches_parameter(self):
        n = 100_000
        dist = DiagonalGaussian(torch.full((n,), 1.5), torch.full((n,), 0.4))
        draws = sample_gaussian(dist, rng=9)
        std_error = float(dist.std[0]) / np.sqrt(n)
        assert abs(float(draws.mean()) - 1.5) < 3 * std_error

    def test_gradients_flow_through_parameters(self):
        mean = torch.zeros(6, requires_grad=True)
        logvar = torch.zeros(6, requires_grad=True)
        out = sample_gaussian(DiagonalGaussian(mean, logvar), rng=1).sum()
        out.backward()
        assert mean.grad is not None and torch.all(mean.grad == 1.0)
        assert logvar.grad is not None

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            DiagonalGaussian(torch.zeros(3), torch.zeros(4))


class TestLatentHierarchy:
    def test_split_views(self):
        groups = [torch.zeros(1, 1, 2, 2) for _ in range(4)]
        hierarchy = LatentHierarchy(groups, split=3)
        assert len(hierarchy.invariant) == 3
        assert len(hierarchy.dependent) == 1

    def test_bad_split_rejected(self):
        with pytest.raises(InvalidInputError):
            LatentHierarchy([torch.zeros(1)], split=2)
