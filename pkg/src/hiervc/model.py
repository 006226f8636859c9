"""Hierarchical VAE with a speaker-split latent hierarchy.

The network has three parts sharing one top-down trunk:

* a bottom-up encoder tower over the input mel segment, speaker-conditioned
  at every normalization site;
* a top-down generative trunk that emits one latent group per level; levels
  up to the split index run through speaker-free cells so their priors are
  exactly independent of the speaker, levels past the split (and the decoder
  tail) are conditioned through conditional instance normalization;
* posterior readouts that predict *offsets* to the prior parameters, so a
  zeroed readout makes every posterior coincide with its prior.

All sampling goes through :func:`sample_gaussian` with an explicit RNG; the
network itself is a deterministic function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, InvalidInputError


def as_generator(rng) -> torch.Generator | None:
    """Accept ``None``, an int seed, or a live generator."""
    if rng is None or isinstance(rng, torch.Generator):
        return rng
    gen = torch.Generator()
    gen.manual_seed(int(rng))
    return gen


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``groups_per_scale`` lists latent groups per spatial scale in top-down
    order (deepest scale first); its length is the number of scales and its
    sum the number of latent groups L.  ``split_level`` is the index K
    separating speaker-invariant groups (level <= K) from speaker-dependent
    ones.  Channel widths double with each downsampling.
    """

    num_groups: int = 8
    split_level: int = 3
    groups_per_scale: tuple[int, ...] = (3, 3, 2)
    base_channels: int = 32
    latent_channels: int = 4
    speaker_embedding_dim: int = 64
    cells_per_group: int = 1
    n_mels: int = 80
    frames: int = 40
    cin_epsilon: float = 1e-5
    logvar_min: float = -8.0
    logvar_max: float = 4.0
    separable: bool = True

    def __post_init__(self):
        gps = tuple(int(g) for g in self.groups_per_scale)
        object.__setattr__(self, "groups_per_scale", gps)
        if self.num_groups < 1:
            raise ConfigurationError("num_groups must be at least 1")
        if not 1 <= self.split_level <= self.num_groups:
            raise ConfigurationError(
                f"split_level must lie in [1, {self.num_groups}], got {self.split_level}"
            )
        if any(g < 1 for g in gps):
            raise ConfigurationError("every scale needs at least one latent group")
        if sum(gps) != self.num_groups:
            raise ConfigurationError(
                f"groups_per_scale {gps} sums to {sum(gps)}, expected {self.num_groups}"
            )
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigurationError("base_channels must be a positive even number")
        if self.latent_channels < 1:
            raise ConfigurationError("latent_channels must be at least 1")
        if self.cells_per_group < 1:
            raise ConfigurationError("cells_per_group must be at least 1")
        if self.n_mels < 1 or self.frames < 1:
            raise ConfigurationError("input geometry must be positive")
        factor = 1 << self.num_scales
        if self.n_mels % factor or self.frames % factor:
            raise ConfigurationError(
                f"input geometry {self.n_mels}x{self.frames} is not divisible by the "
                f"deepest downsampling factor {factor}"
            )
        if self.logvar_min >= self.logvar_max:
            raise ConfigurationError("logvar_min must be below logvar_max")

    @property
    def num_scales(self) -> int:
        return len(self.groups_per_scale)

    def level_exponent(self, level: int) -> int:
        """Downsampling exponent (2**e) of the scale holding ``level``."""
        if not 1 <= level <= self.num_groups:
            raise InvalidInputError(f"level {level} out of range [1, {self.num_groups}]")
        remaining = level
        for depth, count in enumerate(self.groups_per_scale):
            if remaining <= count:
                return self.num_scales - depth
            remaining -= count
        raise AssertionError("unreachable")

    def channels_at(self, exponent: int) -> int:
        """Trunk width at a given downsampling exponent (0 = full resolution)."""
        if exponent == 0:
            return self.base_channels // 2
        return self.base_channels * (1 << (exponent - 1))

    def latent_shape(self, level: int) -> tuple[int, int, int]:
        e = self.level_exponent(level)
        return (self.latent_channels, self.n_mels >> e, self.frames >> e)


@dataclass
class DiagonalGaussian:
    """Mean / log-variance pair used by every posterior and prior level."""

    mean: Tensor
    log_variance: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise InvalidInputError(
                f"mean shape {tuple(self.mean.shape)} != log_variance shape "
                f"{tuple(self.log_variance.shape)}"
            )

    @property
    def std(self) -> Tensor:
        return torch.exp(0.5 * self.log_variance)


def sample_gaussian(dist: DiagonalGaussian, rng=None) -> Tensor:
    """Reparameterized draw: ``mean + exp(logvar / 2) * eps``.

    Differentiable with respect to the distribution parameters; all
    stochasticity comes from ``rng``.
    """
    gen = as_generator(rng)
    eps = torch.randn(
        dist.mean.shape, generator=gen, dtype=dist.mean.dtype, device=dist.mean.device
    )
    return dist.mean + dist.std * eps


@dataclass
class LatentHierarchy:
    """Ordered latent groups z_1..z_L (top-down) with the split index K."""

    groups: list[Tensor]
    split: int

    def __post_init__(self):
        if not 1 <= self.split <= len(self.groups):
            raise InvalidInputError(
                f"split {self.split} out of range for {len(self.groups)} groups"
            )

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def invariant(self) -> list[Tensor]:
        """Groups with a speaker-free prior (levels <= K)."""
        return self.groups[: self.split]

    @property
    def dependent(self) -> list[Tensor]:
        """Groups with a speaker-conditioned prior (levels > K)."""
        return self.groups[self.split :]


@dataclass
class EncodeResult:
    posteriors: list[DiagonalGaussian]
    priors: list[DiagonalGaussian]
    latents: LatentHierarchy


class ConditionalInstanceNorm(nn.Module):
    """Instance normalization with speaker-derived affine parameters.

    Features are normalized per sample and channel over spatial positions,
    then scaled and shifted by a linear map of the shared speaker embedding.
    """

    def __init__(self, channels: int, embedding_dim: int, eps: float):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.affine = nn.Linear(embedding_dim, 2 * channels)

    def normalize(self, x: Tensor) -> Tensor:
        """Per-channel spatial whitening (the pre-affine part)."""
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, correction=0)
        return (x - mean) / torch.sqrt(var + self.eps)

    def forward(self, x: Tensor, emb: Tensor | None) -> Tensor:
        if emb is None:
            raise InvalidInputError("speaker conditioning required on this path")
        normed = self.normalize(x)
        scale_shift = self.affine(emb)
        gamma = scale_shift[:, : self.channels, None, None]
        delta = scale_shift[:, self.channels :, None, None]
        return gamma * normed + delta


class StaticInstanceNorm(nn.Module):
    """Instance normalization with a learned speaker-free affine."""

    def __init__(self, channels: int, eps: float):
        super().__init__()
        self.norm = nn.GroupNorm(channels, channels, eps=eps)

    def forward(self, x: Tensor, emb: Tensor | None = None) -> Tensor:
        return self.norm(x)


def _make_conv(cin: int, cout: int, kernel: int, stride: int, separable: bool) -> nn.Module:
    if separable and kernel > 1:
        return nn.Sequential(
            nn.Conv2d(cin, cin, kernel, stride=stride, padding=kernel // 2, groups=cin, bias=False),
            nn.Conv2d(cin, cout, 1, bias=True),
        )
    return nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=True)


def _make_norm(channels: int, conditional: bool, cfg: ModelConfig) -> nn.Module:
    if conditional:
        return ConditionalInstanceNorm(channels, cfg.speaker_embedding_dim, cfg.cin_epsilon)
    return StaticInstanceNorm(channels, cfg.cin_epsilon)


class ResidualCell(nn.Module):
    """norm -> SiLU -> conv, twice, with a damped residual connection."""

    def __init__(self, channels: int, conditional: bool, cfg: ModelConfig):
        super().__init__()
        self.conditional = conditional
        self.norm1 = _make_norm(channels, conditional, cfg)
        self.conv1 = _make_conv(channels, channels, 3, 1, cfg.separable)
        self.norm2 = _make_norm(channels, conditional, cfg)
        self.conv2 = _make_conv(channels, channels, 3, 1, cfg.separable)

    def forward(self, x: Tensor, emb: Tensor | None) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x, emb)))
        h = self.conv2(F.silu(self.norm2(h, emb)))
        return x + 0.1 * h


class DownsampleCell(nn.Module):
    """Halve both spatial dimensions and double the channel width."""

    def __init__(self, channels: int, conditional: bool, cfg: ModelConfig):
        super().__init__()
        self.conditional = conditional
        self.norm = _make_norm(channels, conditional, cfg)
        self.conv = _make_conv(channels, 2 * channels, 3, 2, cfg.separable)

    def forward(self, x: Tensor, emb: Tensor | None) -> Tensor:
        return self.conv(F.silu(self.norm(x, emb)))


class UpsampleCell(nn.Module):
    """Double both spatial dimensions and halve the channel width."""

    def __init__(self, channels: int, conditional: bool, cfg: ModelConfig):
        super().__init__()
        self.conditional = conditional
        self.norm = _make_norm(channels, conditional, cfg)
        self.conv = _make_conv(channels, channels // 2, 3, 1, cfg.separable)

    def forward(self, x: Tensor, emb: Tensor | None) -> Tensor:
        h = F.silu(self.norm(x, emb))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.conv(h)


class _BottomUp(nn.Module):
    """Deterministic encoder tower; records features at every latent scale."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.channels_at(0)
        self.stem = nn.Conv2d(1, c0, 3, padding=1)
        self.pre = ResidualCell(c0, conditional=True, cfg=cfg)
        downs, stages = [], []
        for exponent in range(1, cfg.num_scales + 1):
            downs.append(DownsampleCell(cfg.channels_at(exponent - 1), True, cfg))
            stages.append(
                nn.ModuleList(
                    ResidualCell(cfg.channels_at(exponent), True, cfg)
                    for _ in range(cfg.cells_per_group)
                )
            )
        self.downs = nn.ModuleList(downs)
        self.stages = nn.ModuleList(stages)

    def forward(self, x: Tensor, emb: Tensor) -> dict[int, Tensor]:
        h = self.pre(self.stem(x), emb)
        feats: dict[int, Tensor] = {}
        for exponent, (down, stage) in enumerate(zip(self.downs, self.stages), start=1):
            h = down(h, emb)
            for cell in stage:
                h = cell(h, emb)
            feats[exponent] = h
        return feats


class SplitHierarchicalVAE(nn.Module):
    """Encoder, split prior, and decoder sharing one top-down trunk.

    Trunk cells that run before the split level's latent has been consumed
    contain no speaker-conditioned operation, so priors at levels <= K are
    identical for every speaker by construction.
    """

    def __init__(self, config: ModelConfig, num_speakers: int):
        super().__init__()
        if num_speakers < 1:
            raise ConfigurationError("num_speakers must be at least 1")
        self.config = config
        self.num_speakers = num_speakers
        cfg = config
        zc = cfg.latent_channels

        self.embedding = nn.Embedding(num_speakers, cfg.speaker_embedding_dim)
        self.bottom_up = _BottomUp(cfg)

        deepest = cfg.num_scales
        self.start = nn.Parameter(
            torch.zeros(cfg.channels_at(deepest), cfg.n_mels >> deepest, cfg.frames >> deepest)
        )

        prior_heads, posterior_heads = [], []
        enc_combiners, dec_combiners, post_blocks = [], [], []
        for level in range(1, cfg.num_groups + 1):
            e = cfg.level_exponent(level)
            c = cfg.channels_at(e)
            # level 1 keeps a fixed standard-normal prior; placeholder module
            prior_heads.append(
                nn.Identity() if level == 1 else self._head(c, zc)
            )
            posterior_heads.append(self._head(c, zc))
            enc_combiners.append(nn.Conv2d(c, c, 1))
            dec_combiners.append(nn.Conv2d(c + zc, c, 1))
            conditional = level >= cfg.split_level
            blocks = [ResidualCell(c, conditional, cfg) for _ in range(cfg.cells_per_group)]
            if level < cfg.num_groups and cfg.level_exponent(level + 1) != e:
                blocks.append(UpsampleCell(c, conditional, cfg))
            post_blocks.append(nn.ModuleList(blocks))
        self.prior_heads = nn.ModuleList(prior_heads)
        self.posterior_heads = nn.ModuleList(posterior_heads)
        self.enc_combiners = nn.ModuleList(enc_combiners)
        self.dec_combiners = nn.ModuleList(dec_combiners)
        self.post_blocks = nn.ModuleList(post_blocks)

        c1 = cfg.channels_at(1)
        self.tail = nn.ModuleList(
            [UpsampleCell(c1, True, cfg), ResidualCell(cfg.channels_at(0), True, cfg)]
        )
        self.out_head = nn.Conv2d(cfg.channels_at(0), 1, 3, padding=1)

    @staticmethod
    def _head(channels: int, latent_channels: int) -> nn.Module:
        return nn.Sequential(nn.SiLU(), nn.Conv2d(channels, 2 * latent_channels, 1))

    # ------------------------------------------------------------------ helpers

    @property
    def dtype(self) -> torch.dtype:
        return self.start.dtype

    def _clamp(self, log_variance: Tensor) -> Tensor:
        return torch.clamp(log_variance, self.config.logvar_min, self.config.logvar_max)

    def _embed(self, speaker, batch: int) -> Tensor:
        y = torch.as_tensor(speaker, dtype=torch.long, device=self.start.device)
        if y.ndim == 0:
            y = y.reshape(1)
        if y.ndim != 1:
            raise InvalidInputError(f"speaker ids must be scalar or 1-D, got shape {tuple(y.shape)}")
        if y.numel() == 1 and batch > 1:
            y = y.expand(batch)
        if y.numel() != batch:
            raise InvalidInputError(f"{y.numel()} speaker ids for batch of {batch}")
        if y.numel() and (int(y.min()) < 0 or int(y.max()) >= self.num_speakers):
            raise InvalidInputError(
                f"speaker id out of range [0, {self.num_speakers - 1}]"
            )
        return self.embedding(y)

    def _check_input(self, x, flexible_width: bool = False) -> Tensor:
        t = torch.as_tensor(x, dtype=self.dtype, device=self.start.device)
        if t.ndim == 2:
            t = t[None, None]
        elif t.ndim == 3:
            t = t[:, None]
        if t.ndim != 4 or t.shape[1] != 1:
            raise InvalidInputError(f"expected (H, W) or (B, 1, H, W) input, got {tuple(t.shape)}")
        cfg = self.config
        if t.shape[2] != cfg.n_mels:
            raise InvalidInputError(
                f"input has {t.shape[2]} mel bins, model expects {cfg.n_mels}"
            )
        if flexible_width:
            factor = 1 << cfg.num_scales
            if t.shape[3] % factor:
                raise InvalidInputError(
                    f"input width {t.shape[3]} is not divisible by {factor}"
                )
        elif t.shape[3] != cfg.frames:
            raise InvalidInputError(
                f"input geometry {t.shape[2]}x{t.shape[3]} does not match model "
                f"{cfg.n_mels}x{cfg.frames}"
            )
        return t

    def _start_state(self, batch: int, frames: int) -> Tensor:
        """Trunk start constant, tiled along time for wider-than-trained inputs."""
        width = frames >> self.config.num_scales
        base = self.start
        if width != base.shape[2]:
            reps = -(-width // base.shape[2])
            base = base.repeat(1, 1, reps)[:, :, :width]
        return base.unsqueeze(0).expand(batch, -1, -1, -1)

    def _prior_raw(self, level: int, state: Tensor) -> tuple[Tensor, Tensor]:
        """Prior mean and *pre-clamp* log-variance at ``level``."""
        if level == 1:
            shape = (state.shape[0], self.config.latent_channels, *state.shape[2:])
            zeros = torch.zeros(shape, dtype=state.dtype, device=state.device)
            return zeros, zeros.clone()
        params = self.prior_heads[level - 1](state)
        return torch.chunk(params, 2, dim=1)

    def _posterior_from(
        self,
        level: int,
        feats: dict[int, Tensor],
        state: Tensor,
        prior_mean: Tensor,
        prior_raw_logvar: Tensor,
        zero_residual: bool,
    ) -> DiagonalGaussian:
        bu = feats[self.config.level_exponent(level)]
        combined = bu + self.enc_combiners[level - 1](state)
        offsets = self.posterior_heads[level - 1](combined)
        d_mean, d_logvar = torch.chunk(offsets, 2, dim=1)
        if zero_residual:
            d_mean = torch.zeros_like(d_mean)
            d_logvar = torch.zeros_like(d_logvar)
        return DiagonalGaussian(
            prior_mean + d_mean, self._clamp(prior_raw_logvar + d_logvar)
        )

    def _walk(self, batch: int, emb: Tensor | None, z_source, run_tail: bool, frames: int | None = None):
        """Run the top-down trunk, pulling each level's latent from ``z_source``.

        ``z_source(level, prior, prior_raw_logvar, state)`` returns the
        latent to inject and (optionally) the posterior it was drawn from.
        """
        state = self._start_state(batch, frames or self.config.frames)
        latents: list[Tensor] = []
        priors: list[DiagonalGaussian] = []
        posteriors: list[DiagonalGaussian | None] = []
        for level in range(1, self.config.num_groups + 1):
            prior_mean, raw_logvar = self._prior_raw(level, state)
            prior = DiagonalGaussian(prior_mean, self._clamp(raw_logvar))
            z, posterior = z_source(level, prior, raw_logvar, state)
            latents.append(z)
            priors.append(prior)
            posteriors.append(posterior)
            state = self.dec_combiners[level - 1](torch.cat([state, z], dim=1))
            for block in self.post_blocks[level - 1]:
                state = block(state, emb)
        output = None
        if run_tail:
            for block in self.tail:
                state = block(state, emb)
            output = self.out_head(F.silu(state))
        return latents, priors, posteriors, output

    # ------------------------------------------------------------------ public API

    def encode(
        self, x, speaker, rng=None, mean_only: bool = False, zero_residual: bool = False
    ) -> EncodeResult:
        """Infer the posterior chain for ``x`` and sample its latents.

        The bottom-up pass is deterministic; latents are drawn level by
        level by reparameterization (or taken as posterior means when
        ``mean_only``), so level ``l+1`` conditions on the sampled prefix.
        """
        result, _ = self._posterior_pass(x, speaker, rng, mean_only, zero_residual, False)
        return result

    def reconstruction_forward(
        self, x, speaker, rng=None, mean_only: bool = False, zero_residual: bool = False
    ) -> tuple[EncodeResult, Tensor]:
        """Posterior pass plus decoder output in a single trunk traversal."""
        return self._posterior_pass(x, speaker, rng, mean_only, zero_residual, True)

    def _posterior_pass(self, x, speaker, rng, mean_only, zero_residual, run_tail):
        t = self._check_input(x)
        gen = as_generator(rng)
        emb = self._embed(speaker, t.shape[0])
        feats = self.bottom_up(t, emb)

        def source(level, prior, raw_logvar, state):
            q = self._posterior_from(level, feats, state, prior.mean, raw_logvar, zero_residual)
            z = q.mean if mean_only else sample_gaussian(q, gen)
            return z, q

        latents, priors, posteriors, output = self._walk(t.shape[0], emb, source, run_tail)
        result = EncodeResult(
            posteriors=posteriors,
            priors=priors,
            latents=LatentHierarchy(latents, self.config.split_level),
        )
        return result, output

    def decode(self, latents, speaker) -> Tensor:
        """Decoder mean over the mel grid for a complete latent hierarchy."""
        groups = latents.groups if isinstance(latents, LatentHierarchy) else list(latents)
        if len(groups) != self.config.num_groups:
            raise InvalidInputError(
                f"decode needs all {self.config.num_groups} latent groups, got {len(groups)}"
            )
        groups = [torch.as_tensor(g, dtype=self.dtype, device=self.start.device) for g in groups]
        groups = [g[None] if g.ndim == 3 else g for g in groups]
        batch = groups[0].shape[0]
        for level, g in enumerate(groups, start=1):
            expect = self.config.latent_shape(level)
            if tuple(g.shape[1:]) != expect or g.shape[0] != batch:
                raise InvalidInputError(
                    f"latent group {level} has shape {tuple(g.shape)}, expected {(batch, *expect)}"
                )
        emb = self._embed(speaker, batch)

        def source(level, prior, raw_logvar, state):
            return groups[level - 1], None

        _, _, _, output = self._walk(batch, emb, source, run_tail=True)
        return output

    def prior_params(self, z_prefix, speaker, level: int) -> DiagonalGaussian:
        """Parameters of p(z_level | z_<level[, speaker]).

        For ``level <= K`` the computation path contains no
        speaker-conditioned operation and ``speaker`` may be ``None``.
        """
        cfg = self.config
        if not 1 <= level <= cfg.num_groups:
            raise InvalidInputError(f"level {level} out of range [1, {cfg.num_groups}]")
        prefix = list(z_prefix)
        if len(prefix) != level - 1:
            raise InvalidInputError(
                f"prior at level {level} needs exactly {level - 1} prefix groups, "
                f"got {len(prefix)}"
            )
        prefix = [torch.as_tensor(g, dtype=self.dtype, device=self.start.device) for g in prefix]
        prefix = [g[None] if g.ndim == 3 else g for g in prefix]
        batch = prefix[0].shape[0] if prefix else 1
        for lvl, g in enumerate(prefix, start=1):
            expect = cfg.latent_shape(lvl)
            if tuple(g.shape[1:]) != expect:
                raise InvalidInputError(
                    f"prefix group {lvl} has shape {tuple(g.shape)}, expected (*, {expect})"
                )
        if speaker is None:
            if level > cfg.split_level:
                raise InvalidInputError(
                    f"level {level} is past the split ({cfg.split_level}); speaker required"
                )
            emb = None
        else:
            emb = self._embed(speaker, batch)

        state = self._start_state(batch, self.config.frames)
        for lvl in range(1, level):
            state = self.dec_combiners[lvl - 1](torch.cat([state, prefix[lvl - 1]], dim=1))
            for block in self.post_blocks[lvl - 1]:
                state = block(state, emb)
        prior_mean, raw_logvar = self._prior_raw(level, state)
        return DiagonalGaussian(prior_mean, self._clamp(raw_logvar))

    def convert_forward(
        self, x, source_speaker, target_speaker, use_means: bool = True, rng=None
    ) -> tuple[Tensor, LatentHierarchy]:
        """Voice conversion pass for a normalized segment.

        Levels up to the split take the posterior inferred from
        ``(x, source_speaker)``; the remaining levels are completed from
        the target-conditioned prior; the decoder runs under the target
        speaker.  With ``use_means`` the result is fully deterministic
        (posterior and prior chains are threaded on their means).

        Accepts inputs wider than the training geometry as long as the
        width divides the deepest downsampling factor (the trunk start
        constant is tiled along time), enabling utterance-wise conversion.
        """
        t = self._check_input(x, flexible_width=True)
        gen = as_generator(rng)
        batch = t.shape[0]
        emb_source = self._embed(source_speaker, batch)
        emb_target = self._embed(target_speaker, batch)
        feats = self.bottom_up(t, emb_source)
        split = self.config.split_level

        def source(level, prior, raw_logvar, state):
            if level <= split:
                q = self._posterior_from(level, feats, state, prior.mean, raw_logvar, False)
                z = q.mean if use_means else sample_gaussian(q, gen)
                return z, q
            z = prior.mean if use_means else sample_gaussian(prior, gen)
            return z, None

        latents, _, _, output = self._walk(
            batch, emb_target, source, run_tail=True, frames=t.shape[3]
        )
        return output, LatentHierarchy(latents, split)

    def reconstruct(self, x, speaker) -> Tensor:
        """Posterior-mean reconstruction (deterministic baseline)."""
        _, output = self.reconstruction_forward(x, speaker, mean_only=True)
        return output


def _fan_in(weight: Tensor) -> int:
    if weight.ndim <= 1:
        return max(1, weight.numel())
    receptive = 1
    for dim in weight.shape[2:]:
        receptive *= dim
    return weight.shape[1] * receptive


def _init_parameters(model: SplitHierarchicalVAE, seed: int) -> None:
    """Deterministic re-initialization from a dedicated generator.

    Prior/posterior heads start near zero so the untrained hierarchy sits
    close to a standard-normal chain; conditional-norm affines start near
    identity with a small speaker-dependent perturbation.
    """
    gen = torch.Generator().manual_seed(int(seed))
    head_prefixes = ("prior_heads", "posterior_heads")
    for name, module in sorted(model.named_modules(), key=lambda kv: kv[0]):
        if isinstance(module, nn.Conv2d):
            std = 0.01 if name.startswith(head_prefixes) else 1.0 / math.sqrt(_fan_in(module.weight))
            with torch.no_grad():
                module.weight.copy_(
                    torch.randn(module.weight.shape, generator=gen, dtype=torch.float32) * std
                )
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.Linear):  # conditional-norm affine
            half = module.out_features // 2
            with torch.no_grad():
                module.weight.copy_(
                    torch.randn(module.weight.shape, generator=gen, dtype=torch.float32) * 0.01
                )
                module.bias[:half] = 1.0
                module.bias[half:] = 0.0
        elif isinstance(module, nn.GroupNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
        elif isinstance(module, nn.Embedding):
            with torch.no_grad():
                module.weight.copy_(
                    torch.randn(module.weight.shape, generator=gen, dtype=torch.float32) * 0.1
                )
    with torch.no_grad():
        model.start.copy_(torch.randn(model.start.shape, generator=gen, dtype=torch.float32) * 0.01)


def build_model(
    config: ModelConfig,
    num_speakers: int,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> SplitHierarchicalVAE:
    """Construct a model with deterministic, seed-controlled initialization."""
    model = SplitHierarchicalVAE(config, num_speakers)
    _init_parameters(model, seed)
    return model.to(dtype)
