"""Feature-conditional progressive generator and critic.

The generator takes background noise v as its trunk input; the target feature
is mapped through an 8-layer fully connected branch to a conditioning vector
that modulates every synthesis scale through normalize-then-affine injection
nodes (two per block). Stages grow 4x4 -> 8x8 -> ... with the usual fade-in
blend between the upsampled old output and the new block's output.

The critic mirrors the stages downward (two convolutions then a downsample per
block) and ends with a minibatch-standard-deviation feature before its scalar
head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class GanConfig:
    feature_dim: int = 1024
    channels: int = 1
    max_resolution: int = 32
    stage_channels: tuple = (128, 64, 32, 16)
    noise_dim: int = 128  # D_v
    cond_dim: int = 128  # conditioning vector width
    mapping_layers: int = 8
    fade_fraction: float = 0.5  # fraction of each stage ramping fade-in

    def __post_init__(self):
        self.num_stages = int(math.log2(self.max_resolution)) - 1
        if 4 * 2 ** (self.num_stages - 1) != self.max_resolution:
            raise ValueError(f"max_resolution must be a power of two >= 4, got {self.max_resolution}")
        if len(self.stage_channels) != self.num_stages:
            raise ValueError(
                f"{self.num_stages} stages need {self.num_stages} channel entries, "
                f"got {len(self.stage_channels)}"
            )


def stage_resolution(stage: int) -> int:
    """Output side of a stage: 4 * 2^(stage-1)."""
    if stage < 1:
        raise ValueError(f"stage must be >= 1, got {stage}")
    return 4 * 2 ** (stage - 1)


def sample_background(batch: int, noise_dim: int, seed: int | None = None) -> torch.Tensor:
    """i.i.d. standard-normal background noise, reproducible under a seed."""
    if batch < 1 or noise_dim < 1:
        raise ValueError("batch and noise_dim must be >= 1")
    gen = None
    if seed is not None:
        gen = torch.Generator().manual_seed(seed)
    return torch.randn(batch, noise_dim, generator=gen)


def inject_condition(activation: torch.Tensor, modulation) -> torch.Tensor:
    """Per-channel standardization followed by the conditional affine:
    scale * (x - mean)/std + shift. The (scale, shift) pair comes per channel."""
    scale, shift = modulation
    b, c = activation.shape[:2]
    scale = scale.reshape(-1, c, 1, 1)
    shift = shift.reshape(-1, c, 1, 1)
    if scale.shape[1] != c or shift.shape[1] != c:
        raise ValueError(f"modulation channels do not match activation channels ({c})")
    mean = activation.mean(dim=(2, 3), keepdim=True)
    var = activation.var(dim=(2, 3), keepdim=True, unbiased=False)
    normed = (activation - mean) / torch.sqrt(var + 1e-8)
    return scale * normed + shift


class MappingNet(nn.Module):
    """Feature -> conditioning vector: 8 fully connected layers arranged as an
    input projection followed by residual pairs.

    Two details matter empirically. Variance-preserving init: with default
    linear init an 8-layer stack attenuates the across-sample signal by ~1e3
    and the injection nodes receive an essentially constant conditioning
    vector. Residual structure: a plain stack can collapse class distinctions
    the low-resolution stages never needed, and later stages cannot recover
    information destroyed here; the skip paths keep the projected feature
    geometry available throughout training.
    """

    def __init__(self, feature_dim: int, cond_dim: int, num_layers: int = 8):
        super().__init__()
        def make_linear(i, o):
            linear = nn.Linear(i, o)
            nn.init.kaiming_normal_(linear.weight, a=0.2)
            nn.init.zeros_(linear.bias)
            return linear

        self.proj = make_linear(feature_dim, cond_dim)
        n_residual = max(0, (num_layers - 1) // 2)
        self.pairs = nn.ModuleList(
            nn.Sequential(make_linear(cond_dim, cond_dim), nn.LeakyReLU(0.2), make_linear(cond_dim, cond_dim))
            for _ in range(n_residual)
        )
        # odd layer counts get one extra residual single-linear step
        self.tail = make_linear(cond_dim, cond_dim) if (num_layers - 1) % 2 else None

    def forward(self, feature):
        # scale-normalize the feature so conditioning sees a consistent range
        feature = feature / torch.sqrt((feature**2).mean(dim=1, keepdim=True) + 1e-8)
        h = F.leaky_relu(self.proj(feature), 0.2)
        for pair in self.pairs:
            h = h + pair(h)
        if self.tail is not None:
            h = h + self.tail(F.leaky_relu(h, 0.2))
        # unit-RMS output keeps the injection affines in a sane regime
        return h / torch.sqrt((h**2).mean(dim=1, keepdim=True) + 1e-8)


class _InjectionAffine(nn.Module):
    """Conditioning vector -> per-channel (scale, shift). The weight keeps its
    default init so the output depends on the feature from step zero (an
    all-zero init leaves the trunk free to settle on the unconditional mean
    image before conditioning can bootstrap); zero bias keeps the modulation
    centered on plain standardization."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.affine = nn.Linear(cond_dim, 2 * channels)
        nn.init.zeros_(self.affine.bias)

    def forward(self, w):
        delta_scale, shift = self.affine(w).chunk(2, dim=1)
        return 1.0 + delta_scale, shift


class _GenBlock(nn.Module):
    """Two conv + injection nodes; upsamples first except at the base stage."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.inject1 = _InjectionAffine(cond_dim, out_ch)
        self.inject2 = _InjectionAffine(cond_dim, out_ch)

    def forward(self, h, w):
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.leaky_relu(inject_condition(self.conv1(h), self.inject1(w)), 0.2)
        h = F.leaky_relu(inject_condition(self.conv2(h), self.inject2(w)), 0.2)
        return h


class Generator(nn.Module):
    def __init__(self, config: GanConfig):
        super().__init__()
        self.config = config
        ch = config.stage_channels
        self.mapping = MappingNet(config.feature_dim, config.cond_dim, config.mapping_layers)
        self.input_fc = nn.Linear(config.noise_dim, ch[0] * 4 * 4)
        blocks = [_GenBlock(ch[0], ch[0], config.cond_dim, upsample=False)]
        for s in range(1, config.num_stages):
            blocks.append(_GenBlock(ch[s - 1], ch[s], config.cond_dim, upsample=True))
        self.blocks = nn.ModuleList(blocks)
        # small-gain output heads: start near mid-grey, far from the
        # saturated all-background local optimum
        to_rgb = []
        for s in range(config.num_stages):
            conv = nn.Conv2d(ch[s], config.channels, 1)
            nn.init.xavier_uniform_(conv.weight, gain=0.2)
            nn.init.zeros_(conv.bias)
            to_rgb.append(conv)
        self.to_rgb = nn.ModuleList(to_rgb)
        self.current_stage = 1

    def forward(self, feature, v, stage: int | None = None, fade_in: float = 1.0):
        stage = stage if stage is not None else self.current_stage
        if not 1 <= stage <= self.config.num_stages:
            raise ValueError(f"stage {stage} beyond configured maximum {self.config.num_stages}")
        if not 0.0 <= fade_in <= 1.0:
            raise ValueError(f"fade_in must be in [0, 1], got {fade_in}")
        w = self.mapping(feature)
        h = self.input_fc(v).view(v.shape[0], self.config.stage_channels[0], 4, 4)
        prev = None
        for s in range(stage):
            prev = h
            h = self.blocks[s](h, w)
        # softsign keeps pixels in (-1, 1) with a polynomially decaying
        # gradient, so a saturated head can still recover during training
        out = F.softsign(self.to_rgb[stage - 1](h))
        if stage > 1 and fade_in < 1.0:
            old = F.softsign(self.to_rgb[stage - 2](prev))
            old = F.interpolate(old, scale_factor=2, mode="nearest")
            out = (1.0 - fade_in) * old + fade_in * out
        return out


def generate(G: Generator, feature, v, stage: int, fade_in: float = 1.0) -> torch.Tensor:
    """Synthesize images at the stage resolution; deterministic in its inputs."""
    feature = torch.as_tensor(feature, dtype=torch.float32)
    v = torch.as_tensor(v, dtype=torch.float32)
    return G(feature, v, stage, fade_in)


class MinibatchStdDev(nn.Module):
    """Append one channel holding the batch-wide mean feature deviation."""

    def forward(self, x):
        if x.shape[0] == 1:
            std = x.new_zeros(())
        else:
            std = x.std(dim=0, unbiased=False).mean()
        return torch.cat([x, std.expand(x.shape[0], 1, *x.shape[2:])], dim=1)


class _CriticBlock(nn.Module):
    """Two convolutions then a downsampling operator."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, h):
        h = F.leaky_relu(self.conv1(h), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        return F.avg_pool2d(h, 2)


class Critic(nn.Module):
    def __init__(self, config: GanConfig):
        super().__init__()
        self.config = config
        ch = config.stage_channels
        self.from_rgb = nn.ModuleList(
            [nn.Conv2d(config.channels, ch[s], 1) for s in range(config.num_stages)]
        )
        blocks = []
        for s in range(1, config.num_stages):
            blocks.append(_CriticBlock(ch[s], ch[s - 1]))
        self.blocks = nn.ModuleList(blocks)
        self.stddev = MinibatchStdDev()
        self.final_conv = nn.Conv2d(ch[0] + 1, ch[0], 3, padding=1)
        self.final_fc = nn.Linear(ch[0] * 4 * 4, 1)
        self.current_stage = 1

    def forward(self, images, stage: int | None = None, fade_in: float = 1.0):
        stage = stage if stage is not None else self.current_stage
        if not 1 <= stage <= self.config.num_stages:
            raise ValueError(f"stage {stage} beyond configured maximum {self.config.num_stages}")
        expected = stage_resolution(stage)
        if images.shape[-1] != expected or images.shape[-2] != expected:
            raise ValueError(
                f"critic stage {stage} expects {expected}x{expected} inputs, "
                f"got {tuple(images.shape[-2:])}"
            )
        h = F.leaky_relu(self.from_rgb[stage - 1](images), 0.2)
        if stage > 1:
            h = self.blocks[stage - 2](h)
            if fade_in < 1.0:
                skip = F.leaky_relu(self.from_rgb[stage - 2](F.avg_pool2d(images, 2)), 0.2)
                h = fade_in * h + (1.0 - fade_in) * skip
            for s in range(stage - 2, 0, -1):
                h = self.blocks[s - 1](h)
        h = self.stddev(h)
        h = F.leaky_relu(self.final_conv(h), 0.2)
        return self.final_fc(h.flatten(1)).squeeze(1)


def discriminate(D: Critic, images, stage: int, fade_in: float = 1.0) -> torch.Tensor:
    """One scalar score per image, differentiable with respect to the images."""
    images = torch.as_tensor(images, dtype=torch.float32)
    return D(images, stage, fade_in)


def grow_stage(G: Generator, D: Critic, new_stage: int):
    """Advance both models to the next stage; fade-in restarts at 0 and is
    ramped by the training loop."""
    if new_stage != G.current_stage + 1:
        raise ValueError(f"stage must grow by exactly one ({G.current_stage} -> {new_stage})")
    if new_stage > G.config.num_stages:
        raise ValueError(f"stage {new_stage} beyond configured maximum {G.config.num_stages}")
    G.current_stage = new_stage
    D.current_stage = new_stage
    return G, D
