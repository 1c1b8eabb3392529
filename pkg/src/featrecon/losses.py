"""Loss functions and the stage-indexed weight schedule.

Covers the four generator criteria (latent-metric, distillation, adversarial,
pixel reconstruction), the critic objective with gradient penalty, and the
exponential weighting that shifts emphasis from identity preservation at low
resolutions to realism at high ones:

    lambda_b  = alpha * e^(R_M - R(i))      lambda_d = e^(R_M - R(i))
    lambda_adv = beta * e^(R(i))            lambda_r = e^(R_M - R(i))

All functions here are pure in their inputs and keep autograd graphs intact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericError
from .flow import FlowModel


# ---------------------------------------------------------------------------
# Latent moments and the Gaussian transport distance
# ---------------------------------------------------------------------------

@dataclass
class GaussianMoments:
    """Mean and diagonal variance, possibly batched in leading dimensions."""

    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != variance shape {tuple(self.var.shape)}"
            )


def latent_moments(latents: torch.Tensor, mode: str = "point_mass", groups: int = 1) -> GaussianMoments:
    """Summarize latents [B, D] as per-sample Gaussian moments.

    ``point_mass``: the latent itself with zero variance (the transport
    distance then collapses to squared Euclidean distance).
    ``channel_moments``: empirical mean/variance per contiguous group of
    D/groups elements (population variance).
    """
    if latents.ndim != 2 or latents.shape[0] < 1:
        raise ValueError("need at least one latent of shape [B, D]")
    if mode == "point_mass":
        return GaussianMoments(latents, torch.zeros_like(latents))
    if mode == "channel_moments":
        b, d = latents.shape
        if d % groups != 0:
            raise ValueError(f"latent dim {d} not divisible into {groups} groups")
        grouped = latents.view(b, groups, d // groups)
        return GaussianMoments(grouped.mean(dim=2), grouped.var(dim=2, unbiased=False))
    raise ValueError(f"unknown moment mode {mode!r}")


def gaussian_w2(m1: GaussianMoments, m2: GaussianMoments) -> torch.Tensor:
    """Squared transport distance between diagonal Gaussians:
    ||mu1 - mu2||^2 + sum_i (sqrt(v1_i) - sqrt(v2_i))^2."""
    if m1.mean.shape[-1] != m2.mean.shape[-1]:
        raise ValueError(
            f"moment dimensions differ: {m1.mean.shape[-1]} vs {m2.mean.shape[-1]}"
        )
    if (m1.var < 0).any() or (m2.var < 0).any():
        raise ValueError("negative variance")
    mean_term = ((m1.mean - m2.mean) ** 2).sum(dim=-1)
    var_term = ((m1.var.sqrt() - m2.var.sqrt()) ** 2).sum(dim=-1)
    return mean_term + var_term


def bijective_pair_loss(
    m1: GaussianMoments, m2: GaussianMoments, id1, id2, margin: float
) -> torch.Tensor:
    """Same identity: pull latents together; different: push apart up to the
    margin."""
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    d = gaussian_w2(m1, m2)
    same = torch.as_tensor(np.asarray(id1) == np.asarray(id2), device=d.device)
    return torch.where(same, d, torch.clamp(margin - d, min=0.0))


def _sample_pairs(ids: np.ndarray, rng: np.random.Generator):
    """All same-id index pairs plus an equal count of random different-id pairs."""
    same = [
        (i, j)
        for i in range(len(ids))
        for j in range(i + 1, len(ids))
        if ids[i] == ids[j]
    ]
    diff_all = [
        (i, j)
        for i in range(len(ids))
        for j in range(i + 1, len(ids))
        if ids[i] != ids[j]
    ]
    if not diff_all:
        return same, []
    take = min(len(same), len(diff_all)) if same else min(len(ids) // 2, len(diff_all))
    take = max(take, 1)
    picks = rng.choice(len(diff_all), size=take, replace=len(diff_all) < take)
    return same, [diff_all[int(p)] for p in picks]


def bijective_loss(
    recon_batch: torch.Tensor,
    real_batch: torch.Tensor,
    ids,
    flow: FlowModel,
    margin: float = 1.0,
    mode: str = "point_mass",
    groups: int = 1,
    pair_rng: np.random.Generator | None = None,
    real_latents: torch.Tensor | None = None,
):
    """Latent-metric loss through the frozen bijection.

    First term: mean transport distance between flow latents of each
    reconstruction and its source. Second term: pair loss over reconstruction
    latents (all same-id pairs plus as many random different-id pairs).
    Returns (loss, info); info flags a skipped pair term for singleton batches.
    """
    ids = np.asarray(ids)
    z_recon, _ = flow(recon_batch)
    if real_latents is None:
        with torch.no_grad():
            real_latents, _ = flow(real_batch)
    m_recon = latent_moments(z_recon, mode, groups)
    m_real = latent_moments(real_latents.detach(), mode, groups)
    match_term = gaussian_w2(m_recon, m_real).mean()

    info = {"pair_term_skipped": False, "match_term": float(match_term.detach())}
    if len(ids) < 2:
        info["pair_term_skipped"] = True
        info["pair_term"] = 0.0
        return match_term, info

    rng = pair_rng if pair_rng is not None else np.random.default_rng()
    same, diff = _sample_pairs(ids, rng)
    terms = []
    for i, j in same + diff:
        mi = GaussianMoments(m_recon.mean[i], m_recon.var[i])
        mj = GaussianMoments(m_recon.mean[j], m_recon.var[j])
        terms.append(bijective_pair_loss(mi, mj, ids[i], ids[j], margin))
    if not terms:
        info["pair_term_skipped"] = True
        info["pair_term"] = 0.0
        return match_term, info
    pair_term = torch.stack(terms).mean()
    info["pair_term"] = float(pair_term.detach())
    return match_term + pair_term, info


# ---------------------------------------------------------------------------
# Distillation losses
# ---------------------------------------------------------------------------

def distill_distance(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
    """Squared cosine misalignment (1 - cos)^2 per sample, in [0, 4]."""
    if f_a.shape != f_b.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    na = f_a.norm(dim=-1)
    nb = f_b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-norm feature vector")
    cos = (f_a * f_b).sum(dim=-1) / (na * nb)
    return (1.0 - cos) ** 2


@dataclass
class DistillWeights:
    """Per-tap weights plus the final-feature weight of the distillation loss."""

    per_layer: tuple = (1.0, 1.0)
    final: float = 10.0

    def __post_init__(self):
        self.per_layer = tuple(float(w) for w in self.per_layer)
        if any(w < 0 for w in self.per_layer) or self.final < 0:
            raise ValueError("distillation weights must be nonnegative")


def distillation_loss(
    x_recon: torch.Tensor,
    x_real: torch.Tensor,
    feature_net,
    weights: DistillWeights,
) -> torch.Tensor:
    """Intermediate-map L1 gaps (normalized by map size) plus the final-feature
    cosine term, batch-averaged. ``feature_net`` is any object exposing
    ``features_and_taps`` (a distilled student, or the teacher in whitebox mode)."""
    feat_recon, taps_recon = feature_net.features_and_taps(x_recon)
    with torch.no_grad():
        feat_real, taps_real = feature_net.features_and_taps(x_real)
    if len(taps_recon) != len(weights.per_layer):
        raise ValueError(
            f"{len(weights.per_layer)} layer weights for {len(taps_recon)} tap layers"
        )
    total = x_recon.new_zeros(())
    for lam, tr, tx in zip(weights.per_layer, taps_recon, taps_real):
        per_sample = (tr - tx).abs().flatten(1).sum(dim=1) / tr[0].numel()
        total = total + lam * per_sample.mean()
    total = total + weights.final * distill_distance(feat_recon, feat_real).mean()
    return total


# ---------------------------------------------------------------------------
# Adversarial losses
# ---------------------------------------------------------------------------

def gradient_penalty(
    critic_fn,
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    gp_weight: float = 10.0,
    eps_generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Two-sided penalty on the critic's gradient norm at random
    interpolations eps*real + (1-eps)*fake."""
    if real_batch.shape != fake_batch.shape:
        raise ValueError(
            f"real/fake shapes differ: {tuple(real_batch.shape)} vs {tuple(fake_batch.shape)}"
        )
    b = real_batch.shape[0]
    eps_shape = (b,) + (1,) * (real_batch.ndim - 1)
    eps = torch.rand(eps_shape, generator=eps_generator, dtype=real_batch.dtype)
    mixed = (eps * real_batch + (1.0 - eps) * fake_batch).detach().requires_grad_(True)
    scores = critic_fn(mixed)
    if scores.requires_grad:
        grads = torch.autograd.grad(
            scores.sum(), mixed, create_graph=True, allow_unused=True
        )[0]
    else:  # constant critic: no graph back to the input
        grads = None
    if grads is None:
        grads = torch.zeros_like(mixed)
    if not torch.isfinite(grads).all():
        raise NumericError("non-finite critic gradient at interpolated points")
    norms = grads.flatten(1).norm(dim=1)
    return gp_weight * ((norms - 1.0) ** 2).mean()


def discriminator_loss(
    critic_fn,
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    gp_weight: float = 10.0,
    eps_generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Critic objective: mean score on fakes minus mean score on reals plus the
    gradient penalty."""
    loss = critic_fn(fake_batch).mean() - critic_fn(real_batch).mean()
    if gp_weight != 0.0:
        loss = loss + gradient_penalty(critic_fn, real_batch, fake_batch, gp_weight, eps_generator)
    return loss


def adversarial_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Generator-side adversarial component: ascend the critic score on fakes."""
    return -fake_scores.mean()


def recon_l1(x_recon: torch.Tensor, x_real: torch.Tensor) -> torch.Tensor:
    """Per-sample L1 pixel difference (summed over pixels), batch-averaged."""
    if x_recon.shape != x_real.shape:
        raise ValueError(
            f"shapes differ: {tuple(x_recon.shape)} vs {tuple(x_real.shape)}"
        )
    return (x_recon - x_real).abs().flatten(1).sum(dim=1).mean()


# ---------------------------------------------------------------------------
# Weight schedule and total objective
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    b: float
    d: float
    adv: float
    r: float

    def __post_init__(self):
        for name in ("b", "d", "adv", "r"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"lambda_{name} must be finite and >= 0, got {v}")


@dataclass
class ScheduleState:
    """Exponential-weighting parameters; stages are indexed 1..r_max."""

    alpha: float = 0.001
    beta: float = 1.0
    r_max: int = 4

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.r_max < 1:
            raise ValueError("r_max must be >= 1")


def stage_for_resolution(resolution: int) -> int:
    """Stage index of a resolution: 4 -> 1, 8 -> 2, 16 -> 3, 32 -> 4."""
    stage = int(math.log2(resolution)) - 1
    if 2 ** (stage + 1) != resolution or stage < 1:
        raise ValueError(f"resolution must be a power of two >= 4, got {resolution}")
    return stage


def schedule_weights(state: ScheduleState, stage: int) -> LossWeights:
    """Identity-heavy early, realism-heavy late."""
    if not 1 <= stage <= state.r_max:
        raise ValueError(f"stage {stage} outside [1, {state.r_max}]")
    decay = math.exp(state.r_max - stage)
    return LossWeights(
        b=state.alpha * decay,
        d=decay,
        adv=state.beta * math.exp(stage),
        r=decay,
    )


@dataclass
class LossComponents:
    biject: torch.Tensor | float = 0.0
    distill: torch.Tensor | float = 0.0
    adv: torch.Tensor | float = 0.0
    recon: torch.Tensor | float = 0.0


def generator_total_loss(components: LossComponents, weights: LossWeights):
    """Weighted sum of the four generator criteria. Non-finite components are
    rejected by name."""
    for name, value in (
        ("biject", components.biject),
        ("distill", components.distill),
        ("adv", components.adv),
        ("recon", components.recon),
    ):
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(scalar):
            raise NumericError(f"non-finite {name} loss component: {scalar}")
    return (
        weights.b * components.biject
        + weights.d * components.distill
        + weights.adv * components.adv
        + weights.r * components.recon
    )
