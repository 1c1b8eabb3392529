"""Invertible image-to-latent mapping with class-conditional Gaussian priors.

The bijection is a stack of affine coupling layers (checkerboard masks
alternating parity; channel masks mixed in for multi-channel inputs). Each
coupling subnet is two 32-feature-map residual blocks with a zero-initialized
output convolution, so a fresh flow is exactly the identity and its log-det
is zero. Scale outputs pass through a bounded tanh so the log-det cannot blow
up during likelihood training.

Latent distances computed on this flow back the bijective reconstruction
metric; training uses the per-class log-likelihood

    log p_x(x, k) = log N(H(x); mu_k, Sigma_k) + log|det J|
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .errors import NumericError, TrainingDivergenceError


@dataclass
class LatentCode:
    """Flow output: flat latent plus accumulated log|det J| per sample."""

    z: torch.Tensor  # [B, D]
    log_det: torch.Tensor  # [B]


@dataclass
class ClassPrior:
    """K diagonal Gaussians in latent space, one per identity class."""

    means: torch.Tensor  # [K, D]
    variances: torch.Tensor  # [K, D], strictly positive

    def __post_init__(self):
        self.means = torch.as_tensor(self.means, dtype=torch.float32)
        self.variances = torch.as_tensor(self.variances, dtype=torch.float32)
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must have matching shapes")
        if (self.variances <= 0).any():
            raise ValueError("all prior variances must be strictly positive")
        k = self.means.shape[0]
        if k > 1:
            dists = torch.cdist(self.means, self.means)
            off_diag = dists[~torch.eye(k, dtype=torch.bool)]
            if off_diag.min() <= 0:
                raise ValueError("prior means must be pairwise distinct")

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def init_class_priors(num_classes: int, dim: int, spacing: float = 8.0) -> ClassPrior:
    """Deterministic prior placement: mu_k = spacing * e_k, unit variances.

    All pairwise mean distances equal spacing * sqrt(2). A single class gets a
    zero-mean prior.
    """
    if num_classes < 1:
        raise ValueError(f"need at least one class, got {num_classes}")
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    means = torch.zeros(num_classes, dim)
    if num_classes > 1:
        if num_classes > dim:
            raise ValueError(f"one-hot placement needs dim >= K ({num_classes} > {dim})")
        for k in range(num_classes):
            means[k, k] = spacing
    return ClassPrior(means, torch.ones(num_classes, dim))


class _ResBlock(nn.Module):
    """Residual block with a smooth activation; smoothness keeps the flow's
    Jacobian well-defined everywhere (finite differences stay honest)."""

    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(torch.nn.functional.gelu(self.conv1(x)))


class AffineCoupling(nn.Module):
    """Masked affine coupling: passthrough positions predict (log-scale, shift)
    for the complementary positions. Exact inverse, exact log-det."""

    def __init__(self, channels: int, mask: torch.Tensor, width: int = 32, scale_cap: float = 2.0):
        super().__init__()
        self.register_buffer("mask", mask.float())
        self.scale_cap = scale_cap
        self.net_in = nn.Conv2d(channels, width, 3, padding=1)
        self.blocks = nn.Sequential(_ResBlock(width), _ResBlock(width))
        self.net_out = nn.Conv2d(width, 2 * channels, 3, padding=1)
        nn.init.zeros_(self.net_out.weight)
        nn.init.zeros_(self.net_out.bias)

    def _scale_shift(self, x_masked):
        h = self.blocks(torch.nn.functional.gelu(self.net_in(x_masked)))
        raw = self.net_out(h)
        log_s, t = raw.chunk(2, dim=1)
        log_s = self.scale_cap * torch.tanh(log_s / self.scale_cap)
        keep = 1.0 - self.mask
        return log_s * keep, t * keep

    def forward(self, x):
        log_s, t = self._scale_shift(x * self.mask)
        y = x * self.mask + (1.0 - self.mask) * (x * torch.exp(log_s) + t)
        log_det = log_s.flatten(1).sum(dim=1)
        return y, log_det

    def inverse(self, y):
        log_s, t = self._scale_shift(y * self.mask)
        x = y * self.mask + (1.0 - self.mask) * ((y - t) * torch.exp(-log_s))
        return x


class ElementwiseScaling(nn.Module):
    """Fixed diagonal-scaling layer; its log-det is analytic. Used for
    change-of-variables verification rather than learned mappings."""

    def __init__(self, scale: float):
        super().__init__()
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = scale

    def forward(self, x):
        d = x[0].numel()
        log_det = torch.full((x.shape[0],), d * math.log(self.scale), dtype=x.dtype)
        return x * self.scale, log_det

    def inverse(self, y):
        return y / self.scale


def checkerboard_mask(height: int, width: int, parity: int) -> torch.Tensor:
    rows = torch.arange(height).view(-1, 1)
    cols = torch.arange(width).view(1, -1)
    return ((rows + cols) % 2 == parity).float().view(1, 1, height, width)


def channel_mask(channels: int, parity: int) -> torch.Tensor:
    mask = torch.zeros(1, channels, 1, 1)
    half = channels // 2
    if parity == 0:
        mask[:, :half] = 1.0
    else:
        mask[:, half:] = 1.0
    return mask


class FlowModel(nn.Module):
    """Composition of invertible layers; log-dets add across layers."""

    def __init__(self, resolution: int, channels: int = 1, num_layers: int = 5, width: int = 32):
        super().__init__()
        self.resolution = resolution
        self.channels = channels
        layers = []
        for i in range(num_layers):
            if channels > 1 and i % 4 in (2, 3):
                mask = channel_mask(channels, i % 2)
            else:
                mask = checkerboard_mask(resolution, resolution, i % 2)
            mask = mask.expand(1, channels, resolution, resolution).clone()
            layers.append(AffineCoupling(channels, mask, width=width))
        self.layers = nn.ModuleList(layers)
        self.history: dict = {}

    @property
    def dim(self) -> int:
        return self.channels * self.resolution * self.resolution

    def _check_image(self, images: torch.Tensor):
        if images.ndim != 4 or images.shape[1:] != (self.channels, self.resolution, self.resolution):
            raise ValueError(
                f"expected [N, {self.channels}, {self.resolution}, {self.resolution}], "
                f"got {tuple(images.shape)}"
            )

    def forward(self, images: torch.Tensor):
        self._check_image(images)
        h = images
        total = torch.zeros(images.shape[0], dtype=images.dtype, device=images.device)
        for i, layer in enumerate(self.layers):
            h, log_det = layer(h)
            if not torch.isfinite(h).all() or not torch.isfinite(log_det).all():
                raise NumericError(f"non-finite activations in flow layer {i} ({type(layer).__name__})")
            total = total + log_det
        return h.flatten(1), total

    def inverse(self, latents: torch.Tensor):
        if latents.ndim != 2 or latents.shape[1] != self.dim:
            raise ValueError(f"expected [N, {self.dim}] latents, got {tuple(latents.shape)}")
        h = latents.view(-1, self.channels, self.resolution, self.resolution)
        for layer in reversed(self.layers):
            h = layer.inverse(h)
        return h

    def save(self, path: str, extra: dict | None = None):
        torch.save(self.state_dict(), path)
        meta = {
            "resolution": self.resolution,
            "channels": self.channels,
            "num_layers": len(self.layers),
            "history": {k: list(map(float, v)) for k, v in self.history.items()},
        }
        meta.update(extra or {})
        with open(path + ".json", "w") as f:
            json.dump(meta, f, indent=2)


def load_flow(path: str) -> FlowModel:
    with open(path + ".json") as f:
        meta = json.load(f)
    flow = FlowModel(meta["resolution"], meta["channels"], num_layers=meta["num_layers"])
    flow.load_state_dict(torch.load(path, weights_only=True))
    flow.eval()
    flow.history = meta.get("history", {})
    return flow


def flow_forward(flow: FlowModel, images) -> LatentCode:
    """Map images to latents with the accumulated log|det J|."""
    images = torch.as_tensor(images, dtype=torch.float32)
    z, log_det = flow(images)
    return LatentCode(z, log_det)


def flow_inverse(flow: FlowModel, latents) -> torch.Tensor:
    """Exact inverse map from latents back to images."""
    latents = torch.as_tensor(latents, dtype=torch.float32)
    return flow.inverse(latents)


def gaussian_log_prob(z: torch.Tensor, mean: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """Diagonal-Gaussian log density, summed over dimensions."""
    return -0.5 * (
        z.shape[1] * math.log(2 * math.pi)
        + torch.log(var).sum(dim=-1)
        + ((z - mean) ** 2 / var).sum(dim=-1)
    )


def class_log_likelihood(flow: FlowModel, images, class_ids, priors: ClassPrior) -> torch.Tensor:
    """Per-sample log p_x(x, k) = log N(H(x); mu_k, Sigma_k) + log|det J|."""
    images = torch.as_tensor(images, dtype=torch.float32)
    class_ids = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
    if (class_ids < 0).any() or (class_ids >= priors.num_classes).any():
        raise ValueError(f"class id out of range [0, {priors.num_classes})")
    code = flow_forward(flow, images)
    mean = priors.means[class_ids].to(code.z.dtype)
    var = priors.variances[class_ids].to(code.z.dtype)
    return gaussian_log_prob(code.z, mean, var) + code.log_det


@dataclass
class FlowTrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    dequantize: bool = True
    val_fraction: float = 0.1
    grad_clip: float = 5.0


def train_flow(
    dataset: Dataset,
    priors: ClassPrior,
    config: FlowTrainConfig | None = None,
    flow: FlowModel | None = None,
    verbose: bool = False,
) -> FlowModel:
    """Maximize per-class log-likelihood; the returned model carries a
    ``history`` dict with validation NLL (index 0 = before training) and the
    mean latent distance to the assigned prior means."""
    config = config or FlowTrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if int(dataset.labels.max()) >= priors.num_classes or int(dataset.labels.min()) < 0:
        raise ValueError("labels out of prior range")

    torch.manual_seed(config.seed)
    if flow is None:
        flow = FlowModel(dataset.resolution, dataset.channels)
    opt = torch.optim.Adam(flow.parameters(), lr=config.lr)

    n_val = max(1, int(len(dataset) * config.val_fraction))
    perm = np.random.default_rng(config.seed).permutation(len(dataset))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels)

    def validation_stats():
        flow.eval()
        nll, count = 0.0, 0
        sums = torch.zeros(priors.num_classes, priors.dim)
        class_counts = torch.zeros(priors.num_classes)
        with torch.no_grad():
            for start in range(0, len(val_idx), 256):
                idx = val_idx[start : start + 256]
                ll = class_log_likelihood(flow, images[idx], labels[idx], priors)
                z, _ = flow(images[idx])
                nll += float(-ll.sum())
                count += len(idx)
                sums.index_add_(0, labels[idx], z)
                class_counts.index_add_(0, labels[idx], torch.ones(len(idx)))
        flow.train()
        present = class_counts > 0
        class_means = sums[present] / class_counts[present, None]
        mean_dist = float((class_means - priors.means[present]).norm(dim=1).mean())
        return nll / count, mean_dist

    history = {"val_nll": [], "prior_mean_distance": []}
    nll0, dist0 = validation_stats()
    history["val_nll"].append(nll0)
    history["prior_mean_distance"].append(dist0)
    if verbose:
        print(f"[flow] init val NLL {nll0:.1f}, prior distance {dist0:.2f}")

    last_stable = {k: v.clone() for k, v in flow.state_dict().items()}
    order_rng = np.random.default_rng(config.seed + 1)
    noise_rng = torch.Generator().manual_seed(config.seed + 2)
    flow.train()
    for epoch in range(config.epochs):
        order = train_idx[order_rng.permutation(len(train_idx))]
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = images[idx]
            if config.dequantize:
                batch = batch + torch.rand(batch.shape, generator=noise_rng) / 128.0
            opt.zero_grad()
            nll = -class_log_likelihood(flow, batch, labels[idx], priors).mean()
            if not torch.isfinite(nll):
                raise TrainingDivergenceError(
                    f"non-finite flow NLL at epoch {epoch}", last_checkpoint=last_stable
                )
            nll.backward()
            nn.utils.clip_grad_norm_(flow.parameters(), config.grad_clip)
            opt.step()
        last_stable = {k: v.clone() for k, v in flow.state_dict().items()}
        nll_e, dist_e = validation_stats()
        history["val_nll"].append(nll_e)
        history["prior_mean_distance"].append(dist_e)
        if verbose:
            print(f"[flow] epoch {epoch + 1}/{config.epochs} val NLL {nll_e:.1f}, prior distance {dist_e:.2f}")

    flow.eval()
    flow.history = history
    return flow
