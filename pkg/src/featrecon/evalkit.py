"""Evaluation protocols: reconstruction over a feature cache, identity
preservation (classification and pair-substitution), multi-scale structural
similarity, a classifier-based sharpness/diversity score, latent-cluster
silhouette, scatter plots, and the cumulative-ablation driver.

The quality score uses the attacked engine's own classifier head rather than
an external pretrained network, and reports are labeled accordingly
("classifier score").
"""

from __future__ import annotations

import csv
import hashlib
import os
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .gan import Generator, sample_background, stage_resolution
from .oracle import TeacherModel, verify_pair

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


# ---------------------------------------------------------------------------
# Reconstruction over a cache
# ---------------------------------------------------------------------------

def reconstruct_dataset(
    G: Generator,
    features: np.ndarray,
    v_policy: str = "fixed_seed",
    seed: int = 0,
    stage: int | None = None,
    batch_size: int = 256,
    out_dir: str | None = None,
) -> np.ndarray:
    """One image per feature row. ``fixed_seed`` shares a single background
    draw across the set; ``per_sample`` draws one per feature, both
    deterministic under the seed."""
    if v_policy not in ("fixed_seed", "per_sample"):
        raise ValueError(f"unknown v policy {v_policy!r}")
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[1] != G.config.feature_dim:
        raise ValueError(
            f"features must be [N, {G.config.feature_dim}], got {features.shape}"
        )
    stage = stage if stage is not None else G.current_stage
    n = len(features)
    res = stage_resolution(stage)
    out = np.empty((n, G.config.channels, res, res), dtype=np.float32)
    if v_policy == "fixed_seed":
        v_all = sample_background(1, G.config.noise_dim, seed=seed).expand(n, -1)
    else:
        v_all = sample_background(max(n, 1), G.config.noise_dim, seed=seed)
    G.eval()
    with torch.no_grad():
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            imgs = G(torch.from_numpy(features[start:stop]), v_all[start:stop], stage, 1.0)
            out[start:stop] = imgs.numpy()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        np.save(os.path.join(out_dir, "reconstructions.npy"), out)
    return out


def upsample_to(images: np.ndarray, resolution: int) -> np.ndarray:
    """Bilinear resize helper for feeding stage-resolution outputs to the
    full-resolution matcher."""
    t = torch.as_tensor(images, dtype=torch.float32)
    if t.shape[-1] == resolution:
        return np.asarray(t)
    return F.interpolate(t, size=(resolution, resolution), mode="bilinear", align_corners=False).numpy()


# ---------------------------------------------------------------------------
# Identity preservation
# ---------------------------------------------------------------------------

def identity_preservation_accuracy(
    recons: np.ndarray,
    reference,
    matcher: TeacherModel,
    threshold: float | None = None,
    protocol: str = "classify",
    n_pairs: int = 1000,
    seed: int = 0,
    batch_size: int = 256,
) -> float:
    """How well reconstructions keep their source identity under the attacked
    matcher.

    ``classify``: fraction whose classifier prediction equals the source label
    (``reference`` is a label array). ``pairs``: verification accuracy where
    each positive pair has one side substituted by its reconstruction and
    negative pairs are real different-identity pairs (``reference`` is
    (real_images, labels); requires a threshold).
    """
    recons = np.asarray(recons, dtype=np.float32)
    if len(recons) == 0:
        raise ValueError("empty reconstruction set")
    recons = upsample_to(recons, matcher.resolution)

    if protocol == "classify":
        labels = np.asarray(reference)
        preds = np.concatenate(
            [matcher.predict(recons[i : i + batch_size]) for i in range(0, len(recons), batch_size)]
        )
        return float((preds == labels).mean())

    if protocol == "pairs":
        if threshold is None:
            raise ValueError("pair protocol needs a verification threshold")
        real_images, labels = reference
        labels = np.asarray(labels)
        f_recon = np.concatenate(
            [matcher.embed(recons[i : i + batch_size]).numpy() for i in range(0, len(recons), batch_size)]
        )
        f_real = np.concatenate(
            [
                matcher.embed(np.asarray(real_images[i : i + batch_size], dtype=np.float32)).numpy()
                for i in range(0, len(real_images), batch_size)
            ]
        )
        rng = np.random.default_rng(seed)
        by_label = {k: np.flatnonzero(labels == k) for k in np.unique(labels)}
        keys = [k for k in by_label if len(by_label[k]) >= 2]
        correct = 0
        for _ in range(n_pairs):  # positive pair, one side substituted
            k = keys[rng.integers(len(keys))]
            i, j = rng.choice(by_label[k], size=2, replace=False)
            match, _ = verify_pair(f_recon[i], f_real[j], threshold)
            correct += int(match)
        for _ in range(n_pairs):  # negative pair, both real
            k1, k2 = rng.choice(len(keys), size=2, replace=False)
            i = rng.choice(by_label[keys[k1]])
            j = rng.choice(by_label[keys[k2]])
            match, _ = verify_pair(f_real[i], f_real[j], threshold)
            correct += int(not match)
        return correct / (2 * n_pairs)

    raise ValueError(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# Multi-scale structural similarity
# ---------------------------------------------------------------------------

def _gaussian_window(win_size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(win_size, dtype=torch.float64) - (win_size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _ssim_and_cs(x: torch.Tensor, y: torch.Tensor, win_size: int, data_range: float):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = _gaussian_window(win_size, 1.5)
    kernel = torch.outer(win, win).view(1, 1, win_size, win_size)
    kernel = kernel.expand(x.shape[1], 1, -1, -1)

    def filt(t):
        return F.conv2d(t, kernel, groups=t.shape[1])

    mu_x, mu_y = filt(x), filt(y)
    sigma_x = filt(x * x) - mu_x**2
    sigma_y = filt(y * y) - mu_y**2
    sigma_xy = filt(x * y) - mu_x * mu_y
    cs_map = (2 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
    ssim_map = ((2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)) * cs_map
    return float(ssim_map.mean()), float(cs_map.mean())


def ms_ssim(
    image_a,
    image_b,
    win_size: int = 7,
    weights=MS_SSIM_WEIGHTS,
    data_range: float = 2.0,
) -> float:
    """Multi-scale SSIM with the standard five-level weighting. Images too
    small for all levels are scored over the levels that fit (weights
    renormalized) with a warning."""
    a = torch.as_tensor(np.asarray(image_a), dtype=torch.float64)
    b = torch.as_tensor(np.asarray(image_b), dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    while a.ndim < 4:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)

    levels = len(weights)
    feasible = 1
    side = min(a.shape[-2:])
    while feasible < levels and side // 2 >= win_size:
        feasible += 1
        side //= 2
    if feasible < levels:
        warnings.warn(
            f"image side {min(a.shape[-2:])} supports {feasible} of {levels} levels; "
            "weights renormalized",
            stacklevel=2,
        )
    w = np.asarray(weights[:feasible], dtype=np.float64)
    w = w / w.sum()

    value = 1.0
    for level in range(feasible):
        ssim_v, cs_v = _ssim_and_cs(a, b, win_size, data_range)
        term = ssim_v if level == feasible - 1 else cs_v
        value *= max(term, 0.0) ** w[level]
        if level < feasible - 1:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    return float(value)


def ms_ssim_diversity(images: np.ndarray, n_pairs: int = 200, seed: int = 0) -> float:
    """Mean MS-SSIM over random same-set pairs; lower means more diverse."""
    images = np.asarray(images)
    if len(images) < 2:
        raise ValueError("need at least two images")
    rng = np.random.default_rng(seed)
    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(n_pairs):
            i, j = rng.choice(len(images), size=2, replace=False)
            total += ms_ssim(images[i], images[j])
    return total / n_pairs


# ---------------------------------------------------------------------------
# Classifier score and silhouette
# ---------------------------------------------------------------------------

def classifier_score(images: np.ndarray, classifier: TeacherModel, batch_size: int = 256) -> float:
    """exp(mean KL(p(y|x) || p(y))) over the image set, using the attacked
    model's classification head as the scorer."""
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("empty image set")
    images = upsample_to(images, classifier.resolution)
    probs = np.concatenate(
        [classifier.class_probs(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    ).astype(np.float64)
    marginal = probs.mean(axis=0)
    kl = np.where(probs > 0, probs * (np.log(probs + 1e-300) - np.log(marginal + 1e-300)), 0.0).sum(axis=1)
    return float(np.exp(kl.mean()))


def silhouette(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distance. Fully degenerate
    inputs (zero spread everywhere) score 0 with a warning."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two classes")
    if counts.min() < 2:
        raise ValueError("silhouette needs at least two points per class")

    n = len(features)
    scores = np.zeros(n)
    masks = {k: labels == k for k in classes}
    for i in range(n):
        dists = np.linalg.norm(features - features[i], axis=1)
        own = labels[i]
        a = dists[masks[own]].sum() / (counts[classes == own][0] - 1)
        b = min(dists[masks[k]].mean() for k in classes if k != own)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    if np.all(scores == 0) and np.allclose(features, features[0]):
        warnings.warn("degenerate clustering input: all points identical; silhouette defined as 0")
    return float(scores.mean())


# ---------------------------------------------------------------------------
# Scatter plots
# ---------------------------------------------------------------------------

def scatter_figure(features: np.ndarray, labels: np.ndarray, seed: int = 0, method: str = "random"):
    """Build the 2-D scatter figure (one legend entry per class). The default
    projection is a seeded random orthonormal map (deterministic);
    ``method='tsne'`` uses a neighborhood embedding and is not run-to-run
    stable across library versions."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if method == "random":
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal((features.shape[1], 2))
        q, _ = np.linalg.qr(proj)
        coords = features @ q
    elif method == "tsne":
        from sklearn.manifold import TSNE

        coords = TSNE(n_components=2, random_state=seed, init="pca").fit_transform(features)
    else:
        raise ValueError(f"unknown projection method {method!r}")

    fig, ax = plt.subplots(figsize=(6, 6))
    for k in np.unique(labels):
        pts = coords[labels == k]
        ax.scatter(pts[:, 0], pts[:, 1], s=6, label=str(k))
    ax.legend(markerscale=2, fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    return fig


def plot_latent_scatter(
    features: np.ndarray,
    labels: np.ndarray,
    out_path: str,
    seed: int = 0,
    method: str = "random",
) -> str:
    """Render :func:`scatter_figure` to a raster file; byte-deterministic
    under a fixed seed with the default projection."""
    import matplotlib.pyplot as plt

    fig = scatter_figure(features, labels, seed=seed, method=method)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


# ---------------------------------------------------------------------------
# Ablation driver
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    config: str
    mode: str
    absent: bool
    identity_accuracy: float | None
    ms_ssim: float | None
    classifier_score: float | None
    silhouette: float | None
    fingerprint: str

    def csv_row(self) -> list:
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        return [
            self.config, self.mode, int(self.absent),
            fmt(self.identity_accuracy), fmt(self.ms_ssim),
            fmt(self.classifier_score), fmt(self.silhouette),
            self.fingerprint,
        ]


REPORT_COLUMNS = [
    "config", "mode", "absent", "identity_accuracy", "ms_ssim",
    "classifier_score", "silhouette", "fingerprint",
]


def _file_fingerprint(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def run_ablation(
    entries: list,
    teacher: TeacherModel,
    eval_features: np.ndarray,
    eval_labels: np.ndarray,
    out_csv: str | None = None,
    n_quality_pairs: int = 100,
    seed: int = 0,
) -> list:
    """Evaluate one row per (config label, mode) over cumulative-loss runs.

    Each entry is a dict with keys ``config``, ``mode`` and ``checkpoint``
    (path, or None when that run is unavailable; such rows are marked absent
    rather than given numbers)."""
    from .trainer import load_generator

    reports = []
    for entry in entries:
        ckpt = entry.get("checkpoint")
        if ckpt is None or not os.path.exists(ckpt or ""):
            reports.append(
                EvalReport(entry["config"], entry["mode"], True, None, None, None, None, "")
            )
            continue
        G, stage = load_generator(ckpt)
        recons = reconstruct_dataset(G, eval_features, v_policy="per_sample", seed=seed, stage=stage)
        recons_full = upsample_to(recons, teacher.resolution)
        accuracy = identity_preservation_accuracy(recons_full, eval_labels, teacher)
        quality = ms_ssim_diversity(recons_full, n_pairs=n_quality_pairs, seed=seed)
        score = classifier_score(recons_full, teacher)
        feats = np.concatenate(
            [teacher.embed(recons_full[i : i + 256]).numpy() for i in range(0, len(recons_full), 256)]
        )
        sil = silhouette(feats, eval_labels)
        reports.append(
            EvalReport(
                entry["config"], entry["mode"], False,
                accuracy, quality, score, sil, _file_fingerprint(ckpt),
            )
        )
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_COLUMNS)
            for report in reports:
                writer.writerow(report.csv_row())
    return reports
