"""The feature extractor under attack: a LeNet-style classifier whose
penultimate activations are the embedding, plus feature caching and pair
verification.

The blackbox contract is enforced at the API level: :class:`FeatureOracle`
exposes only ``embed`` and ``verify_pair`` and returns plain numpy arrays, so
no gradient can flow through it. Whitebox access goes through
:meth:`TeacherModel.tap_model`.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .errors import FormatError, TrainingDivergenceError

CACHE_MAGIC = b"DBGF"
CACHE_VERSION = 1


class TeacherNet(nn.Module):
    """LeNet-style CNN for 32x32 inputs with a widened 1024-unit penultimate
    layer serving as the embedding."""

    def __init__(self, channels: int = 1, feature_dim: int = 1024, num_classes: int = 10):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, 6, kernel_size=5)
        self.conv2 = nn.Conv2d(6, 16, kernel_size=5)
        self.pool = nn.MaxPool2d(2)
        self.fc_feat = nn.Linear(16 * 5 * 5, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)
        self.feature_dim = feature_dim
        self.num_classes = num_classes

    def taps(self, x):
        """Intermediate activations after each conv/pool stage."""
        t1 = self.pool(torch.relu(self.conv1(x)))
        t2 = self.pool(torch.relu(self.conv2(t1)))
        return [t1, t2]

    def features(self, x):
        t2 = self.taps(x)[1]
        return torch.relu(self.fc_feat(t2.flatten(1)))

    def features_and_taps(self, x):
        t1 = self.pool(torch.relu(self.conv1(x)))
        t2 = self.pool(torch.relu(self.conv2(t1)))
        feats = torch.relu(self.fc_feat(t2.flatten(1)))
        return feats, [t1, t2]

    def forward(self, x):
        return self.head(self.features(x))


@dataclass
class TeacherModel:
    """Trained teacher plus its metadata (resolution, dims, seed, accuracy)."""

    net: TeacherNet
    metadata: dict

    @property
    def feature_dim(self) -> int:
        return self.metadata["feature_dim"]

    @property
    def resolution(self) -> int:
        return self.metadata["resolution"]

    def _check_input(self, images: torch.Tensor):
        if images.ndim != 4:
            raise ValueError(f"expected [N, C, H, W] batch, got shape {tuple(images.shape)}")
        _, c, h, w = images.shape
        if (h, w) != (self.resolution, self.resolution) or c != self.metadata["channels"]:
            raise ValueError(
                f"input {c}x{h}x{w} does not match teacher "
                f"{self.metadata['channels']}x{self.resolution}x{self.resolution}"
            )

    def embed(self, images, grad: bool = False) -> torch.Tensor:
        """Forward map to features. ``grad=True`` keeps the autograd graph
        (whitebox use only)."""
        images = torch.as_tensor(images, dtype=torch.float32)
        self._check_input(images)
        self.net.eval()
        if grad:
            return self.net.features(images)
        with torch.no_grad():
            return self.net.features(images)

    def predict(self, images) -> np.ndarray:
        """Classifier-head predictions (the attacked engine judging)."""
        images = torch.as_tensor(images, dtype=torch.float32)
        self._check_input(images)
        self.net.eval()
        with torch.no_grad():
            return self.net(images).argmax(dim=1).numpy()

    def class_probs(self, images) -> np.ndarray:
        images = torch.as_tensor(images, dtype=torch.float32)
        self._check_input(images)
        self.net.eval()
        with torch.no_grad():
            return torch.softmax(self.net(images), dim=1).numpy()

    def blackbox(self) -> "FeatureOracle":
        return FeatureOracle(self)

    def tap_model(self) -> "TeacherTapModel":
        """Whitebox adapter exposing intermediate layers for distillation."""
        return TeacherTapModel(self)

    def save(self, path: str):
        torch.save(self.net.state_dict(), path)
        with open(_sidecar(path), "w") as f:
            json.dump(self.metadata, f, indent=2)

    def state_fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(p.numpy().tobytes())
        return h.hexdigest()[:16]


class TeacherTapModel:
    """Exposes the teacher's own intermediate layers behind the same interface
    a distilled student offers (whitebox mode of the distillation loss)."""

    def __init__(self, teacher: TeacherModel):
        self.teacher = teacher
        self.feature_dim = teacher.feature_dim
        with torch.no_grad():
            probe = torch.zeros(1, teacher.metadata["channels"], teacher.resolution, teacher.resolution)
            _, taps = teacher.net.features_and_taps(probe)
        self.tap_shapes = [tuple(t.shape[1:]) for t in taps]

    def features_and_taps(self, images):
        return self.teacher.net.features_and_taps(images)

    def parameters(self):
        return self.teacher.net.parameters()


class FeatureOracle:
    """Blackbox handle: feature values in, feature values out, nothing else."""

    def __init__(self, teacher: TeacherModel):
        self._teacher = teacher
        self.feature_dim = teacher.feature_dim
        self.resolution = teacher.resolution

    def embed(self, images) -> np.ndarray:
        return self._teacher.embed(images, grad=False).numpy()

    def verify_pair(self, feature_a, feature_b, threshold: float):
        return verify_pair(feature_a, feature_b, threshold)


def _sidecar(path: str) -> str:
    return path + ".json"


def load_teacher(path: str) -> TeacherModel:
    with open(_sidecar(path)) as f:
        metadata = json.load(f)
    net = TeacherNet(
        channels=metadata["channels"],
        feature_dim=metadata["feature_dim"],
        num_classes=metadata["num_classes"],
    )
    net.load_state_dict(torch.load(path, weights_only=True))
    net.eval()
    return TeacherModel(net, metadata)


def train_teacher(
    train_set: Dataset,
    test_set: Dataset | None = None,
    epochs: int = 10,
    seed: int = 0,
    batch_size: int = 128,
    lr: float = 1e-3,
    feature_dim: int = 1024,
    verbose: bool = False,
) -> TeacherModel:
    """Train the classifier whose penultimate layer is the embedding.

    Raises :class:`TrainingDivergenceError` carrying the last stable epoch
    state if the loss goes non-finite.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if len(train_set) == 0:
        raise ValueError("empty training set")

    torch.manual_seed(seed)
    net = TeacherNet(
        channels=train_set.channels,
        feature_dim=feature_dim,
        num_classes=int(train_set.labels.max()) + 1,
    )
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    images = torch.from_numpy(train_set.images)
    labels = torch.from_numpy(train_set.labels)

    last_stable = {k: v.clone() for k, v in net.state_dict().items()}
    order_rng = np.random.default_rng(seed)
    net.train()
    for epoch in range(epochs):
        order = order_rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            loss = loss_fn(net(images[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}", last_checkpoint=last_stable
                )
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        last_stable = {k: v.clone() for k, v in net.state_dict().items()}
        if verbose:
            print(f"[teacher] epoch {epoch + 1}/{epochs} loss {epoch_loss / len(train_set):.4f}")

    net.eval()
    metadata = {
        "resolution": train_set.resolution,
        "channels": train_set.channels,
        "feature_dim": feature_dim,
        "num_classes": net.num_classes,
        "seed": seed,
        "epochs": epochs,
        "train_set": train_set.name,
        "test_accuracy": None,
    }
    model = TeacherModel(net, metadata)
    if test_set is not None and len(test_set) > 0:
        preds = _batched_predict(model, test_set.images)
        acc = float((preds == test_set.labels).mean())
        metadata["test_accuracy"] = acc
        if verbose:
            print(f"[teacher] test accuracy {acc:.4f}")
    return model


def _batched_predict(model: TeacherModel, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model.predict(images[start : start + batch_size]))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def embed_dataset(model: TeacherModel, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model.embed(images[start : start + batch_size]).numpy())
    return (
        np.concatenate(out)
        if out
        else np.empty((0, model.feature_dim), dtype=np.float32)
    )


# ---------------------------------------------------------------------------
# Feature cache (DBGF binary format)
# ---------------------------------------------------------------------------

def write_feature_cache(path: str, labels: np.ndarray, features: np.ndarray, append: bool = False):
    """Write (or append to) a DBGF cache: magic, u32 version, u32 count,
    u32 dim, then per-record (u32 label, dim x f32), all little-endian."""
    labels = np.asarray(labels, dtype="<u4")
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2 or len(labels) != len(features):
        raise ValueError("features must be [N, M] with one label per row")
    dim = features.shape[1]

    if append and os.path.exists(path):
        old_labels, old_features = read_feature_cache(path)
        if old_features.shape[1] != dim:
            raise FormatError(
                f"refusing to append dim-{dim} features to dim-{old_features.shape[1]} cache {path}"
            )
        labels = np.concatenate([old_labels.astype("<u4"), labels])
        features = np.concatenate([old_features.astype("<f4"), features])

    record = np.zeros(len(labels), dtype=np.dtype([("label", "<u4"), ("feature", "<f4", (dim,))]))
    record["label"] = labels
    record["feature"] = features
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<III", CACHE_VERSION, len(labels), dim))
        record.tofile(f)


def read_feature_cache(path: str):
    """Read a DBGF cache back to (labels int64 [N], features float32 [N, M])."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) < 16 or header[:4] != CACHE_MAGIC:
            raise FormatError(f"{path}: bad magic bytes, not a feature cache")
        version, count, dim = struct.unpack("<III", header[4:])
        if version != CACHE_VERSION:
            raise FormatError(f"{path}: unsupported cache version {version}")
        expected = 16 + count * (4 + 4 * dim)
        if size != expected:
            raise FormatError(f"{path}: size {size} does not match header ({expected} expected)")
        record = np.fromfile(f, dtype=np.dtype([("label", "<u4"), ("feature", "<f4", (dim,))]), count=count)
    return record["label"].astype(np.int64), record["feature"].astype(np.float32).reshape(count, dim)


def cache_features(model: TeacherModel, dataset: Dataset, path: str, batch_size: int = 512):
    """Embed a dataset and persist it as a DBGF cache file."""
    feats = embed_dataset(model, dataset.images, batch_size=batch_size)
    write_feature_cache(path, dataset.labels, feats)
    return path


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"feature dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm feature vector")
    if np.array_equal(a, b):  # score(f, f) is exactly 1
        return 1.0
    if np.array_equal(a, -b):
        return -1.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def verify_pair(feature_a, feature_b, threshold: float):
    """Cosine-similarity match decision: (match, score)."""
    score = cosine_similarity(feature_a, feature_b)
    return score >= threshold, score


def find_eer_threshold(features: np.ndarray, labels: np.ndarray, n_pairs: int = 2000, seed: int = 0):
    """Equal-error-rate threshold over sampled genuine/impostor pairs."""
    rng = np.random.default_rng(seed)
    normed = features / np.linalg.norm(features, axis=1, keepdims=True)
    genuine, impostor = [], []
    by_label = {k: np.flatnonzero(labels == k) for k in np.unique(labels)}
    keys = list(by_label)
    while len(genuine) < n_pairs:
        k = keys[rng.integers(len(keys))]
        if len(by_label[k]) < 2:
            continue
        i, j = rng.choice(by_label[k], size=2, replace=False)
        genuine.append(normed[i] @ normed[j])
    while len(impostor) < n_pairs:
        k1, k2 = rng.choice(len(keys), size=2, replace=False)
        i = rng.choice(by_label[keys[k1]])
        j = rng.choice(by_label[keys[k2]])
        impostor.append(normed[i] @ normed[j])
    genuine = np.sort(genuine)
    impostor = np.sort(impostor)
    candidates = np.unique(np.concatenate([genuine, impostor]))
    best_t, best_gap = 0.5, np.inf
    for t in candidates:
        far = np.mean(impostor >= t)
        frr = np.mean(genuine < t)
        if abs(far - frr) < best_gap:
            best_gap, best_t = abs(far - frr), float(t)
    return best_t
