"""Student network distilled from the blackbox feature extractor.

The student is a small residual CNN (four downsampling stages for 32x32
inputs) trained to align its embedding with the teacher's by cosine distance.
Once distilled it stands in for the teacher wherever gradients or intermediate
representations are needed: its tap outputs feed the intermediate-structure
term of the distillation loss and its feature head provides the surrogate
gradient path in blackbox mode.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .errors import ConfigError, TrainingDivergenceError
from .losses import distill_distance
from .oracle import FeatureOracle, TeacherModel


@dataclass
class StudentConfig:
    stage_widths: tuple = (32, 64, 96, 128)
    feature_dim: int = 1024
    channels: int = 1
    resolution: int = 32
    taps: tuple = (0, 1, 2, 3)  # stage indices exposed as intermediates


class _ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(width)

    def forward(self, x):
        h = self.bn2(self.conv2(torch.relu(self.bn1(self.conv1(x)))))
        return torch.relu(x + h)


class StudentNet(nn.Module):
    """Residual stages with stride-2 entries; taps are the stage outputs.
    Batch normalization keeps per-sample variance alive, which the cosine
    alignment objective needs (a constant output is a strong local optimum
    against common-direction-heavy teacher features)."""

    def __init__(self, config: StudentConfig):
        super().__init__()
        widths = config.stage_widths
        self.stem = nn.Conv2d(config.channels, widths[0], 3, padding=1)
        stages = []
        in_w = widths[0]
        for w in widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(in_w, w, 3, stride=2, padding=1),
                    nn.BatchNorm2d(w),
                    nn.ReLU(),
                    _ResBlock(w),
                )
            )
            in_w = w
        self.stages = nn.ModuleList(stages)
        final_res = config.resolution // (2 ** len(widths))
        if final_res < 1:
            raise ConfigError(f"too many stages for resolution {config.resolution}")
        self.fc = nn.Linear(widths[-1] * final_res * final_res, config.feature_dim)

    def features_and_taps(self, x):
        h = torch.relu(self.stem(x))
        taps = []
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        return self.fc(h.flatten(1)), taps

    def forward(self, x):
        return self.features_and_taps(x)[0]


class StudentModel:
    """Student network plus declared tap points and metadata."""

    def __init__(self, net: nn.Module, config: StudentConfig, metadata: dict | None = None):
        self.net = net
        self.config = config
        self.metadata = metadata or {}
        self.feature_dim = config.feature_dim
        with torch.no_grad():
            probe = torch.zeros(1, config.channels, config.resolution, config.resolution)
            _, taps = net.features_and_taps(probe)
        all_shapes = [tuple(t.shape[1:]) for t in taps]
        self.tap_shapes = [all_shapes[i] for i in config.taps]
        self.history: dict = {}

    def features_and_taps(self, images):
        feats, taps = self.net.features_and_taps(images)
        return feats, [taps[i] for i in self.config.taps]

    def embed(self, images) -> torch.Tensor:
        self.net.eval()
        with torch.no_grad():
            return self.net.features_and_taps(torch.as_tensor(images, dtype=torch.float32))[0]

    def parameters(self):
        return self.net.parameters()

    def save(self, path: str):
        torch.save(self.net.state_dict(), path)
        meta = dict(self.metadata)
        meta["config"] = {
            "stage_widths": list(self.config.stage_widths),
            "feature_dim": self.config.feature_dim,
            "channels": self.config.channels,
            "resolution": self.config.resolution,
            "taps": list(self.config.taps),
        }
        meta["history"] = {k: list(map(float, v)) for k, v in self.history.items()}
        with open(path + ".json", "w") as f:
            json.dump(meta, f, indent=2)


def load_student(path: str) -> StudentModel:
    with open(path + ".json") as f:
        meta = json.load(f)
    cfg = meta.pop("config")
    config = StudentConfig(
        stage_widths=tuple(cfg["stage_widths"]),
        feature_dim=cfg["feature_dim"],
        channels=cfg["channels"],
        resolution=cfg["resolution"],
        taps=tuple(cfg["taps"]),
    )
    net = StudentNet(config)
    net.load_state_dict(torch.load(path, weights_only=True))
    net.eval()
    model = StudentModel(net, config, meta)
    model.history = meta.get("history", {})
    return model


def build_student(config: StudentConfig, teacher_feature_dim: int | None = None) -> StudentModel:
    """Untrained student with declared tap shapes. The output dimension must
    match the teacher's."""
    if not config.taps:
        raise ConfigError("student needs at least one tap point")
    if any(t < 0 or t >= len(config.stage_widths) for t in config.taps):
        raise ConfigError(f"tap indices {config.taps} outside stage range")
    if teacher_feature_dim is not None and config.feature_dim != teacher_feature_dim:
        raise ConfigError(
            f"student output dim {config.feature_dim} != teacher dim {teacher_feature_dim}"
        )
    return StudentModel(StudentNet(config), config)


def student_from_teacher(teacher: TeacherModel) -> StudentModel:
    """Whitebox sanity configuration: the student is a parameter copy of the
    teacher, so the distillation distance is ~0 before any training."""
    net = copy.deepcopy(teacher.net)
    config = StudentConfig(
        stage_widths=(),
        feature_dim=teacher.feature_dim,
        channels=teacher.metadata["channels"],
        resolution=teacher.resolution,
        taps=(0, 1),
    )

    class _TeacherAsStudent(nn.Module):
        def __init__(self, inner):
            super().__init__()
            self.inner = inner

        def features_and_taps(self, x):
            return self.inner.features_and_taps(x)

        def forward(self, x):
            return self.inner.features(x)

    return StudentModel(_TeacherAsStudent(net), config, {"kind": "teacher-copy"})


def student_intermediates(student: StudentModel, images, taps=None):
    """Feature maps at the requested tap points (default: all declared)."""
    images = torch.as_tensor(images, dtype=torch.float32)
    feats, all_taps = student.features_and_taps(images)
    if taps is None:
        return all_taps
    declared = list(range(len(all_taps)))
    for t in taps:
        if t not in declared:
            raise ValueError(f"unknown tap {t}, declared taps are {declared}")
    return [all_taps[t] for t in taps]


@dataclass
class DistillConfig:
    epochs: int = 8
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1


def distill_student(
    student: StudentModel,
    oracle: FeatureOracle,
    dataset: Dataset,
    config: DistillConfig | None = None,
    verbose: bool = False,
) -> StudentModel:
    """Align the student's embedding with the blackbox oracle's by cosine
    distance. Keeps the best state by held-out mean distance; ``epochs=0``
    leaves the parameters untouched."""
    config = config or DistillConfig()
    if oracle.feature_dim != student.feature_dim:
        raise ConfigError(
            f"oracle dim {oracle.feature_dim} != student dim {student.feature_dim}"
        )

    # Blackbox access: one embedding pass over the corpus, values only.
    teacher_feats = []
    for start in range(0, len(dataset), 512):
        teacher_feats.append(oracle.embed(dataset.images[start : start + 512]))
    teacher_feats = torch.from_numpy(np.concatenate(teacher_feats))

    torch.manual_seed(config.seed)
    images = torch.from_numpy(dataset.images)
    n_val = max(1, int(len(dataset) * config.val_fraction))
    perm = np.random.default_rng(config.seed).permutation(len(dataset))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    def val_distance() -> float:
        student.net.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for start in range(0, len(val_idx), 256):
                idx = val_idx[start : start + 256]
                f_s = student.net.features_and_taps(images[idx])[0]
                total += float(distill_distance(teacher_feats[idx], f_s).sum())
                count += len(idx)
        return total / count

    history = {"val_distance": [val_distance()]}
    if verbose:
        print(f"[distill] init held-out distance {history['val_distance'][0]:.4f}")

    best = {k: v.clone() for k, v in student.net.state_dict().items()}
    best_distance = history["val_distance"][0]
    opt = torch.optim.Adam(student.net.parameters(), lr=config.lr)
    order_rng = np.random.default_rng(config.seed + 1)
    for epoch in range(config.epochs):
        student.net.train()
        order = train_idx[order_rng.permutation(len(train_idx))]
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            f_s = student.net.features_and_taps(images[idx])[0]
            loss = distill_distance(teacher_feats[idx], f_s).mean()
            if not torch.isfinite(loss):
                student.net.load_state_dict(best)
                raise TrainingDivergenceError(
                    f"non-finite distillation loss at epoch {epoch}", last_checkpoint=best
                )
            loss.backward()
            opt.step()
        d = val_distance()
        history["val_distance"].append(d)
        if d < best_distance:
            best_distance = d
            best = {k: v.clone() for k, v in student.net.state_dict().items()}
        if verbose:
            print(f"[distill] epoch {epoch + 1}/{config.epochs} held-out distance {d:.4f}")

    student.net.load_state_dict(best)
    student.net.eval()
    student.history = history
    student.metadata["val_distance"] = best_distance
    return student
