"""Structured run configuration for generator training.

The on-disk format is JSON with one object per section; see ``RunConfig``
fields for the schema and defaults. ``RunConfig.from_file`` /
``RunConfig.to_file`` round-trip it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .errors import ConfigError


@dataclass
class DatasetSection:
    id: str = "digits"
    root: str | None = None
    train_size: int | None = None
    seed: int = 0


@dataclass
class ArtifactSection:
    teacher: str = ""
    flow: str = ""
    student: str | None = None


@dataclass
class OptimSection:
    lr: float = 0.0015
    beta1: float = 0.0
    beta2: float = 0.99


@dataclass
class TrainerSection:
    batch_base: int = 128  # at 4x4; halved per resolution doubling
    max_resolution: int = 32
    images_per_stage: int = 20000
    steps_per_stage: list | None = None  # overrides images_per_stage when set
    seed: int = 0
    checkpoint_every: int = 500
    out_dir: str = "runs/gan"


@dataclass
class LossSection:
    margin: float = 1.0
    gp_weight: float = 10.0
    lambda_j: list = field(default_factory=lambda: [1.0])  # broadcast over taps
    lambda_a: float = 10.0
    alpha: float = 0.001
    beta: float = 1.0
    moment_mode: str = "point_mass"
    moment_groups: int = 1
    identity_subbatch: int | None = None  # cap on samples per step for distill/biject


@dataclass
class GanSection:
    stage_channels: list = field(default_factory=lambda: [128, 64, 32, 16])
    noise_dim: int = 128
    cond_dim: int = 128
    mapping_layers: int = 8
    fade_fraction: float = 0.5


@dataclass
class AblationSection:
    enable_distill: bool = True
    enable_biject: bool = True


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    artifacts: ArtifactSection = field(default_factory=ArtifactSection)
    mode: str = "whitebox"
    optim: OptimSection = field(default_factory=OptimSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    losses: LossSection = field(default_factory=LossSection)
    gan: GanSection = field(default_factory=GanSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def __post_init__(self):
        if self.mode not in ("whitebox", "blackbox"):
            raise ConfigError(f"mode must be whitebox or blackbox, got {self.mode!r}")
        res = self.trainer.max_resolution
        if res < 4 or 2 ** int(math.log2(res)) != res:
            raise ConfigError(f"max_resolution must be a power of two >= 4, got {res}")
        if len(self.gan.stage_channels) != self.num_stages:
            raise ConfigError(
                f"{self.num_stages} stages need {self.num_stages} channel entries, "
                f"got {len(self.gan.stage_channels)}"
            )
        if self.trainer.steps_per_stage is not None and len(self.trainer.steps_per_stage) != self.num_stages:
            raise ConfigError("steps_per_stage must list one entry per stage")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.trainer.max_resolution)) - 1

    def batch_size_for_stage(self, stage: int) -> int:
        """The batch-size law: batch_base at 4x4, halved per doubling."""
        return max(1, self.trainer.batch_base // 2 ** (stage - 1))

    def steps_for_stage(self, stage: int) -> int:
        if self.trainer.steps_per_stage is not None:
            return int(self.trainer.steps_per_stage[stage - 1])
        return max(1, math.ceil(self.trainer.images_per_stage / self.batch_size_for_stage(stage)))

    def stage_resolutions(self) -> list:
        return [4 * 2 ** (s - 1) for s in range(1, self.num_stages + 1)]

    def to_file(self, path: str):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path) as f:
            raw = json.load(f)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        sections = {
            "dataset": DatasetSection,
            "artifacts": ArtifactSection,
            "optim": OptimSection,
            "trainer": TrainerSection,
            "losses": LossSection,
            "gan": GanSection,
            "ablation": AblationSection,
        }
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                known = sections[key].__dataclass_fields__
                unknown = set(value) - set(known)
                if unknown:
                    raise ConfigError(f"unknown keys in section {key!r}: {sorted(unknown)}")
                kwargs[key] = sections[key](**value)
            elif key == "mode":
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config section {key!r}")
        return cls(**kwargs)


def smoke_config(out_dir: str = "runs/smoke", **overrides) -> RunConfig:
    """Reduced CPU-friendly profile: stages 4 -> 16, 2k steps total."""
    cfg = RunConfig(
        trainer=TrainerSection(
            batch_base=16,
            max_resolution=16,
            steps_per_stage=[700, 650, 650],
            out_dir=out_dir,
        ),
        gan=GanSection(stage_channels=[64, 48, 32]),
    )
    cfg.losses.beta = 0.02
    cfg.losses.identity_subbatch = 32
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg
